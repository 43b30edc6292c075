//! The `mrfdet` binary end to end: outputs, files and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mrfdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrfdet")).args(args).output().expect("spawn mrfdet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Nonzero exit with a single `error:` line.
fn assert_rejected(o: &Output, needle: &str) {
    assert!(!o.status.success(), "unexpected success: {}", stdout(o));
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:") && err.contains(needle), "{err}");
}

const SMALL: &str = "\
# tiny run
data.train_images = 6
data.test_images = 3
train.epochs = 1
train.warmup_epochs = 0.5
train.lr_drops =
";

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_eval_mask_gen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.conf");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");

    let o = mrfdet(&["synth", "--spec", p(&cfg), "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("6 train + 3 test images"));
    assert!(data.join("train/annotations.txt").is_file());
    assert_eq!(fs::read_to_string(data.join("classes.txt")).unwrap().lines().count(), 3);

    let o = mrfdet(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ckpt.is_file());
    let log = fs::read_to_string(dir.path().join("model.ckpt.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("epoch 1 step ") && l.contains(" total ")));

    let first = mrfdet(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("mAP"));
    assert_eq!(stdout(&first), stdout(&mrfdet(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)])));
    let coco = mrfdet(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--coco-style"]);
    assert!(coco.status.success());
    assert!(stdout(&coco).contains("0.5:0.95"), "{}", stdout(&coco));

    let masks = dir.path().join("masks");
    let o = mrfdet(&["mask-gen", "--data", p(&data), "--t1", "100", "--t2", "900", "--out", p(&masks)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = fs::read(masks.join("train/images/00000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    assert!(pgm[pgm.len() - 64 * 64..].iter().all(|v| [0, 128, 255].contains(v)));
    assert_eq!(fs::read_dir(masks.join("test/images")).unwrap().count(), 3);

    // A dataset whose class list disagrees with the checkpoint.
    fs::write(data.join("classes.txt"), "a\nb\n").unwrap();
    assert_rejected(&mrfdet(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]), "classes");
}

#[test]
fn gradcheck_passes_and_rejects_unknown_modules() {
    let o = mrfdet(&["gradcheck", "--module", "loss"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 5, "{out}");
    assert!(!out.contains("FAIL"));
    assert_rejected(&mrfdet(&["gradcheck", "--module", "everything"]), "unknown gradcheck module");
}

#[test]
fn rf_report_and_describe() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("mrf.spec");
    fs::write(&spec, "mrf.in_channels = 64\nmrf.branches = 1:1, 3:1, 3:2, 3:3, 5:1, 5:5\n").unwrap();
    let o = mrfdet(&["rf-report", "--spec", p(&spec)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.split_whitespace().collect::<Vec<_>>()[..4] == ["5", "5", "5", "21"]), "{out}");

    let o = mrfdet(&["describe"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("anchors 1520  parameters 362946"));

    fs::write(&spec, "mrf.in_channels = 64\nmrf.branches = 3:x\n").unwrap();
    assert_rejected(&mrfdet(&["rf-report", "--spec", p(&spec)]), "mrf.spec");
}

#[test]
fn bad_inputs_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "train.epochs = 3\ntrain.learning_rate = 1\n").unwrap();
    assert_rejected(&mrfdet(&["describe", "--config", p(&cfg)]), "learning_rate");

    fs::write(&cfg, "train.epochs = 4\ntrain.lr_drops = 5\n").unwrap();
    assert_rejected(&mrfdet(&["describe", "--config", p(&cfg)]), "lr drops");

    let missing = dir.path().join("nowhere");
    assert_rejected(
        &mrfdet(&["eval", "--ckpt", p(&missing.join("m.ckpt")), "--data", p(&missing)]),
        "m.ckpt",
    );

    let not_ckpt = dir.path().join("fake.ckpt");
    fs::write(&not_ckpt, b"hello").unwrap();
    assert_rejected(&mrfdet(&["eval", "--ckpt", p(&not_ckpt), "--data", p(&missing)]), "magic");

    // Output path below a regular file cannot be created.
    fs::write(&cfg, SMALL).unwrap();
    assert_rejected(&mrfdet(&["synth", "--spec", p(&cfg), "--out", p(&not_ckpt.join("d"))]), "fake.ckpt");
    assert_rejected(&mrfdet(&["mask-gen", "--data", p(&missing), "--out", p(&missing)]), "");

    assert!(!mrfdet(&[]).status.success());
    assert!(!mrfdet(&["train", "--data", "x"]).status.success());
}
