use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mrfdet::ablate::{ablate, format_table};
use mrfdet::checkpoint::load_state;
use mrfdet::config::{parse_mrf_spec, DatasetSpec, ExperimentConfig};
use mrfdet::dataset::{load_class_names, load_split, resolve_split, synth_dataset, write_dataset};
use mrfdet::image::encode_pgm;
use mrfdet::infer::{evaluate_model, InferenceConfig};
use mrfdet::train::{train, TrainState};
use mrfdet_core::eval::format_report;
use mrfdet_core::gradsuite::{format_results, run_suite, Suite};
use mrfdet_core::mrf::{format_rf_report, rf_report};
use mrfdet_core::net::build_network;
use mrfdet_core::sws::{rasterize_sws_mask, AreaThresholds, SegLabel};

#[derive(Parser)]
#[command(name = "mrfdet", version, about = "Desk-scale single-shot detector with multi-receptive-field heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset (train/ and test/ splits).
    Synth {
        /// Config file; only `data.*` keys are used.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch (or resume) and checkpoint after every epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root or a split directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the per-step log goes to `<out>.log`.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint at `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Detection metrics of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root (its test split is used) or a split directory.
        #[arg(long)]
        data: PathBuf,
        /// All-point AP plus AP@0.75, AP@[0.5:0.95] and per-area AP.
        #[arg(long)]
        coco_style: bool,
    },
    /// Train and evaluate the five-row design ladder under one budget.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use this dataset instead of rendering one from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Write segmentation target masks as PGM (0 background, 128 ignore, 255 foreground).
    MaskGen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1024.0)]
        t1: f64,
        #[arg(long, default_value_t = 9216.0)]
        t2: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tap layout and effective kernel of every MRF branch.
    RfReport {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Architecture summary of a config.
    Describe {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let data: DatasetSpec = load_config(spec)?.data;
    let ds = synth_dataset(&data)?;
    write_dataset(out, &ds)?;
    let objects: usize = ds.train.iter().chain(&ds.test).map(|s| s.objects.len()).sum();
    println!(
        "wrote {} train + {} test images ({objects} objects) to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn check_classes(data: &Path, cfg: &ExperimentConfig) -> Result<()> {
    if let Ok(names) = load_class_names(data) {
        if names.len() != cfg.data.classes.len() {
            bail!(
                "dataset has {} classes, config declares {}",
                names.len(),
                cfg.data.classes.len()
            );
        }
    }
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let mut state = if resume {
        load_state(out)?
    } else {
        TrainState::new(&load_config(config)?)?
    };
    check_classes(data, &state.config)?;
    let split = resolve_split(data, "train");
    let samples = load_split(&split)?;
    let log_path = PathBuf::from(format!("{}.log", out.display()));
    let log_file = if resume {
        File::options().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    };
    let mut log = BufWriter::new(log_file.with_context(|| format!("opening {}", log_path.display()))?);
    println!(
        "training {} parameters on {} images for epochs {}..{}",
        state.net.num_params(),
        samples.len(),
        state.epoch + 1,
        state.config.train.epochs
    );
    let t0 = Instant::now();
    let mut io_err = None;
    let (mut sum, mut n, mut epoch) = (0.0, 0usize, state.epoch + 1);
    let result = train(&mut state, &samples, Some(out), &mut |s| {
        if let Err(e) = writeln!(log, "{}", s.line()) {
            io_err.get_or_insert(e);
        }
        if s.epoch != epoch {
            println!("epoch {epoch:>3}  mean loss {:.4}  {:.0?}", sum / n as f64, t0.elapsed());
            (sum, n, epoch) = (0.0, 0, s.epoch);
        }
        sum += s.loss.total;
        n += 1;
    });
    if n > 0 {
        println!("epoch {epoch:>3}  mean loss {:.4}  {:.0?}", sum / n as f64, t0.elapsed());
    }
    log.flush()?;
    result?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    println!("checkpoint {}  log {}", out.display(), log_path.display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, coco_style: bool) -> Result<()> {
    let state = load_state(ckpt)?;
    check_classes(data, &state.config)?;
    let split = resolve_split(data, "test");
    let samples = load_split(&split)?;
    let names = load_class_names(&split).unwrap_or_else(|_| state.config.class_names());
    let ev = evaluate_model(&state.net, &samples, &InferenceConfig::for_config(&state.config), coco_style)?;
    print!("{}", format_report(&ev.report, &names, ev.coco.as_ref()));
    Ok(())
}

fn ablate_cmd(config: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = match data {
        Some(d) => mrfdet::dataset::Dataset {
            class_names: load_class_names(d)?,
            train: load_split(&d.join("train"))?,
            test: load_split(&d.join("test"))?,
        },
        None => synth_dataset(&cfg.data)?,
    };
    let t0 = Instant::now();
    let rows = ablate(&cfg, &ds, &mut |r| {
        println!("{:<18} mAP@0.5 {:.4}  ({:.0?})", r.name, r.map, t0.elapsed());
    })?;
    print!("\n{}", format_table(&rows));
    Ok(())
}

fn gradcheck_cmd(module: &str) -> Result<bool> {
    let suites = if module == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![module.parse::<Suite>()?]
    };
    let t0 = Instant::now();
    let mut ok = true;
    let mut count = 0;
    for s in suites {
        let results = run_suite(s)?;
        print!("{}", format_results(&results));
        ok &= results.iter().all(|r| r.passed());
        count += results.len();
    }
    println!(
        "{count} checks, {} in {:.2?}",
        if ok { "all passed" } else { "FAILURES" },
        t0.elapsed()
    );
    Ok(ok)
}

fn mask_gen(data: &Path, t1: f64, t2: f64, out: &Path) -> Result<()> {
    let thresholds = AreaThresholds::new(t1, t2)?;
    let splits: Vec<(PathBuf, PathBuf)> = if data.join("annotations.txt").is_file() {
        vec![(data.to_path_buf(), out.to_path_buf())]
    } else {
        ["train", "test"]
            .iter()
            .map(|s| (data.join(s), out.join(s)))
            .filter(|(d, _)| d.is_dir())
            .collect()
    };
    if splits.is_empty() {
        bail!("{} holds no annotations.txt and no train/ or test/ split", data.display());
    }
    let mut counts = [0usize; 3];
    let mut images = 0;
    for (src, dst) in splits {
        for s in load_split(&src)? {
            let boxes: Vec<_> = s.objects.iter().map(|o| o.bbox).collect();
            let mask = rasterize_sws_mask(&boxes, s.image.width, s.image.height, &thresholds);
            for (i, l) in [SegLabel::Background, SegLabel::Ignore, SegLabel::Foreground].into_iter().enumerate() {
                counts[i] += mask.count(l);
            }
            let path = dst.join(Path::new(&s.path).with_extension("pgm"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(&path, encode_pgm(mask.width(), mask.height(), &mask.to_gray()))
                .with_context(|| format!("writing {}", path.display()))?;
            images += 1;
        }
    }
    println!(
        "{images} masks in {}  pixels: background {} ignore {} foreground {}",
        out.display(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

fn rf_report_cmd(spec: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec = parse_mrf_spec(&text).with_context(|| format!("in {}", spec.display()))?;
    print!("{}", format_rf_report(&rf_report(&spec)));
    Ok(())
}

fn describe(config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let net = build_network(&cfg.net(), cfg.train.seed)?;
    print!("{}", net.describe());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { spec, out } => synth(spec.as_deref(), &out)?,
        Command::Train { config, data, out, resume } => train_cmd(config.as_deref(), &data, &out, resume)?,
        Command::Eval { ckpt, data, coco_style } => eval_cmd(&ckpt, &data, coco_style)?,
        Command::Ablate { config, data } => ablate_cmd(config.as_deref(), data.as_deref())?,
        Command::Gradcheck { module } => return gradcheck_cmd(&module),
        Command::MaskGen { data, t1, t2, out } => mask_gen(&data, t1, t2, &out)?,
        Command::RfReport { spec } => rf_report_cmd(&spec)?,
        Command::Describe { config } => describe(config.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
