//! Synthetic shape dataset: generation, on-disk layout and loading.
//!
//! A dataset directory holds `classes.txt` and two splits, `train/` and
//! `test/`, each with `images/*.ppm` and an `annotations.txt` whose lines read
//! `image_path class_id xmin ymin xmax ymax` (paths relative to the split).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mrfdet_core::anchors::{BBox, GroundTruth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{DatasetSpec, Shape};
use crate::image::RgbImage;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Path relative to the split directory.
    pub path: String,
    pub image: RgbImage,
    pub objects: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

const PALETTE: [[u8; 3]; 6] = [
    [225, 60, 55],
    [55, 200, 80],
    [70, 100, 235],
    [225, 205, 50],
    [200, 75, 220],
    [50, 205, 215],
];

/// Per-class texture: 0 solid, 1 horizontal stripes, 2 checkerboard.
fn class_color(class_id: usize, x: usize, y: usize) -> [u8; 3] {
    let base = PALETTE[class_id % PALETTE.len()];
    let dark = match class_id % 3 {
        0 => false,
        1 => (y / 2) % 2 == 1,
        _ => ((x / 2) + (y / 2)) % 2 == 1,
    };
    if dark {
        base.map(|v| (v as f64 * 0.6).round() as u8)
    } else {
        base
    }
}

/// Whether the pixel whose centre is `(px, py)` lies inside `shape` inscribed in the box.
fn covers(shape: Shape, b: &BBox, px: f64, py: f64) -> bool {
    let (w, h) = (b.width(), b.height());
    let (cx, cy) = (b.xmin + w / 2.0, b.ymin + h / 2.0);
    match shape {
        Shape::Rectangle => px >= b.xmin && px <= b.xmax && py >= b.ymin && py <= b.ymax,
        Shape::Ellipse => {
            let (u, v) = ((px - cx) / (w / 2.0), (py - cy) / (h / 2.0));
            u * u + v * v <= 1.0
        }
        Shape::Triangle => {
            // Apex at the top centre, base along the bottom edge.
            let t = (py - b.ymin) / h;
            (0.0..=1.0).contains(&t) && (px - cx).abs() <= t * w / 2.0
        }
    }
}

/// Pixel support of a shape inside its placement box.
pub fn shape_support(shape: Shape, placement: &BBox) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in placement.ymin as usize..placement.ymax as usize {
        for x in placement.xmin as usize..placement.xmax as usize {
            if covers(shape, placement, x as f64 + 0.5, y as f64 + 0.5) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Smallest pixel-aligned box containing every listed pixel.
pub fn support_box(pixels: &[(usize, usize)]) -> Option<BBox> {
    let x0 = pixels.iter().map(|p| p.0).min()?;
    let y0 = pixels.iter().map(|p| p.1).min()?;
    let x1 = pixels.iter().map(|p| p.0).max()? + 1;
    let y1 = pixels.iter().map(|p| p.1).max()? + 1;
    Some(BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.xmin < b.xmax && b.xmin < a.xmax && a.ymin < b.ymax && b.ymin < a.ymax
}

fn render_image(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (RgbImage, Vec<GroundTruth>) {
    let n = spec.image_size;
    let level = rng.random_range(70.0..140.0);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite std");
    let mut img = RgbImage::filled(n, n, [0, 0, 0]);
    for y in 0..n {
        for x in 0..n {
            let v = if spec.noise > 0.0 { level + noise.sample(rng) } else { level };
            let g = v.round().clamp(0.0, 255.0) as u8;
            img.set(x, y, [g, g, g]);
        }
    }

    let count = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut placed: Vec<BBox> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..count {
        let class_id = rng.random_range(0..spec.classes.len());
        let (lo, hi) = if rng.random_bool(spec.small_fraction) {
            spec.small_side
        } else {
            spec.large_side
        };
        let (w, h) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let mut place = || {
            let x = rng.random_range(0..=n - w) as f64;
            let y = rng.random_range(0..=n - h) as f64;
            BBox::new(x, y, x + w as f64, y + h as f64)
        };
        // Prefer a free spot; fall back to overlapping after a bounded search.
        let mut b = place();
        for _ in 0..50 {
            if placed.iter().all(|p| !overlaps(p, &b)) {
                break;
            }
            b = place();
        }
        let shape = spec.classes[class_id];
        let support = shape_support(shape, &b);
        let Some(tight) = support_box(&support) else {
            continue;
        };
        for &(x, y) in &support {
            img.set(x, y, class_color(class_id, x, y));
        }
        placed.push(b);
        objects.push(GroundTruth { bbox: tight, class_id });
    }
    (img, objects)
}

fn synth_split(spec: &DatasetSpec, stream: u64, count: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    (0..count)
        .map(|i| {
            let (image, objects) = render_image(spec, &mut rng);
            Sample {
                path: format!("images/{i:05}.ppm"),
                image,
                objects,
            }
        })
        .collect()
}

/// Deterministic in `spec` (the two splits use independent random streams).
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        class_names: spec.classes.iter().map(|c| c.name().to_string()).collect(),
        train: synth_split(spec, 1, spec.train_images),
        test: synth_split(spec, 2, spec.test_images),
    })
}

pub fn format_annotations(samples: &[Sample]) -> String {
    let mut s = String::new();
    for smp in samples {
        for o in &smp.objects {
            let b = o.bbox;
            s.push_str(&format!(
                "{} {} {} {} {} {}\n",
                smp.path, o.class_id, b.xmin, b.ymin, b.xmax, b.ymax
            ));
        }
    }
    s
}

pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).with_context(|| format!("creating {}", dir.display()))?;
    for s in samples {
        s.image.save(&dir.join(&s.path))?;
    }
    let ann = dir.join("annotations.txt");
    fs::write(&ann, format_annotations(samples)).with_context(|| format!("writing {}", ann.display()))
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("classes.txt"), ds.class_names.join("\n") + "\n")
        .with_context(|| format!("writing classes into {}", dir.display()))?;
    write_split(&dir.join("train"), &ds.train)?;
    write_split(&dir.join("test"), &ds.test)
}

/// Parses annotation lines, grouping objects per image in first-seen order.
pub fn parse_annotations(text: &str) -> Result<Vec<(String, Vec<GroundTruth>)>> {
    let mut out: Vec<(String, Vec<GroundTruth>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            bail!("annotation line {}: expected 6 fields, got {}", i + 1, f.len());
        }
        let class_id: usize = f[1].parse().with_context(|| format!("annotation line {}: class id", i + 1))?;
        let mut c = [0.0; 4];
        for (k, v) in f[2..].iter().enumerate() {
            c[k] = v.parse().with_context(|| format!("annotation line {}: coordinate {v:?}", i + 1))?;
        }
        let bbox = BBox::new(c[0], c[1], c[2], c[3]);
        bbox.validate().with_context(|| format!("annotation line {}", i + 1))?;
        let gt = GroundTruth { bbox, class_id };
        match out.iter_mut().find(|(p, _)| p == f[0]) {
            Some((_, objs)) => objs.push(gt),
            None => out.push((f[0].to_string(), vec![gt])),
        }
    }
    Ok(out)
}

/// `dir` itself when it holds `annotations.txt`, else `dir/<split>`.
pub fn resolve_split(dir: &Path, split: &str) -> PathBuf {
    if dir.join("annotations.txt").is_file() {
        dir.to_path_buf()
    } else {
        dir.join(split)
    }
}

pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let ann = dir.join("annotations.txt");
    let text = fs::read_to_string(&ann).with_context(|| format!("reading {}", ann.display()))?;
    parse_annotations(&text)?
        .into_iter()
        .map(|(path, objects)| {
            let image = RgbImage::load(&dir.join(&path))?;
            Ok(Sample { path, image, objects })
        })
        .collect()
}

/// Class names from `classes.txt` beside or above a split directory.
pub fn load_class_names(dir: &Path) -> Result<Vec<String>> {
    for cand in [dir.join("classes.txt"), dir.join("..").join("classes.txt")] {
        if cand.is_file() {
            let text = fs::read_to_string(&cand)?;
            return Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
        }
    }
    bail!("no classes.txt in or above {}", dir.display())
}
