//! Line-based `key = value` experiment configuration.
//!
//! Keys are grouped by prefix: `data.*` describes the synthetic dataset,
//! `train.*` the optimizer, schedule and model toggles. Blank lines and
//! `#` comments are skipped; unknown or repeated keys are rejected.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use mrfdet_core::anchors::BoxCoder;
use mrfdet_core::losses::LossConfig;
use mrfdet_core::mrf::{mrf_spec_with_branches, MrfBlockSpec};
use mrfdet_core::net::{NetConfig, SegMode, Toggles};
use mrfdet_core::sws::AreaThresholds;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Rectangle => "rectangle",
            Shape::Ellipse => "ellipse",
            Shape::Triangle => "triangle",
        }
    }
}

impl FromStr for Shape {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(Shape::Rectangle),
            "ellipse" => Ok(Shape::Ellipse),
            "triangle" => Ok(Shape::Triangle),
            other => bail!("unknown shape {other:?} (expected rectangle, ellipse or triangle)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub train_images: usize,
    pub test_images: usize,
    /// One shape per class, in class-id order.
    pub classes: Vec<Shape>,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Probability that an object is drawn from the small size range.
    pub small_fraction: f64,
    /// Inclusive side-length range of small objects (area at most 32²).
    pub small_side: (usize, usize),
    /// Inclusive side-length range of large objects.
    pub large_side: (usize, usize),
    /// Standard deviation of background pixel noise, in 8-bit levels.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_images: 200,
            test_images: 50,
            classes: vec![Shape::Rectangle, Shape::Ellipse, Shape::Triangle],
            objects_min: 1,
            objects_max: 3,
            small_fraction: 0.5,
            small_side: (8, 28),
            large_side: (34, 48),
            noise: 16.0,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.image_size;
        if n == 0 || self.classes.is_empty() {
            bail!("dataset needs a positive image size and at least one class");
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            bail!(
                "objects per image must satisfy 1 <= min <= max, got {}..={}",
                self.objects_min,
                self.objects_max
            );
        }
        for (what, (lo, hi)) in [("small", self.small_side), ("large", self.large_side)] {
            if lo < 2 || lo > hi || hi > n {
                bail!("{what} side range {lo}..={hi} must satisfy 2 <= lo <= hi <= image size {n}");
            }
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            bail!("small_fraction must lie in [0, 1]");
        }
        if !(self.noise >= 0.0) {
            bail!("noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: f64,
    /// Epochs at which the rate is multiplied by 0.1, cumulatively.
    pub lr_drops: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the batch gradient to at most this global norm; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    /// Random horizontal flips during training.
    pub hflip: bool,
    pub mrf: bool,
    pub extra_level: bool,
    pub seg: SegMode,
    pub t1: f64,
    pub t2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub neg_pos_ratio: f64,
    /// Divisors of the centre and size offsets in the box encoding.
    pub center_variance: f64,
    pub size_variance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Full-scale thresholds rescaled from a 300-pixel input to the 64-pixel desk input.
        let t = AreaThresholds::FULL_SCALE.scaled(64.0 / 300.0);
        Self {
            epochs: 30,
            batch_size: 4,
            base_lr: 0.02,
            warmup_start_lr: 0.0002,
            warmup_epochs: 2.0,
            lr_drops: vec![20.0, 26.0],
            momentum: 0.9,
            weight_decay: 0.0005,
            clip_norm: 5.0,
            seed: 1,
            hflip: true,
            mrf: true,
            extra_level: true,
            seg: SegMode::Sws,
            t1: (t.t1 * 10.0).round() / 10.0,
            t2: (t.t2 * 10.0).round() / 10.0,
            alpha: 1.0,
            beta: 1.0,
            neg_pos_ratio: 3.0,
            center_variance: 0.1,
            size_variance: 0.2,
        }
    }
}

impl TrainConfig {
    /// The full-scale 300-pixel VOC schedule and optimizer.
    pub fn full_scale() -> Self {
        Self {
            epochs: 300,
            base_lr: 1e-4,
            warmup_start_lr: 1e-6,
            warmup_epochs: 10.0,
            lr_drops: vec![150.0, 250.0],
            t1: AreaThresholds::FULL_SCALE.t1,
            t2: AreaThresholds::FULL_SCALE.t2,
            center_variance: 1.0,
            size_variance: 1.0,
            ..Self::default()
        }
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            mrf: self.mrf,
            extra_level: self.extra_level,
            seg: self.seg,
        }
    }

    pub fn set_toggles(&mut self, t: Toggles) {
        self.mrf = t.mrf;
        self.extra_level = t.extra_level;
        self.seg = t.seg;
    }

    /// Mask thresholds for the active seg mode; AWS paints every object.
    pub fn thresholds(&self) -> AreaThresholds {
        match self.seg {
            SegMode::Aws => AreaThresholds::all_objects(),
            _ => AreaThresholds { t1: self.t1, t2: self.t2 },
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            neg_pos_ratio: self.neg_pos_ratio,
            coder: self.coder(),
        }
    }

    pub fn coder(&self) -> BoxCoder {
        BoxCoder {
            center_variance: self.center_variance,
            size_variance: self.size_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail!("epochs and batch_size must be positive");
        }
        let rates = [
            ("base_lr", self.base_lr),
            ("warmup_start_lr", self.warmup_start_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            bail!("{name} must be positive, got {v}");
        }
        if !(self.momentum < 1.0) {
            bail!("momentum must be below 1");
        }
        if !(self.warmup_epochs >= 0.0) || self.warmup_epochs >= self.epochs as f64 {
            bail!("warmup epochs {} must lie in [0, epochs)", self.warmup_epochs);
        }
        let mut prev = self.warmup_epochs;
        for &d in &self.lr_drops {
            if !(d > prev) || d >= self.epochs as f64 {
                bail!(
                    "lr drops {:?} must increase strictly after the warmup ({}) and stay below {} epochs",
                    self.lr_drops,
                    self.warmup_epochs,
                    self.epochs
                );
            }
            prev = d;
        }
        if !(self.center_variance > 0.0 && self.size_variance > 0.0) {
            bail!("box variances must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            bail!("clip_norm must be non-negative");
        }
        AreaThresholds::new(self.t1, self.t2).map_err(|e| anyhow!("{e}"))?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.neg_pos_ratio >= 0.0) {
            bail!("alpha, beta and neg_pos_ratio must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn net(&self) -> NetConfig {
        let mut cfg = NetConfig::desk(self.data.classes.len(), self.train.toggles());
        if self.data.image_size != cfg.image_size() {
            cfg.backbone.image_size = self.data.image_size;
            cfg.anchor_sizes =
                mrfdet_core::net::default_anchor_sizes(&cfg.backbone.feature_strides(), self.data.image_size);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().context("data")?;
        self.train.validate().context("train")?;
        self.net().validate().map_err(|e| anyhow!("network: {e}"))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.data.classes.iter().map(|s| s.name().to_string()).collect()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        text.parse().with_context(|| format!("in {}", path.display()))
    }
}

/// Non-blank, non-comment lines as `(line number, key, value)`.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {line:?}", i + 1))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        if !seen.insert(k.clone()) {
            bail!("line {}: key {k:?} repeated", i + 1);
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

fn num<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{v:?}: {e}"))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(num).collect()
}

fn pair(v: &str) -> Result<(usize, usize)> {
    match list::<usize>(v)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => bail!("expected two comma-separated integers, got {v:?}"),
    }
}

fn boolean(v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => bail!("expected a boolean, got {v:?}"),
    }
}

pub fn parse_seg_mode(v: &str) -> Result<SegMode> {
    match v {
        "off" => Ok(SegMode::Off),
        "aws" => Ok(SegMode::Aws),
        "sws" => Ok(SegMode::Sws),
        _ => bail!("seg mode must be off, aws or sws, got {v:?}"),
    }
}

pub fn seg_mode_name(m: SegMode) -> &'static str {
    match m {
        SegMode::Off => "off",
        SegMode::Aws => "aws",
        SegMode::Sws => "sws",
    }
}

impl FromStr for ExperimentConfig {
    type Err = anyhow::Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (line, key, v) in parse_pairs(text)? {
            let (d, t) = (&mut c.data, &mut c.train);
            let v = v.as_str();
            let r: Result<()> = (|| {
                match key.as_str() {
                    "data.image_size" => d.image_size = num(v)?,
                    "data.train_images" => d.train_images = num(v)?,
                    "data.test_images" => d.test_images = num(v)?,
                    "data.classes" => d.classes = list(v)?,
                    "data.objects_per_image" => (d.objects_min, d.objects_max) = pair(v)?,
                    "data.small_fraction" => d.small_fraction = num(v)?,
                    "data.small_side" => d.small_side = pair(v)?,
                    "data.large_side" => d.large_side = pair(v)?,
                    "data.noise" => d.noise = num(v)?,
                    "data.seed" => d.seed = num(v)?,
                    "train.epochs" => t.epochs = num(v)?,
                    "train.batch_size" => t.batch_size = num(v)?,
                    "train.base_lr" => t.base_lr = num(v)?,
                    "train.warmup_start_lr" => t.warmup_start_lr = num(v)?,
                    "train.warmup_epochs" => t.warmup_epochs = num(v)?,
                    "train.lr_drops" => t.lr_drops = list(v)?,
                    "train.momentum" => t.momentum = num(v)?,
                    "train.weight_decay" => t.weight_decay = num(v)?,
                    "train.clip_norm" => t.clip_norm = num(v)?,
                    "train.seed" => t.seed = num(v)?,
                    "train.hflip" => t.hflip = boolean(v)?,
                    "train.mrf" => t.mrf = boolean(v)?,
                    "train.extra_level" => t.extra_level = boolean(v)?,
                    "train.seg" => t.seg = parse_seg_mode(v)?,
                    "train.t1" => t.t1 = num(v)?,
                    "train.t2" => t.t2 = num(v)?,
                    "train.alpha" => t.alpha = num(v)?,
                    "train.beta" => t.beta = num(v)?,
                    "train.neg_pos_ratio" => t.neg_pos_ratio = num(v)?,
                    "train.center_variance" => t.center_variance = num(v)?,
                    "train.size_variance" => t.size_variance = num(v)?,
                    _ => bail!("unknown key"),
                }
                Ok(())
            })();
            r.with_context(|| format!("line {line}: {key}"))?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// An MRF block description: `mrf.in_channels`, `mrf.out_channels`,
/// `mrf.branches` as `kernel:dilation` items, and optional
/// `mrf.bottleneck_channels` and `mrf.shortcut`.
pub fn parse_mrf_spec(text: &str) -> Result<MrfBlockSpec> {
    let mut in_ch = None;
    let mut out_ch = None;
    let mut branches = None;
    let mut bottleneck = None;
    let mut shortcut = true;
    for (line, key, v) in parse_pairs(text)? {
        let v = v.as_str();
        let r: Result<()> = (|| {
            match key.as_str() {
                "mrf.in_channels" => in_ch = Some(num::<usize>(v)?),
                "mrf.out_channels" => out_ch = Some(num::<usize>(v)?),
                "mrf.bottleneck_channels" => bottleneck = Some(num::<usize>(v)?),
                "mrf.shortcut" => shortcut = boolean(v)?,
                "mrf.branches" => {
                    let items = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|item| {
                            let (k, d) = item
                                .split_once(':')
                                .ok_or_else(|| anyhow!("branch {item:?} is not kernel:dilation"))?;
                            Ok((num(k.trim())?, num(d.trim())?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    branches = Some(items);
                }
                _ => bail!("unknown key"),
            }
            Ok(())
        })();
        r.with_context(|| format!("line {line}: {key}"))?;
    }
    let in_ch = in_ch.ok_or_else(|| anyhow!("missing mrf.in_channels"))?;
    let out_ch = out_ch.unwrap_or(in_ch);
    let branches = branches.ok_or_else(|| anyhow!("missing mrf.branches"))?;
    let mut spec = mrf_spec_with_branches(in_ch, out_ch, &branches);
    if let Some(b) = bottleneck {
        spec.bottleneck_channels = b;
    }
    spec.shortcut = shortcut;
    spec.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(spec)
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl fmt::Display for ExperimentConfig {
    /// Writes every key; parsing the output reproduces the config exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (d, t) = (&self.data, &self.train);
        let mut s = String::new();
        let names: Vec<&str> = d.classes.iter().map(|c| c.name()).collect();
        let _ = writeln!(s, "data.image_size = {}", d.image_size);
        let _ = writeln!(s, "data.train_images = {}", d.train_images);
        let _ = writeln!(s, "data.test_images = {}", d.test_images);
        let _ = writeln!(s, "data.classes = {}", names.join(", "));
        let _ = writeln!(s, "data.objects_per_image = {}, {}", d.objects_min, d.objects_max);
        let _ = writeln!(s, "data.small_fraction = {}", d.small_fraction);
        let _ = writeln!(s, "data.small_side = {}, {}", d.small_side.0, d.small_side.1);
        let _ = writeln!(s, "data.large_side = {}, {}", d.large_side.0, d.large_side.1);
        let _ = writeln!(s, "data.noise = {}", d.noise);
        let _ = writeln!(s, "data.seed = {}", d.seed);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.base_lr = {}", t.base_lr);
        let _ = writeln!(s, "train.warmup_start_lr = {}", t.warmup_start_lr);
        let _ = writeln!(s, "train.warmup_epochs = {}", t.warmup_epochs);
        let _ = writeln!(s, "train.lr_drops = {}", join(&t.lr_drops));
        let _ = writeln!(s, "train.momentum = {}", t.momentum);
        let _ = writeln!(s, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "train.clip_norm = {}", t.clip_norm);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.hflip = {}", t.hflip);
        let _ = writeln!(s, "train.mrf = {}", t.mrf);
        let _ = writeln!(s, "train.extra_level = {}", t.extra_level);
        let _ = writeln!(s, "train.seg = {}", seg_mode_name(t.seg));
        let _ = writeln!(s, "train.t1 = {}", t.t1);
        let _ = writeln!(s, "train.t2 = {}", t.t2);
        let _ = writeln!(s, "train.alpha = {}", t.alpha);
        let _ = writeln!(s, "train.beta = {}", t.beta);
        let _ = writeln!(s, "train.neg_pos_ratio = {}", t.neg_pos_ratio);
        let _ = writeln!(s, "train.center_variance = {}", t.center_variance);
        let _ = writeln!(s, "train.size_variance = {}", t.size_variance);
        f.write_str(&s)
    }
}
