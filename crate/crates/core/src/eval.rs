//! VOC-style mean average precision and COCO-style AP by object area.

use std::fmt::Write as _;

use crate::anchors::{iou, Detection, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    ElevenPoint,
    AllPoint,
}

/// Half-open area band `(min, max]` in squared pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub fn contains(&self, area: f64) -> bool {
        area > self.min && area <= self.max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub area_ranges: Vec<AreaRange>,
}

pub fn default_area_ranges() -> Vec<AreaRange> {
    vec![
        AreaRange { name: "S".into(), min: 0.0, max: 32.0 * 32.0 },
        AreaRange { name: "M".into(), min: 32.0 * 32.0, max: 96.0 * 96.0 },
        AreaRange { name: "L".into(), min: 96.0 * 96.0, max: f64::INFINITY },
    ]
}

impl EvalConfig {
    pub fn voc() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interpolation::ElevenPoint,
            area_ranges: default_area_ranges(),
        }
    }

    pub fn coco() -> Self {
        Self {
            interpolation: Interpolation::AllPoint,
            ..Self::voc()
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::voc()
    }
}

/// Detections and ground truths of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageRecord {
    pub detections: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched an ignored ground truth; neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub outcomes: Vec<Outcome>,
    pub gt_matched: Vec<bool>,
}

/// Descending score, ties by input index.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Single-image greedy matching: in score order each detection claims the
/// highest-IoU unmatched ground truth of its class with IoU strictly above the
/// threshold (ties by lowest gt index). Non-ignored gts are preferred; a
/// detection that can only claim an ignored gt is [`Outcome::Ignored`].
pub fn greedy_match_with_ignore(
    dets: &[Detection],
    gts: &[GroundTruth],
    ignore: &[bool],
    iou_threshold: f64,
) -> MatchResult {
    let mut outcomes = vec![Outcome::FalsePositive; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for di in rank(dets) {
        let d = &dets[di];
        let pick = |want_ignored: bool| -> Option<usize> {
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if g.class_id != d.class_id || gt_matched[gi] || ignore[gi] != want_ignored {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v > iou_threshold && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
            best.map(|(_, gi)| gi)
        };
        if let Some(gi) = pick(false) {
            gt_matched[gi] = true;
            outcomes[di] = Outcome::TruePositive;
        } else if let Some(gi) = pick(true) {
            gt_matched[gi] = true;
            outcomes[di] = Outcome::Ignored;
        }
    }
    MatchResult { outcomes, gt_matched }
}

pub fn greedy_match(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    greedy_match_with_ignore(dets, gts, &vec![false; gts.len()], iou_threshold)
}

/// AP of a ranked TP/FP sequence. `None` when there are no ground truths.
pub fn average_precision(tp_sequence: &[bool], n_gt: usize, interpolation: Interpolation) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(tp_sequence.len());
    let mut precision = Vec::with_capacity(tp_sequence.len());
    for (i, &is_tp) in tp_sequence.iter().enumerate() {
        tp += usize::from(is_tp);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let ap = match interpolation {
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(&rc, _)| rc >= r - 1e-12)
                        .map(|(_, &p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        Interpolation::AllPoint => {
            // Precision envelope, integrated over recall steps.
            let mut env = precision.clone();
            for i in (0..env.len().saturating_sub(1)).rev() {
                env[i] = env[i].max(env[i + 1]);
            }
            let mut area = 0.0;
            let mut prev_r = 0.0;
            for (r, p) in recall.iter().zip(&env) {
                if *r > prev_r {
                    area += (r - prev_r) * p;
                    prev_r = *r;
                }
            }
            area
        }
    };
    Some(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassStats {
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub n_gt: usize,
}

/// AP for one class across images; gts failing `in_band` are ignored.
fn class_stats(
    images: &[ImageRecord],
    class_id: usize,
    iou_threshold: f64,
    interpolation: Interpolation,
    in_band: &dyn Fn(&GroundTruth) -> bool,
) -> ClassStats {
    let mut ranked: Vec<(f64, usize, usize, Outcome)> = Vec::new();
    let mut n_gt = 0;
    for (ii, img) in images.iter().enumerate() {
        let dets: Vec<Detection> = img.detections.iter().filter(|d| d.class_id == class_id).copied().collect();
        let gts: Vec<GroundTruth> = img.gts.iter().filter(|g| g.class_id == class_id).copied().collect();
        let ignore: Vec<bool> = gts.iter().map(|g| !in_band(g)).collect();
        n_gt += ignore.iter().filter(|&&i| !i).count();
        let m = greedy_match_with_ignore(&dets, &gts, &ignore, iou_threshold);
        for (di, (d, o)) in dets.iter().zip(m.outcomes).enumerate() {
            ranked.push((d.score, ii, di, o));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let seq: Vec<bool> = ranked
        .iter()
        .filter(|r| r.3 != Outcome::Ignored)
        .map(|r| r.3 == Outcome::TruePositive)
        .collect();
    let tp = seq.iter().filter(|&&t| t).count();
    ClassStats {
        ap: average_precision(&seq, n_gt, interpolation),
        tp,
        fp: seq.len() - tp,
        n_gt,
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassStats>,
    /// Unweighted mean over classes with ground truth; 0 when none has any.
    pub map: f64,
    pub per_area: Vec<(String, Option<f64>)>,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

/// Per-band AP: out-of-band gts are ignored, AP is averaged over classes
/// with in-band gts.
pub fn ap_by_area(images: &[ImageRecord], num_classes: usize, config: &EvalConfig) -> Vec<(String, Option<f64>)> {
    config
        .area_ranges
        .iter()
        .map(|band| {
            let in_band = |g: &GroundTruth| band.contains(g.bbox.area());
            let ap = mean_defined((0..num_classes).map(|c| {
                class_stats(images, c, config.iou_threshold, config.interpolation, &in_band).ap
            }));
            (band.name.clone(), ap)
        })
        .collect()
}

pub fn evaluate(images: &[ImageRecord], num_classes: usize, config: &EvalConfig) -> EvalReport {
    let all = |_: &GroundTruth| true;
    let per_class: Vec<ClassStats> = (0..num_classes)
        .map(|c| class_stats(images, c, config.iou_threshold, config.interpolation, &all))
        .collect();
    let map = mean_defined(per_class.iter().map(|s| s.ap)).unwrap_or(0.0);
    let tp = per_class.iter().map(|s| s.tp).sum();
    let fp = per_class.iter().map(|s| s.fp).sum();
    let n_gt: usize = per_class.iter().map(|s| s.n_gt).sum();
    EvalReport {
        iou_threshold: config.iou_threshold,
        per_class,
        map,
        per_area: ap_by_area(images, num_classes, config),
        tp,
        fp,
        missed: n_gt - tp,
    }
}

/// Summary columns of the COCO-style table, all-point interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoSummary {
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
    pub per_area: Vec<(String, Option<f64>)>,
}

pub fn coco_summary(images: &[ImageRecord], num_classes: usize) -> CocoSummary {
    let at = |thr: f64| {
        let cfg = EvalConfig { iou_threshold: thr, ..EvalConfig::coco() };
        evaluate(images, num_classes, &cfg)
    };
    let base = at(0.5);
    let sweep: Vec<f64> = (0..10).map(|i| at(0.5 + 0.05 * i as f64).map).collect();
    CocoSummary {
        ap50: base.map,
        ap75: at(0.75).map,
        ap50_95: sweep.iter().sum::<f64>() / sweep.len() as f64,
        per_area: base.per_area,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "   -  ".to_string(), |v| format!("{:6.4}", v))
}

pub fn format_report(report: &EvalReport, class_names: &[String], coco: Option<&CocoSummary>) -> String {
    let mut s = String::new();
    if let Some(c) = coco {
        let _ = writeln!(s, "AP@0.5  AP@0.75 AP@[0.5:0.95] {}", c.per_area.iter().map(|(n, _)| format!("AP_{n:<5}")).collect::<Vec<_>>().join(" "));
        let _ = writeln!(
            s,
            "{:6.4}  {:6.4}  {:6.4}       {}",
            c.ap50,
            c.ap75,
            c.ap50_95,
            c.per_area.iter().map(|(_, v)| format!("{:<8}", fmt_opt(*v))).collect::<Vec<_>>().join(" ")
        );
    }
    let _ = writeln!(s, "class            AP      TP    FP   n_gt");
    for (i, st) in report.per_class.iter().enumerate() {
        let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
        let _ = writeln!(s, "{:<12} {}  {:>5} {:>5} {:>6}", name, fmt_opt(st.ap), st.tp, st.fp, st.n_gt);
    }
    let _ = writeln!(s, "mAP@{:.2}     {:6.4}", report.iou_threshold, report.map);
    for (name, ap) in &report.per_area {
        let _ = writeln!(s, "AP_{name:<9} {}", fmt_opt(*ap));
    }
    let _ = writeln!(s, "TP {}  FP {}  missed {}", report.tp, report.fp, report.missed);
    s
}
