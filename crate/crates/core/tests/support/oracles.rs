//! Slow, independently written reference versions of the geometric and
//! ranking routines, and the randomized comparisons against them.
//!
//! Shared by the core oracle tests and the acceptance run. Every check
//! returns a one-line summary on success and the first mismatch on failure.

#![allow(dead_code)]

use mrfdet_core::anchors::{iou, match_anchors, nms, BBox, Detection, GroundTruth, Match, MatchAssignment};
use mrfdet_core::eval::{average_precision, greedy_match, Interpolation, Outcome};
use mrfdet_core::losses::hard_negative_mine;
use mrfdet_core::sws::{rasterize_sws_mask, AreaThresholds, SegLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box with corners on a `1/q` grid inside `[0, extent]`.
fn grid_box(r: &mut ChaCha8Rng, extent: u32, q: u32) -> BBox {
    let span = extent * q;
    let mut axis = || loop {
        let (a, b) = (r.random_range(0..=span), r.random_range(0..=span));
        if a != b {
            break (a.min(b) as f64 / q as f64, a.max(b) as f64 / q as f64);
        }
    };
    let (x0, x1) = axis();
    let (y0, y1) = axis();
    BBox::new(x0, y0, x1, y1)
}

fn random_detections(r: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: grid_box(r, 16, 2),
            class_id: r.random_range(0..classes),
            // Two-decimal scores so equal scores occur.
            score: r.random_range(1..=100) as f64 / 100.0,
        })
        .collect()
}

/// IoU against counting `1/4`-pixel cells by their centres.
pub fn iou_vs_cell_enumeration(cases: usize) -> Check {
    let mut r = rng(1);
    let (extent, q) = (12u32, 4u32);
    let n = (extent * q) as usize;
    let mut worst = 0.0f64;
    for case in 0..cases {
        let a = grid_box(&mut r, extent, q);
        let b = grid_box(&mut r, extent, q);
        let inside = |bx: &BBox, i: usize, j: usize| {
            let (cx, cy) = ((i as f64 + 0.5) / q as f64, (j as f64 + 0.5) / q as f64);
            bx.xmin < cx && cx < bx.xmax && bx.ymin < cy && cy < bx.ymax
        };
        let (mut inter, mut uni) = (0usize, 0usize);
        for j in 0..n {
            for i in 0..n {
                let (ia, ib) = (inside(&a, i, j), inside(&b, i, j));
                inter += usize::from(ia && ib);
                uni += usize::from(ia || ib);
            }
        }
        let d = (iou(&a, &b) - inter as f64 / uni as f64).abs();
        worst = worst.max(d);
        ensure!(d < 1e-6, "case {case}: {a:?} vs {b:?} off by {d}");
    }
    Ok(format!("{cases} cases, max |Δ| {worst:.1e}"))
}

/// Sort every (anchor, gt) pair once by (IoU desc, anchor, gt) and take pairs
/// whose anchor and gt are both still free; then threshold the rest.
pub fn matching_oracle(anchors: &[BBox], gts: &[BBox], thr: f64) -> Vec<Match> {
    let mut pairs = Vec::new();
    for (a, ab) in anchors.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            pairs.push((iou(ab, gb), a, g));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out = vec![Match::Negative; anchors.len()];
    let mut anchor_used = vec![false; anchors.len()];
    let mut gt_used = vec![false; gts.len()];
    for (_, a, g) in pairs {
        if !anchor_used[a] && !gt_used[g] {
            anchor_used[a] = true;
            gt_used[g] = true;
            out[a] = Match::Positive(g);
        }
    }
    for (a, ab) in anchors.iter().enumerate() {
        if anchor_used[a] || gts.is_empty() {
            continue;
        }
        let overlaps: Vec<f64> = gts.iter().map(|g| iou(ab, g)).collect();
        let best = overlaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = overlaps.iter().position(|&v| v == best).unwrap();
        if best >= thr {
            out[a] = Match::Positive(first);
        }
    }
    out
}

pub fn matching_vs_sorted_pairs(cases: usize) -> Check {
    let mut r = rng(2);
    for case in 0..cases {
        let n_anchor = r.random_range(1..=10);
        let n_gt = r.random_range(0..=4);
        // Coarse grid so equal IoUs (and hence tie rules) actually occur.
        let anchors: Vec<BBox> = (0..n_anchor).map(|_| grid_box(&mut r, 8, 1)).collect();
        let gts: Vec<BBox> = (0..n_gt).map(|_| grid_box(&mut r, 8, 1)).collect();
        let thr = [0.3, 0.5, 0.7][case % 3];
        let got = match_anchors(&anchors, &gts, thr).map_err(|e| e.to_string())?;
        ensure!(got.matches == matching_oracle(&anchors, &gts, thr), "case {case}: assignments differ");
    }
    Ok(format!("{cases} cases, exact"))
}

/// Pairwise suppression table computed up front, then one pass in rank order.
pub fn nms_oracle(dets: &[Detection], thr: f64, max_keep: usize) -> Vec<Detection> {
    let n = dets.len();
    let suppresses: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| dets[i].class_id == dets[j].class_id && iou(&dets[i].bbox, &dets[j].bbox) >= thr)
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if !kept.iter().any(|&k| suppresses[k][i]) {
            kept.push(i);
        }
    }
    kept.truncate(max_keep);
    kept.into_iter().map(|i| dets[i]).collect()
}

pub fn nms_vs_quadratic(cases: usize) -> Check {
    let mut r = rng(3);
    for case in 0..cases {
        let n = r.random_range(0..30);
        let dets = random_detections(&mut r, n, 3);
        let thr = r.random_range(0.2..0.8);
        let max_keep = r.random_range(1..40);
        ensure!(nms(&dets, thr, max_keep) == nms_oracle(&dets, thr, max_keep), "case {case}: kept lists differ");
    }
    Ok(format!("{cases} cases, exact"))
}

/// Per pixel, the highest-priority label over every box whose half-open
/// extent contains the pixel's top-left corner.
pub fn mask_oracle(boxes: &[BBox], size: usize, t: &AreaThresholds) -> Vec<SegLabel> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64, y as f64);
            let mut label = SegLabel::Background;
            for b in boxes {
                if !(b.xmin <= px && px < b.xmax && b.ymin <= py && py < b.ymax) {
                    continue;
                }
                let area = (b.xmax - b.xmin) * (b.ymax - b.ymin);
                let l = if area < t.t1 {
                    SegLabel::Ignore
                } else if area <= t.t2 {
                    SegLabel::Foreground
                } else {
                    SegLabel::Background
                };
                label = match (label, l) {
                    (SegLabel::Foreground, _) | (_, SegLabel::Foreground) => SegLabel::Foreground,
                    (SegLabel::Ignore, _) | (_, SegLabel::Ignore) => SegLabel::Ignore,
                    _ => SegLabel::Background,
                };
            }
            out.push(label);
        }
    }
    out
}

pub fn sws_vs_per_pixel(cases: usize) -> Check {
    let mut r = rng(4);
    let size = 128;
    let t = AreaThresholds::FULL_SCALE;
    // Sides straddling both thresholds: 31/32/33 around 32², 95/96/97 around 96².
    let sides = [31.0, 32.0, 33.0, 95.0, 96.0, 97.0];
    let (mut fg, mut ign, mut boundary) = (0, 0, 0);
    for case in 0..cases {
        let boxes: Vec<BBox> = (0..r.random_range(0..=4))
            .map(|_| {
                if r.random_bool(0.5) {
                    let s = sides[r.random_range(0..sides.len())];
                    let x = r.random_range(0..=(size - 97)) as f64 + [0.0, 0.5, 0.25][r.random_range(0..3)];
                    let y = r.random_range(0..=(size - 97)) as f64;
                    boundary += 1;
                    BBox::new(x, y, x + s, y + s)
                } else {
                    grid_box(&mut r, size as u32, 2)
                }
            })
            .collect();
        let mask = rasterize_sws_mask(&boxes, size, size, &t);
        ensure!(mask.labels() == &mask_oracle(&boxes, size, &t)[..], "case {case}: masks differ for {boxes:?}");
        fg += mask.count(SegLabel::Foreground);
        ign += mask.count(SegLabel::Ignore);
    }
    ensure!(fg > 0 && ign > 0 && boundary > cases / 2, "scenes did not exercise every label");

    // The exact threshold areas land on the foreground side.
    for s in [32.0, 96.0] {
        let m = rasterize_sws_mask(&[BBox::new(0.0, 0.0, s, s)], size, size, &t);
        ensure!(m.count(SegLabel::Foreground) == (s * s) as usize, "side {s} is not fully foreground");
    }
    let m = rasterize_sws_mask(&[BBox::new(0.0, 0.0, 31.0, 31.0)], size, size, &t);
    ensure!(m.count(SegLabel::Ignore) == 31 * 31, "side 31 is not ignored");
    let m = rasterize_sws_mask(&[BBox::new(0.0, 0.0, 97.0, 97.0)], size, size, &t);
    ensure!(m.count(SegLabel::Background) == size * size, "side 97 is not background");
    // Foreground wins over an overlapping ignored box.
    let m = rasterize_sws_mask(&[BBox::new(0.0, 0.0, 40.0, 40.0), BBox::new(30.0, 30.0, 50.0, 50.0)], size, size, &t);
    ensure!(m.get(35, 35) == SegLabel::Foreground && m.get(45, 45) == SegLabel::Ignore, "overlap priority");
    Ok(format!("{cases} scenes plus boundary fixtures, exact"))
}

/// All-point AP as a sum over true positives of the best precision at or after each.
pub fn all_point_oracle(seq: &[bool], n_gt: usize) -> f64 {
    let mut prec = Vec::new();
    let mut tp = 0;
    for (i, &t) in seq.iter().enumerate() {
        tp += usize::from(t);
        prec.push(tp as f64 / (i + 1) as f64);
    }
    let mut total = 0.0;
    for (i, &t) in seq.iter().enumerate() {
        if t {
            total += prec[i..].iter().copied().fold(0.0, f64::max);
        }
    }
    total / n_gt as f64
}

/// Eleven-point AP with recall thresholds compared in exact integer arithmetic.
pub fn eleven_point_oracle(seq: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &t) in seq.iter().enumerate() {
        tp += usize::from(t);
        points.push((tp, tp as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|k| {
            points
                .iter()
                .filter(|(tp, _)| tp * 10 >= k * n_gt)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

pub fn ap_vs_hand_curves(cases: usize) -> Check {
    let ap = |seq: &[bool], n, i| average_precision(seq, n, i).ok_or_else(|| "no AP".to_string());
    let seq = [true, false, true];
    let all = ap(&seq, 2, Interpolation::AllPoint)?;
    ensure!((all - 0.833_333_333_333_333_3).abs() < 1e-9, "[TP, FP, TP] all-point {all}");
    let eleven = ap(&seq, 2, Interpolation::ElevenPoint)?;
    ensure!((eleven - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-9, "[TP, FP, TP] 11-point {eleven}");
    ensure!(ap(&[true], 1, Interpolation::AllPoint)? == 1.0, "single TP");
    ensure!(ap(&[true], 1, Interpolation::ElevenPoint)? == 1.0, "single TP");
    ensure!(ap(&[false], 1, Interpolation::AllPoint)? == 0.0, "single FP");
    ensure!(average_precision(&[], 0, Interpolation::AllPoint).is_none(), "no ground truth");

    let mut r = rng(5);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let seq: Vec<bool> = (0..r.random_range(0..25)).map(|_| r.random_bool(0.5)).collect();
        let n_gt = seq.iter().filter(|&&t| t).count() + r.random_range(1..4);
        let da = (ap(&seq, n_gt, Interpolation::AllPoint)? - all_point_oracle(&seq, n_gt)).abs();
        let de = (ap(&seq, n_gt, Interpolation::ElevenPoint)? - eleven_point_oracle(&seq, n_gt)).abs();
        worst = worst.max(da).max(de);
        ensure!(da < 1e-9 && de < 1e-9, "case {case}: {seq:?} with {n_gt} gts");
    }
    Ok(format!("0.8333 fixture plus {cases} curves, max |Δ| {worst:.1e}"))
}

/// For each detection in rank order, the candidates are every unclaimed gt of
/// its class above the threshold, best IoU first, lowest index on ties.
pub fn greedy_oracle(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> (Vec<bool>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut claimed = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for di in order {
        let mut cands: Vec<(f64, usize)> = gts
            .iter()
            .enumerate()
            .filter(|(gi, g)| !claimed[*gi] && g.class_id == dets[di].class_id)
            .map(|(gi, g)| (iou(&dets[di].bbox, &g.bbox), gi))
            .filter(|(v, _)| *v > thr)
            .collect();
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if let Some(&(_, gi)) = cands.first() {
            claimed[gi] = true;
            tp[di] = true;
        }
    }
    (tp, claimed)
}

pub fn greedy_match_vs_oracle(cases: usize) -> Check {
    let mut r = rng(6);
    for case in 0..cases {
        let n = r.random_range(0..12);
        let dets = random_detections(&mut r, n, 2);
        let gts: Vec<GroundTruth> = (0..r.random_range(0..6))
            .map(|_| GroundTruth { bbox: grid_box(&mut r, 16, 2), class_id: r.random_range(0..2) })
            .collect();
        let m = greedy_match(&dets, &gts, 0.5);
        let (tp, claimed) = greedy_oracle(&dets, &gts, 0.5);
        let got: Vec<bool> = m.outcomes.iter().map(|o| *o == Outcome::TruePositive).collect();
        ensure!(got == tp && m.gt_matched == claimed, "case {case}: matchings differ");
    }
    Ok(format!("{cases} cases, exact"))
}

pub fn mining_vs_full_sort(cases: usize) -> Check {
    let mut r = rng(7);
    for case in 0..cases {
        let n = r.random_range(1..40);
        let matches: Vec<Match> = (0..n)
            .map(|_| if r.random_bool(0.15) { Match::Positive(0) } else { Match::Negative })
            .collect();
        let assignment = MatchAssignment { matches };
        let losses: Vec<f64> = (0..n).map(|_| r.random_range(0..20) as f64 / 4.0).collect();
        let ratio = [1.0, 2.5, 3.0][case % 3];
        // Sorting (-loss, index) ascending is descending loss, lowest index first.
        let mut negs: Vec<(f64, usize)> = assignment
            .matches
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == Match::Negative)
            .map(|(i, _)| (-losses[i], i))
            .collect();
        negs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = ((ratio * assignment.num_positive() as f64).floor() as usize).min(negs.len());
        let mut expected: Vec<usize> = negs[..want].iter().map(|p| p.1).collect();
        expected.sort_unstable();
        ensure!(hard_negative_mine(&losses, &assignment, ratio) == expected, "case {case}: mined sets differ");
    }
    Ok(format!("{cases} cases, exact"))
}
