//! Multi-task objective: `L = L_det + α·L_seg` with
//! `L_det = (L_conf + β·L_loc) / N` over `N` positive anchors.

use crate::anchors::{BBox, BoxCoder, GroundTruth, Match, MatchAssignment};
use crate::error::{shape_err, Error, Result};
use crate::sws::{seg_loss, SegMask};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub neg_pos_ratio: f64,
    /// Offset encoding of the regression targets.
    pub coder: BoxCoder,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            neg_pos_ratio: 3.0,
            coder: BoxCoder::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_conf: f64,
    pub l_loc: f64,
    pub l_det: f64,
    pub l_seg: f64,
    pub total: f64,
    pub n_pos: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_conf, self.l_loc, self.l_det, self.l_seg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Per-anchor predictions flattened in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Number of object classes; logits carry one extra background slot at index 0.
    pub num_classes: usize,
    /// `n_anchors × (num_classes + 1)` logits.
    pub conf: Vec<f64>,
    /// `n_anchors × 4` offsets.
    pub loc: Vec<f64>,
}

impl Predictions {
    pub fn zeros(n_anchors: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            conf: vec![0.0; n_anchors * (num_classes + 1)],
            loc: vec![0.0; n_anchors * 4],
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.loc.len() / 4
    }

    pub fn logits(&self, anchor: usize) -> &[f64] {
        let k = self.num_classes + 1;
        &self.conf[anchor * k..(anchor + 1) * k]
    }
}

/// Gradients of the total loss w.r.t. the flattened predictions and seg logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub conf: Vec<f64>,
    pub loc: Vec<f64>,
    pub seg: Option<Tensor>,
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// `-log softmax(logits)[0]` for every anchor.
pub fn background_losses(preds: &Predictions) -> Vec<f64> {
    (0..preds.num_anchors()).map(|i| -log_softmax(preds.logits(i))[0]).collect()
}

/// Top `floor(ratio · N)` negatives by descending background loss, ties by
/// lowest index. Returned indices are ascending.
pub fn hard_negative_mine(per_anchor_conf_loss: &[f64], assignment: &MatchAssignment, ratio: f64) -> Vec<usize> {
    let n_pos = assignment.num_positive();
    let mut negatives: Vec<usize> = assignment
        .matches
        .iter()
        .enumerate()
        .filter(|(_, m)| **m == Match::Negative)
        .map(|(i, _)| i)
        .collect();
    let want = ((ratio * n_pos as f64).floor() as usize).min(negatives.len());
    negatives.sort_by(|&a, &b| {
        per_anchor_conf_loss[b]
            .total_cmp(&per_anchor_conf_loss[a])
            .then(a.cmp(&b))
    });
    let mut picked = negatives[..want].to_vec();
    picked.sort_unstable();
    picked
}

/// Summed softmax cross-entropy over positives (against `labels[gt]`) and
/// mined negatives (against background). `labels` use 0 for background.
/// Adds the gradient into `grad`.
pub fn conf_loss(
    preds: &Predictions,
    assignment: &MatchAssignment,
    labels: &[usize],
    mined_negatives: &[usize],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let k = preds.num_classes + 1;
    let mut total = 0.0;
    let mut grad = grad;
    let mut term = |anchor: usize, target: usize, total: &mut f64| {
        let lp = log_softmax(preds.logits(anchor));
        *total -= lp[target];
        if let Some(g) = grad.as_deref_mut() {
            for (c, l) in lp.iter().enumerate() {
                g[anchor * k + c] += l.exp() - if c == target { 1.0 } else { 0.0 };
            }
        }
    };
    for (anchor, gt) in assignment.positives() {
        let label = *labels
            .get(gt)
            .ok_or_else(|| Error::InvalidInput(format!("anchor {anchor} matched to missing gt {gt}")))?;
        if label == 0 || label >= k {
            return Err(Error::InvalidInput(format!(
                "positive anchor {anchor} carries label {label}; expected 1..={}",
                k - 1
            )));
        }
        term(anchor, label, &mut total);
    }
    for &anchor in mined_negatives {
        if assignment.matches[anchor] != Match::Negative {
            return Err(Error::InvalidInput(format!("mined anchor {anchor} is not negative")));
        }
        term(anchor, 0, &mut total);
    }
    Ok(total)
}

/// Sum of smooth-L1 over the four offsets of every positive anchor.
pub fn loc_loss(
    preds: &Predictions,
    assignment: &MatchAssignment,
    gt_boxes: &[BBox],
    anchors: &[BBox],
    coder: &BoxCoder,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut grad = grad;
    for (anchor, gt) in assignment.positives() {
        let target = coder.encode(&gt_boxes[gt], &anchors[anchor])?;
        for m in 0..4 {
            let diff = preds.loc[anchor * 4 + m] - target.0[m];
            total += smooth_l1(diff);
            if let Some(g) = grad.as_deref_mut() {
                g[anchor * 4 + m] += smooth_l1_grad(diff);
            }
        }
    }
    Ok(total)
}

/// Combines the detection and segmentation terms for one image.
///
/// With no positives the detection term is zero and only the seg term remains.
/// `seg` pairs the predicted logits with their target mask; `None` drops the
/// seg term entirely.
pub fn total_loss(
    preds: &Predictions,
    seg: Option<(&Tensor, &SegMask)>,
    assignment: &MatchAssignment,
    gts: &[GroundTruth],
    anchors: &[BBox],
    config: &LossConfig,
) -> Result<(LossBreakdown, LossGradients)> {
    let n = anchors.len();
    if preds.num_anchors() != n || assignment.matches.len() != n || preds.conf.len() != n * (preds.num_classes + 1) {
        return Err(shape_err(
            "total_loss",
            format!(
                "{} anchors, {} loc predictions, {} assignments",
                n,
                preds.num_anchors(),
                assignment.matches.len()
            ),
        ));
    }
    let mut grads = LossGradients {
        conf: vec![0.0; preds.conf.len()],
        loc: vec![0.0; preds.loc.len()],
        seg: None,
    };
    let n_pos = assignment.num_positive();
    let mut out = LossBreakdown {
        n_pos,
        ..Default::default()
    };
    if n_pos > 0 {
        let labels: Vec<usize> = gts.iter().map(|g| g.class_id + 1).collect();
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let mined = hard_negative_mine(&background_losses(preds), assignment, config.neg_pos_ratio);
        out.l_conf = conf_loss(preds, assignment, &labels, &mined, Some(&mut grads.conf))?;
        out.l_loc = loc_loss(preds, assignment, &boxes, anchors, &config.coder, Some(&mut grads.loc))?;
        let inv = 1.0 / n_pos as f64;
        out.l_det = (out.l_conf + config.beta * out.l_loc) * inv;
        grads.conf.iter_mut().for_each(|g| *g *= inv);
        grads.loc.iter_mut().for_each(|g| *g *= config.beta * inv);
    }
    if let Some((logits, mask)) = seg {
        let (l, _, g) = seg_loss(logits, mask)?;
        out.l_seg = l;
        grads.seg = Some(g.scale(config.alpha));
    }
    out.total = out.l_det + config.alpha * out.l_seg;
    Ok((out, grads))
}
