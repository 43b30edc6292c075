//! Small-object-focusing weakly-supervised segmentation targets and loss.
//!
//! Boxes with area in `[T1, T2]` paint foreground, smaller boxes paint
//! ignore (invalid) pixels and larger boxes paint background. Overlaps
//! resolve Foreground > Ignore > Background.

use crate::anchors::BBox;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegLabel {
    // Declaration order is the overlap priority.
    Background,
    Ignore,
    Foreground,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaThresholds {
    pub t1: f64,
    pub t2: f64,
}

impl AreaThresholds {
    /// Thresholds for a 300-pixel input.
    pub const FULL_SCALE: AreaThresholds = AreaThresholds { t1: 1024.0, t2: 9216.0 };

    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        if !(t1 >= 0.0 && t1 < t2) {
            return Err(Error::InvalidSpec(format!("area thresholds need 0 <= T1 < T2, got ({t1}, {t2})")));
        }
        Ok(Self { t1, t2 })
    }

    /// Every object paints foreground.
    pub fn all_objects() -> Self {
        Self { t1: 0.0, t2: f64::INFINITY }
    }

    /// Thresholds for an image uniformly rescaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            t1: self.t1 * factor * factor,
            t2: self.t2 * factor * factor,
        }
    }
}

impl Default for AreaThresholds {
    fn default() -> Self {
        Self::FULL_SCALE
    }
}

/// Foreground on the closed interval `[T1, T2]`; strictly below T1 is
/// ignored, strictly above T2 paints background.
pub fn classify_box(area: f64, thresholds: &AreaThresholds) -> SegLabel {
    if area < thresholds.t1 {
        SegLabel::Ignore
    } else if area > thresholds.t2 {
        SegLabel::Background
    } else {
        SegLabel::Foreground
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    width: usize,
    height: usize,
    labels: Vec<SegLabel>,
}

impl SegMask {
    pub fn filled(width: usize, height: usize, label: SegLabel) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> SegLabel {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: SegLabel) {
        self.labels[y * self.width + x] = label;
    }

    /// Row-major labels.
    pub fn labels(&self) -> &[SegLabel] {
        &self.labels
    }

    pub fn count(&self, label: SegLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// 8-bit gray levels: Background 0, Ignore 128, Foreground 255.
    pub fn to_gray(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| match l {
                SegLabel::Background => 0,
                SegLabel::Ignore => 128,
                SegLabel::Foreground => 255,
            })
            .collect()
    }
}

/// Integer pixel range `[lo, hi)` with `lo_edge <= p < hi_edge`.
fn pixel_span(lo_edge: f64, hi_edge: f64, extent: usize) -> (usize, usize) {
    let lo = lo_edge.ceil().max(0.0);
    let hi = hi_edge.ceil().max(0.0);
    let lo = (lo as usize).min(extent);
    let hi = (hi as usize).min(extent);
    (lo, hi.max(lo))
}

pub fn rasterize_sws_mask(gt_boxes: &[BBox], width: usize, height: usize, thresholds: &AreaThresholds) -> SegMask {
    let mut mask = SegMask::filled(width, height, SegLabel::Background);
    for b in gt_boxes {
        let label = classify_box(b.area(), thresholds);
        if label == SegLabel::Background {
            continue;
        }
        let (x0, x1) = pixel_span(b.xmin, b.xmax, width);
        let (y0, y1) = pixel_span(b.ymin, b.ymax, height);
        for y in y0..y1 {
            for x in x0..x1 {
                let cur = mask.get(x, y);
                if label > cur {
                    mask.set(x, y, label);
                }
            }
        }
    }
    mask
}

/// Mean cross-entropy over non-ignored pixels and its gradient w.r.t. the
/// `2 × H × W` logits (channel 0 background, channel 1 foreground).
/// Returns zero loss and zero gradient when no pixel is valid.
pub fn seg_loss(seg_logits: &Tensor, mask: &SegMask) -> Result<(f64, usize, Tensor)> {
    let (c, h, w) = seg_logits.chw()?;
    if c != 2 || h != mask.height || w != mask.width {
        return Err(shape_err(
            "seg_loss",
            format!(
                "logits {:?} do not match a 2-channel {}×{} mask",
                seg_logits.shape(),
                mask.height,
                mask.width
            ),
        ));
    }
    let plane = h * w;
    let z = seg_logits.data();
    let mut grad = Tensor::zeros(seg_logits.shape());
    let valid = mask.labels.iter().filter(|&&l| l != SegLabel::Ignore).count();
    if valid == 0 {
        return Ok((0.0, 0, grad));
    }
    let inv = 1.0 / valid as f64;
    let mut total = 0.0;
    let g = grad.data_mut();
    for (p, &label) in mask.labels.iter().enumerate() {
        let target = match label {
            SegLabel::Ignore => continue,
            SegLabel::Background => 0,
            SegLabel::Foreground => 1,
        };
        let (z0, z1) = (z[p], z[plane + p]);
        let m = z0.max(z1);
        let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
        let zt = if target == 0 { z0 } else { z1 };
        total += lse - zt;
        let p1 = (z1 - lse).exp();
        let p0 = (z0 - lse).exp();
        g[p] = (p0 - if target == 0 { 1.0 } else { 0.0 }) * inv;
        g[plane + p] = (p1 - if target == 1 { 1.0 } else { 0.0 }) * inv;
    }
    Ok((total * inv, valid, grad))
}
