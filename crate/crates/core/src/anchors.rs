//! Default boxes, IoU, the offset encoding, anchor matching and NMS.

use crate::error::{Error, Result};

/// Corner-form box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// Center-form box `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax].iter().all(|v| v.is_finite());
        if !finite || self.xmax <= self.xmin || self.ymax <= self.ymin {
            return Err(Error::InvalidBox(format!("{self:?} has non-positive extent")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.xmin + self.xmax),
            cy: 0.5 * (self.ymin + self.ymax),
            w: self.width(),
            h: self.height(),
        }
    }

    pub fn clip(&self, size: f64) -> BBox {
        BBox {
            xmin: self.xmin.clamp(0.0, size),
            ymin: self.ymin.clamp(0.0, size),
            xmax: self.xmax.clamp(0.0, size),
            ymax: self.ymax.clamp(0.0, size),
        }
    }
}

impl CenterBox {
    pub fn to_corners(&self) -> BBox {
        BBox {
            xmin: self.cx - 0.5 * self.w,
            ymin: self.cy - 0.5 * self.h,
            xmax: self.cx + 0.5 * self.w,
            ymax: self.cy + 0.5 * self.h,
        }
    }
}

/// Scored, classed box produced at inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Annotated object. `class_id` is the 0-based object class; the background
/// label used by the classifier is separate (label = class_id + 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Regression target `(t_cx, t_cy, t_w, t_h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxOffsets(pub [f64; 4]);

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Optional divisors applied to the offsets; `(1, 1)` is the plain transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub center_variance: f64,
    pub size_variance: f64,
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self {
            center_variance: 1.0,
            size_variance: 1.0,
        }
    }
}

impl BoxCoder {
    pub fn encode(&self, g: &BBox, d: &BBox) -> Result<BoxOffsets> {
        g.validate()?;
        d.validate()?;
        let (g, d) = (g.to_center(), d.to_center());
        Ok(BoxOffsets([
            (g.cx - d.cx) / d.w / self.center_variance,
            (g.cy - d.cy) / d.h / self.center_variance,
            (g.w / d.w).ln() / self.size_variance,
            (g.h / d.h).ln() / self.size_variance,
        ]))
    }

    pub fn decode(&self, t: &BoxOffsets, d: &BBox) -> Result<BBox> {
        d.validate()?;
        let d = d.to_center();
        let [tx, ty, tw, th] = t.0;
        Ok(CenterBox {
            cx: tx * self.center_variance * d.w + d.cx,
            cy: ty * self.center_variance * d.h + d.cy,
            w: d.w * (tw * self.size_variance).exp(),
            h: d.h * (th * self.size_variance).exp(),
        }
        .to_corners())
    }
}

/// `ĝ_cx = (g_cx − d_cx)/d_w`, `ĝ_cy = (g_cy − d_cy)/d_h`, `ĝ_w = ln(g_w/d_w)`, `ĝ_h = ln(g_h/d_h)`.
pub fn encode_box(g: &BBox, d: &BBox) -> Result<BoxOffsets> {
    BoxCoder::default().encode(g, d)
}

pub fn decode_box(t: &BoxOffsets, d: &BBox) -> Result<BBox> {
    BoxCoder::default().decode(t, d)
}

/// Default boxes of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLevel {
    /// Feature map extent (square).
    pub extent: usize,
    /// Box side in pixels for ratio 1.
    pub scale: f64,
    /// Adds a square box of side `sqrt(scale · next)` after the ratio boxes.
    pub next_scale: Option<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl AnchorLevel {
    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len() + usize::from(self.next_scale.is_some())
    }
}

/// Anchors in level, row, column, per-location order, clipped to the image.
pub fn generate_anchors(levels: &[AnchorLevel], image_size: usize) -> Vec<BBox> {
    let size = image_size as f64;
    let mut out = Vec::new();
    for level in levels {
        let step = size / level.extent as f64;
        let mut shapes: Vec<(f64, f64)> = level
            .aspect_ratios
            .iter()
            .map(|&r| (level.scale * r.sqrt(), level.scale / r.sqrt()))
            .collect();
        if let Some(next) = level.next_scale {
            let s = (level.scale * next).sqrt();
            shapes.push((s, s));
        }
        for y in 0..level.extent {
            for x in 0..level.extent {
                let (cx, cy) = ((x as f64 + 0.5) * step, (y as f64 + 0.5) * step);
                for &(w, h) in &shapes {
                    out.push(CenterBox { cx, cy, w, h }.to_corners().clip(size));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Match {
    Positive(usize),
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAssignment {
    pub matches: Vec<Match>,
}

impl MatchAssignment {
    pub fn num_positive(&self) -> usize {
        self.matches.iter().filter(|m| matches!(m, Match::Positive(_))).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matches.iter().enumerate().filter_map(|(i, m)| match m {
            Match::Positive(g) => Some((i, *g)),
            Match::Negative => None,
        })
    }
}

/// Bipartite step then threshold step.
///
/// The bipartite step repeatedly takes the highest-IoU pair among unclaimed
/// anchors and unserved ground truths (ties: lowest anchor, then lowest gt),
/// so every gt gets its own anchor while anchors last. Remaining anchors whose
/// best IoU reaches `pos_threshold` become positive for that gt (ties: lowest gt).
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], pos_threshold: f64) -> Result<MatchAssignment> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("cannot match against an empty anchor list".into()));
    }
    let mut matches = vec![Match::Negative; anchors.len()];
    if gts.is_empty() {
        return Ok(MatchAssignment { matches });
    }
    let overlaps: Vec<Vec<f64>> = gts.iter().map(|g| anchors.iter().map(|a| iou(a, g)).collect()).collect();

    let mut claimed = vec![false; anchors.len()];
    let mut served = vec![false; gts.len()];
    for _ in 0..gts.len().min(anchors.len()) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (gi, row) in overlaps.iter().enumerate() {
            if served[gi] {
                continue;
            }
            for (ai, &v) in row.iter().enumerate() {
                if claimed[ai] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bv, ba, bg)) => v > bv || (v == bv && (ai < ba || (ai == ba && gi < bg))),
                };
                if better {
                    best = Some((v, ai, gi));
                }
            }
        }
        let Some((_, ai, gi)) = best else { break };
        claimed[ai] = true;
        served[gi] = true;
        matches[ai] = Match::Positive(gi);
    }

    for ai in 0..anchors.len() {
        if claimed[ai] {
            continue;
        }
        let mut best_gt = 0;
        for gi in 1..gts.len() {
            if overlaps[gi][ai] > overlaps[best_gt][ai] {
                best_gt = gi;
            }
        }
        if overlaps[best_gt][ai] >= pos_threshold {
            matches[ai] = Match::Positive(best_gt);
        }
    }
    Ok(MatchAssignment { matches })
}

/// Greedy per-class suppression in descending score order (stable), keeping
/// at most `max_keep` boxes overall. A box is dropped when its IoU with a kept
/// box of the same class is at least `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    let mut per_class: std::collections::BTreeMap<usize, Vec<BBox>> = Default::default();
    for idx in order {
        if kept.len() >= max_keep {
            break;
        }
        let d = detections[idx];
        let same = per_class.entry(d.class_id).or_default();
        if same.iter().all(|k| iou(k, &d.bbox) < iou_threshold) {
            same.push(d.bbox);
            kept.push(d);
        }
    }
    kept
}
