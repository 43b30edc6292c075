//! Inference pipeline and dataset evaluation.

use anyhow::Result;
use mrfdet_core::anchors::{nms, BBox, BoxCoder, BoxOffsets, Detection};
use mrfdet_core::eval::{coco_summary, evaluate, CocoSummary, EvalConfig, EvalReport, ImageRecord};
use mrfdet_core::net::{class_probabilities, flatten_predictions, NetworkParams};
use mrfdet_core::Tensor;

use crate::config::ExperimentConfig;
use crate::dataset::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    /// Must match the encoding used in training.
    pub coder: BoxCoder,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_threshold: 0.45,
            max_detections: 200,
            coder: BoxCoder::default(),
        }
    }
}

/// Forward, softmax, decode, per-class score threshold and NMS.
pub fn detect(net: &NetworkParams, anchors: &[BBox], image: &Tensor, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    let (_, heads) = net.forward(image)?;
    let nc = net.config.num_classes;
    let preds = flatten_predictions(&heads, nc)?;
    let probs = class_probabilities(&preds);
    let size = net.config.image_size() as f64;
    let mut candidates = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        let row = &probs[a * (nc + 1)..(a + 1) * (nc + 1)];
        if row[1..].iter().all(|&p| p <= cfg.score_threshold) {
            continue;
        }
        let mut t = [0.0; 4];
        t.copy_from_slice(&preds.loc[a * 4..a * 4 + 4]);
        let Ok(b) = cfg.coder.decode(&BoxOffsets(t), anchor) else {
            continue;
        };
        let b = b.clip(size);
        if !(b.width() > 0.0 && b.height() > 0.0) {
            continue;
        }
        for (k, &p) in row[1..].iter().enumerate() {
            if p > cfg.score_threshold {
                candidates.push(Detection { bbox: b, class_id: k, score: p });
            }
        }
    }
    Ok(nms(&candidates, cfg.nms_threshold, cfg.max_detections))
}

/// Detections and ground truths for every sample.
pub fn collect_records(net: &NetworkParams, samples: &[Sample], cfg: &InferenceConfig) -> Result<Vec<ImageRecord>> {
    let anchors = net.config.anchors();
    samples
        .iter()
        .map(|s| {
            Ok(ImageRecord {
                detections: detect(net, &anchors, &s.image.to_tensor(false), cfg)?,
                gts: s.objects.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvaluation {
    pub report: EvalReport,
    pub coco: Option<CocoSummary>,
}

impl InferenceConfig {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        Self {
            coder: cfg.train.coder(),
            ..Self::default()
        }
    }
}

/// VOC-style (11-point at IoU 0.5) report, or all-point plus the COCO-style summary.
pub fn evaluate_model(
    net: &NetworkParams,
    samples: &[Sample],
    inference: &InferenceConfig,
    coco_style: bool,
) -> Result<ModelEvaluation> {
    let records = collect_records(net, samples, inference)?;
    let nc = net.config.num_classes;
    let config = if coco_style { EvalConfig::coco() } else { EvalConfig::voc() };
    Ok(ModelEvaluation {
        report: evaluate(&records, nc, &config),
        coco: coco_style.then(|| coco_summary(&records, nc)),
    })
}
