//! SGD training loop with warmup and step-drop learning-rate schedule.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};
use mrfdet_core::anchors::{BBox, GroundTruth};
use mrfdet_core::layers::ParamGrads;
use mrfdet_core::losses::LossBreakdown;
use mrfdet_core::net::{build_network, NetworkParams, Objective};
use mrfdet_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, TrainConfig};
use crate::dataset::Sample;

/// Anchors whose best IoU with a ground truth reaches this become positive.
pub const MATCH_THRESHOLD: f64 = 0.5;

/// Learning rate at a (fractional) epoch: linear warmup from `warmup_start_lr`
/// to `base_lr`, then `base_lr · 0.1^k` after `k` drops.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let lr = if epoch < cfg.warmup_epochs {
        cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * epoch / cfg.warmup_epochs
    } else {
        cfg.base_lr
    };
    let drops = cfg.lr_drops.iter().filter(|&&d| epoch >= d).count();
    lr * 0.1f64.powi(drops as i32)
}

/// Rounds to the nearest `f32`, the checkpoint's storage precision.
fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

/// Momentum SGD with weight decay applied directly to conv weights (not biases)
/// rather than through the loss. Parameters and velocities are kept at `f32`
/// precision so checkpoints restore the exact training state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sgd {
    pub velocity: BTreeMap<String, (Tensor, Tensor)>,
}

impl Sgd {
    /// Updates every layer that has an entry in `grads`; absent layers are left untouched.
    pub fn step(&mut self, net: &mut NetworkParams, grads: &ParamGrads, lr: f64, momentum: f64, weight_decay: f64) {
        for conv in net.convs_mut() {
            let Some((gw, gb)) = grads.get(&conv.name) else {
                continue;
            };
            let (vw, vb) = self
                .velocity
                .entry(conv.name.clone())
                .or_insert_with(|| (Tensor::zeros(gw.shape()), Tensor::zeros(gb.shape())));
            let shrink = 1.0 - lr * weight_decay;
            for ((w, v), g) in conv.weight.data_mut().iter_mut().zip(vw.data_mut()).zip(gw.data()) {
                *v = f32r(momentum * *v + g);
                *w = f32r(*w * shrink - lr * *v);
            }
            for ((b, v), g) in conv.bias.data_mut().iter_mut().zip(vb.data_mut()).zip(gb.data()) {
                *v = f32r(momentum * *v + g);
                *b = f32r(*b - lr * *v);
            }
        }
    }
}

/// Rounds every parameter to `f32`.
pub fn round_params(net: &mut NetworkParams) {
    for c in net.convs_mut() {
        for v in c.weight.data_mut().iter_mut().chain(c.bias.data_mut()) {
            *v = f32r(*v);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Batch mean of the per-image losses (`n_pos` is the batch total).
    pub loss: LossBreakdown,
}

impl StepLog {
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!(
            "epoch {} step {} lr {:.3e} total {:.5} det {:.5} conf {:.5} loc {:.5} seg {:.5} npos {} gnorm {:.4}",
            self.epoch, self.step, self.lr, l.total, l.l_det, l.l_conf, l.l_loc, l.l_seg, l.n_pos, self.grad_norm
        )
    }
}

/// Horizontal mirror of a box inside a `size`-wide image.
pub fn hflip_box(b: &BBox, size: f64) -> BBox {
    BBox::new(size - b.xmax, b.ymin, size - b.xmin, b.ymax)
}

/// Loss and parameter gradients for one image.
pub fn sample_gradients(
    net: &NetworkParams,
    cfg: &TrainConfig,
    anchors: &[BBox],
    image: &Tensor,
    gts: &[GroundTruth],
) -> Result<(LossBreakdown, ParamGrads)> {
    let r = net.image_gradients(image, gts, anchors, &objective(cfg), false)?;
    Ok((r.loss, r.params))
}

pub fn objective(cfg: &TrainConfig) -> Objective {
    Objective {
        match_threshold: MATCH_THRESHOLD,
        seg_thresholds: cfg.thresholds(),
        loss: cfg.loss(),
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.l_conf += p.l_conf / n;
        m.l_loc += p.l_loc / n;
        m.l_det += p.l_det / n;
        m.l_seg += p.l_seg / n;
        m.total += p.total / n;
        m.n_pos += p.n_pos;
    }
    m
}

/// Everything needed to continue or reproduce a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub net: NetworkParams,
    pub optimizer: Sgd,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: usize,
}

impl TrainState {
    /// Fresh MSRA-initialized network; the init and data-order streams derive from `train.seed`.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut net = build_network(&config.net(), config.train.seed)?;
        round_params(&mut net);
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            net,
            optimizer: Sgd::default(),
            rng,
            step: 0,
            epoch: 0,
        })
    }
}

/// Runs the remaining epochs of `state` over `samples`.
///
/// Each step averages per-image gradients over a shuffled mini-batch and
/// applies one SGD update. `on_step` sees every step's losses; when
/// `checkpoint` is set the state is written there after every epoch.
pub fn train(
    state: &mut TrainState,
    samples: &[Sample],
    checkpoint: Option<&Path>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    if samples.is_empty() {
        bail!("training set is empty");
    }
    let cfg = state.config.train.clone();
    let size = state.net.config.image_size();
    if let Some(s) = samples.iter().find(|s| s.image.width != size || s.image.height != size) {
        bail!("{} is {}×{}, network expects {size}×{size}", s.path, s.image.width, s.image.height);
    }
    let anchors = state.net.config.anchors();
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut state.rng);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let epoch_f = state.epoch as f64 + bi as f64 / steps_per_epoch as f64;
            let lr = lr_at(epoch_f, &cfg);
            let mut grads = ParamGrads::default();
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &samples[i];
                let flip = cfg.hflip && state.rng.random_bool(0.5);
                let image = s.image.to_tensor(flip);
                let gts: Vec<GroundTruth> = s
                    .objects
                    .iter()
                    .map(|g| GroundTruth {
                        bbox: if flip { hflip_box(&g.bbox, size as f64) } else { g.bbox },
                        class_id: g.class_id,
                    })
                    .collect();
                let (b, g) = sample_gradients(&state.net, &cfg, &anchors, &image, &gts)?;
                parts.push(b);
                grads.accumulate(g)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            let grad_norm = grads.global_norm();
            if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / grad_norm);
            }
            let loss = mean_breakdown(&parts);
            state.step += 1;
            if !loss.is_finite() || !grads.is_finite() {
                bail!(
                    "non-finite loss at step {} (epoch {}): total {} conf {} loc {} seg {}",
                    state.step,
                    state.epoch + 1,
                    loss.total,
                    loss.l_conf,
                    loss.l_loc,
                    loss.l_seg
                );
            }
            state
                .optimizer
                .step(&mut state.net, &grads, lr, cfg.momentum, cfg.weight_decay);
            on_step(&StepLog {
                epoch: state.epoch + 1,
                step: state.step,
                lr,
                grad_norm,
                loss,
            });
        }
        state.epoch += 1;
        if let Some(path) = checkpoint {
            Checkpoint::from_state(state).save(path)?;
        }
    }
    Ok(())
}
