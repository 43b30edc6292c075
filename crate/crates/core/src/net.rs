//! Network assembly: backbone, top-down feature merge, per-level predictors
//! and the segmentation head.
//!
//! Detection levels are ordered finest first. The finest feature stage (stride
//! 4) is the "extra" level produced only by the top-down merge; it is a
//! detection level when `extra_level` is on and always feeds the seg head.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{generate_anchors, match_anchors, AnchorLevel, BBox, GroundTruth, MatchAssignment};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{check_unique_names, Bindings, ConvKind, ConvParams, ParamGrads};
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossGradients, Predictions};
use crate::mrf::{mrf_forward_graph, mrf_spec_with_branches, MrfBlockParams, MrfBlockSpec, DEFAULT_BRANCHES};
use crate::sws::{rasterize_sws_mask, AreaThresholds, SegMask};
use crate::tensor::{self, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub convs: usize,
    /// Stride of the stage's first 3×3 convolution.
    pub downsample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub image_size: usize,
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Stage indices whose outputs are pyramid features, finest first.
    pub feature_stages: Vec<usize>,
}

impl BackboneSpec {
    /// Five stages of two 3×3 convs, each starting with a stride-2 conv;
    /// stages 1..=4 (strides 4, 8, 16, 32) are pyramid features.
    pub fn desk(image_size: usize) -> Self {
        let stages = [16, 32, 64, 64, 64]
            .iter()
            .map(|&channels| StageSpec { channels, convs: 2, downsample: 2 })
            .collect();
        Self {
            image_size,
            in_channels: 3,
            stages,
            feature_stages: vec![1, 2, 3, 4],
        }
    }

    /// Cumulative stride after each stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut s = 1;
        self.stages
            .iter()
            .map(|st| {
                s *= st.downsample;
                s
            })
            .collect()
    }

    pub fn feature_strides(&self) -> Vec<usize> {
        let strides = self.stage_strides();
        self.feature_stages.iter().map(|&i| strides[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.feature_stages.len() < 2 {
            return Err(Error::InvalidSpec("backbone needs stages and at least two feature levels".into()));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.convs == 0 || s.downsample == 0) {
            return Err(Error::InvalidSpec("stage fields must be positive".into()));
        }
        if self.feature_stages.iter().any(|&i| i >= self.stages.len()) {
            return Err(Error::InvalidSpec("feature stage index out of range".into()));
        }
        let strides = self.feature_strides();
        for w in strides.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(Error::InvalidSpec(format!(
                    "feature strides must double level to level for the top-down merge, got {strides:?}"
                )));
            }
        }
        if let Some(s) = strides.iter().find(|&&s| self.image_size % s != 0) {
            return Err(Error::InvalidSpec(format!(
                "stride {s} does not divide image size {}",
                self.image_size
            )));
        }
        if strides[0] != 4 {
            return Err(Error::InvalidSpec(format!(
                "finest feature must sit at stride 4 for the segmentation head, got {}",
                strides[0]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegMode {
    Off,
    /// All objects paint foreground.
    Aws,
    /// Only objects with area in `[T1, T2]` paint foreground.
    Sws,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub mrf: bool,
    pub extra_level: bool,
    pub seg: SegMode,
}

impl Toggles {
    pub fn baseline() -> Self {
        Self { mrf: false, extra_level: false, seg: SegMode::Off }
    }

    pub fn full() -> Self {
        Self { mrf: true, extra_level: true, seg: SegMode::Sws }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    pub pyramid_channels: usize,
    /// `(kernel, dilation)` branches of every MRF block.
    pub mrf_branches: Vec<(usize, usize)>,
    /// Ratio-1 box side per feature stage, plus one trailing size used for the
    /// coarsest level's geometric-mean box.
    pub anchor_sizes: Vec<f64>,
    /// Output channels of the two transposed convs; the transition conv keeps the second.
    pub seg_channels: [usize; 2],
    pub toggles: Toggles,
}

/// `2 × stride` per level, capped at `0.75 × image`, then the image size.
pub fn default_anchor_sizes(feature_strides: &[usize], image_size: usize) -> Vec<f64> {
    let cap = 0.75 * image_size as f64;
    let mut sizes: Vec<f64> = feature_strides.iter().map(|&s| (2.0 * s as f64).min(cap)).collect();
    sizes.push(image_size as f64);
    sizes
}

impl NetConfig {
    pub fn desk(num_classes: usize, toggles: Toggles) -> Self {
        let backbone = BackboneSpec::desk(64);
        let anchor_sizes = default_anchor_sizes(&backbone.feature_strides(), backbone.image_size);
        Self {
            backbone,
            num_classes,
            pyramid_channels: 64,
            mrf_branches: DEFAULT_BRANCHES.to_vec(),
            anchor_sizes,
            seg_channels: [16, 8],
            toggles,
        }
    }

    /// 16×16 input, 8-channel stages; small enough for whole-network gradient checks.
    pub fn tiny(num_classes: usize, toggles: Toggles) -> Self {
        let backbone = BackboneSpec {
            image_size: 16,
            in_channels: 3,
            stages: (0..4).map(|_| StageSpec { channels: 8, convs: 1, downsample: 2 }).collect(),
            feature_stages: vec![1, 2, 3],
        };
        let anchor_sizes = default_anchor_sizes(&backbone.feature_strides(), backbone.image_size);
        Self {
            backbone,
            num_classes,
            pyramid_channels: 8,
            mrf_branches: vec![(1, 1), (3, 1)],
            anchor_sizes,
            seg_channels: [8, 8],
            toggles,
        }
    }

    pub fn image_size(&self) -> usize {
        self.backbone.image_size
    }

    pub fn mrf_spec(&self) -> MrfBlockSpec {
        mrf_spec_with_branches(self.pyramid_channels, self.pyramid_channels, &self.mrf_branches)
    }

    /// Feature-stage indices (into `feature_stages`) that carry detection heads.
    pub fn detection_levels(&self) -> Vec<usize> {
        let n = self.backbone.feature_stages.len();
        let first = if self.toggles.extra_level { 0 } else { 1 };
        (first..n).collect()
    }

    fn level_ratios(position: usize, count: usize) -> Vec<f64> {
        if position == 0 || position + 1 == count {
            vec![1.0, 2.0, 0.5]
        } else {
            vec![1.0, 2.0, 0.5, 3.0, 1.0 / 3.0]
        }
    }

    /// Anchor layout of every detection level, finest first. Four boxes per
    /// location on the finest and coarsest levels, six elsewhere.
    pub fn anchor_levels(&self) -> Vec<AnchorLevel> {
        let strides = self.backbone.feature_strides();
        let levels = self.detection_levels();
        levels
            .iter()
            .enumerate()
            .map(|(pos, &f)| AnchorLevel {
                extent: self.image_size() / strides[f],
                scale: self.anchor_sizes[f],
                next_scale: Some(self.anchor_sizes[f + 1]),
                aspect_ratios: Self::level_ratios(pos, levels.len()),
            })
            .collect()
    }

    pub fn anchors(&self) -> Vec<BBox> {
        generate_anchors(&self.anchor_levels(), self.image_size())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 || self.pyramid_channels == 0 {
            return Err(Error::InvalidSpec("num_classes and pyramid_channels must be positive".into()));
        }
        if self.anchor_sizes.len() != self.backbone.feature_stages.len() + 1 {
            return Err(Error::InvalidSpec(format!(
                "need {} anchor sizes (one per feature level plus one), got {}",
                self.backbone.feature_stages.len() + 1,
                self.anchor_sizes.len()
            )));
        }
        if self.anchor_sizes.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidSpec("anchor sizes must be positive".into()));
        }
        if self.seg_channels.contains(&0) {
            return Err(Error::InvalidSpec("seg channels must be positive".into()));
        }
        self.mrf_spec().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelHead {
    /// Index into the backbone's feature stages.
    pub feature: usize,
    pub name: String,
    pub stride: usize,
    pub anchors_per_location: usize,
    pub mrf: Option<MrfBlockParams>,
    pub loc: ConvParams,
    pub conf: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegHeadParams {
    pub up1: ConvParams,
    pub up2: ConvParams,
    pub transition: ConvParams,
    pub classifier: ConvParams,
}

impl SegHeadParams {
    pub fn convs(&self) -> [&ConvParams; 4] {
        [&self.up1, &self.up2, &self.transition, &self.classifier]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetConfig,
    pub backbone: Vec<Vec<ConvParams>>,
    pub laterals: Vec<ConvParams>,
    pub heads: Vec<LevelHead>,
    pub seg: SegHeadParams,
}

fn level_name(stride: usize) -> String {
    format!("p{stride}")
}

/// Builds and MSRA-initializes every layer; identical seeds give identical weights.
pub fn build_network(config: &NetConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = &config.backbone;
    let p = config.pyramid_channels;

    let mut backbone = Vec::with_capacity(bb.stages.len());
    let mut in_c = bb.in_channels;
    for (si, st) in bb.stages.iter().enumerate() {
        let convs = (0..st.convs)
            .map(|ci| {
                let stride = if ci == 0 { st.downsample } else { 1 };
                let spec = ConvSpec::same(in_c, st.channels, 3, 1).with_stride(stride);
                in_c = st.channels;
                ConvParams::msra(format!("backbone.{si}.{ci}"), spec, ConvKind::Standard, &mut rng)
            })
            .collect();
        backbone.push(convs);
    }

    let strides = bb.feature_strides();
    let laterals = bb
        .feature_stages
        .iter()
        .zip(&strides)
        .map(|(&si, &s)| {
            let spec = ConvSpec::new(bb.stages[si].channels, p, 1);
            ConvParams::msra(format!("lateral.{}", level_name(s)), spec, ConvKind::Standard, &mut rng)
        })
        .collect();

    let mrf_spec = config.mrf_spec();
    let levels = config.detection_levels();
    let anchor_levels = config.anchor_levels();
    let mut heads = Vec::with_capacity(levels.len());
    for (pos, (&f, al)) in levels.iter().zip(&anchor_levels).enumerate() {
        let name = level_name(strides[f]);
        // The two coarsest levels are too small for the large kernels.
        let with_mrf = config.toggles.mrf && pos + 2 < levels.len();
        let mrf = if with_mrf {
            let extent = al.extent;
            if extent < mrf_spec.max_effective_kernel() {
                return Err(Error::InvalidSpec(format!(
                    "level {name} is {extent}×{extent}, smaller than the MRF block's largest effective kernel {}",
                    mrf_spec.max_effective_kernel()
                )));
            }
            Some(MrfBlockParams::init(&mrf_spec, &format!("head.{name}.mrf"), &mut rng)?)
        } else {
            None
        };
        let a = al.anchors_per_location();
        let loc = ConvParams::msra(
            format!("head.{name}.loc"),
            ConvSpec::same(p, a * 4, 3, 1),
            ConvKind::Standard,
            &mut rng,
        );
        let conf = ConvParams::msra(
            format!("head.{name}.conf"),
            ConvSpec::same(p, a * (config.num_classes + 1), 3, 1),
            ConvKind::Standard,
            &mut rng,
        );
        heads.push(LevelHead {
            feature: f,
            name,
            stride: strides[f],
            anchors_per_location: a,
            mrf,
            loc,
            conf,
        });
    }

    let [c1, c2] = config.seg_channels;
    let seg = SegHeadParams {
        up1: ConvParams::msra("seg.up1", ConvSpec::new(p, c1, 2).with_stride(2), ConvKind::Transposed, &mut rng),
        up2: ConvParams::msra("seg.up2", ConvSpec::new(c1, c2, 2).with_stride(2), ConvKind::Transposed, &mut rng),
        transition: ConvParams::msra("seg.transition", ConvSpec::same(c2, c2, 3, 1), ConvKind::Standard, &mut rng),
        classifier: ConvParams::msra("seg.classifier", ConvSpec::new(c2, 2, 1), ConvKind::Standard, &mut rng),
    };

    let net = NetworkParams {
        config: config.clone(),
        backbone,
        laterals,
        heads,
        seg,
    };
    check_unique_names(net.convs().iter().map(|c| c.name.as_str()))?;
    Ok(net)
}

/// `upsample_2x(top) + proj(lateral)`.
pub fn fpn_merge(top: &Tensor, lateral: &Tensor, proj: &ConvParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.constant(top.clone());
    let l = g.constant(lateral.clone());
    let y = fpn_merge_graph(&mut g, t, l, proj, &mut Bindings::new())?;
    Ok(g.value(y).clone())
}

fn fpn_merge_graph(g: &mut Graph, top: Var, lateral: Var, proj: &ConvParams, binds: &mut Bindings) -> Result<Var> {
    let (_, th, tw) = g.value(top).chw()?;
    let (_, lh, lw) = g.value(lateral).chw()?;
    if (lh, lw) != (2 * th, 2 * tw) {
        return Err(shape_err(
            "fpn_merge",
            format!("lateral extent {lh}×{lw} is not twice the top extent {th}×{tw}"),
        ));
    }
    let up = g.upsample2x(top)?;
    let l = proj.apply(g, lateral, binds)?;
    g.add(up, l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub name: String,
    pub stride: usize,
    pub feature: Tensor,
}

/// Detection features, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput {
    /// `A·4 × S × S`.
    pub loc: Tensor,
    /// `A·(num_classes+1) × S × S`.
    pub conf: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutput>,
    /// `2 × H × W` at input resolution, when the seg head ran.
    pub seg_logits: Option<Tensor>,
}

/// Graph handles of one forward pass.
#[derive(Debug)]
pub struct GraphOutputs {
    pub pyramid: Vec<Var>,
    pub loc: Vec<Var>,
    pub conf: Vec<Var>,
    pub seg: Option<Var>,
    pub finest: Option<Var>,
    pub bindings: Bindings,
}

impl NetworkParams {
    /// All layers in a fixed order.
    pub fn convs(&self) -> Vec<&ConvParams> {
        let mut v: Vec<&ConvParams> = self.backbone.iter().flatten().collect();
        v.extend(self.laterals.iter());
        for h in &self.heads {
            if let Some(m) = &h.mrf {
                v.extend(m.convs());
            }
            v.push(&h.loc);
            v.push(&h.conf);
        }
        v.extend(self.seg.convs());
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut ConvParams> {
        let mut v: Vec<&mut ConvParams> = self.backbone.iter_mut().flatten().collect();
        v.extend(self.laterals.iter_mut());
        for h in &mut self.heads {
            if let Some(m) = &mut h.mrf {
                v.extend(m.convs_mut());
            }
            v.push(&mut h.loc);
            v.push(&mut h.conf);
        }
        let s = &mut self.seg;
        v.extend([&mut s.up1, &mut s.up2, &mut s.transition, &mut s.classifier]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(|c| c.num_params()).sum()
    }

    pub fn seg_enabled(&self) -> bool {
        self.config.toggles.seg != SegMode::Off
    }

    /// Builds the forward pass on `g`. `image` must be a `3 × S × S` value already on the graph.
    pub fn forward_graph(&self, g: &mut Graph, image: Var) -> Result<GraphOutputs> {
        let cfg = &self.config;
        let size = cfg.image_size();
        let (c, h, w) = g.value(image).chw()?;
        if (c, h, w) != (cfg.backbone.in_channels, size, size) {
            return Err(shape_err(
                "forward",
                format!(
                    "image shape {:?}, expected {:?}",
                    g.value(image).shape(),
                    [cfg.backbone.in_channels, size, size]
                ),
            ));
        }
        let mut binds = Bindings::new();
        let mut x = image;
        let mut stage_out = Vec::with_capacity(self.backbone.len());
        for stage in &self.backbone {
            for conv in stage {
                let y = conv.apply(g, x, &mut binds)?;
                x = g.relu(y);
            }
            stage_out.push(x);
        }
        let feats: Vec<Var> = cfg.backbone.feature_stages.iter().map(|&i| stage_out[i]).collect();
        let n = feats.len();
        let seg_on = self.seg_enabled();
        let lowest = if cfg.toggles.extra_level || seg_on { 0 } else { 1 };

        let mut merged: Vec<Option<Var>> = vec![None; n];
        let mut top = self.laterals[n - 1].apply(g, feats[n - 1], &mut binds)?;
        merged[n - 1] = Some(top);
        for i in (lowest..n - 1).rev() {
            top = fpn_merge_graph(g, top, feats[i], &self.laterals[i], &mut binds)?;
            merged[i] = Some(top);
        }

        let mut out = GraphOutputs {
            pyramid: Vec::new(),
            loc: Vec::new(),
            conf: Vec::new(),
            seg: None,
            finest: merged[0],
            bindings: Bindings::new(),
        };
        let mrf_spec = cfg.mrf_spec();
        for head in &self.heads {
            let f = merged[head.feature].expect("merged down to every detection level");
            out.pyramid.push(f);
            let h = match &head.mrf {
                Some(m) => mrf_forward_graph(g, m, &mrf_spec, f, &mut binds)?,
                None => f,
            };
            out.loc.push(head.loc.apply(g, h, &mut binds)?);
            out.conf.push(head.conf.apply(g, h, &mut binds)?);
        }
        if seg_on {
            let finest = merged[0].expect("merged down to the finest level");
            out.seg = Some(seg_head_graph(g, &self.seg, finest, &mut binds)?);
        }
        out.bindings = binds;
        Ok(out)
    }

    /// Full forward pass.
    pub fn forward(&self, image: &Tensor) -> Result<(FeaturePyramid, HeadOutputs)> {
        let mut g = Graph::new();
        let img = g.constant(image.clone());
        let o = self.forward_graph(&mut g, img)?;
        Ok(self.collect_outputs(&g, &o))
    }

    pub fn collect_outputs(&self, g: &Graph, o: &GraphOutputs) -> (FeaturePyramid, HeadOutputs) {
        let pyramid = FeaturePyramid {
            levels: self
                .heads
                .iter()
                .zip(&o.pyramid)
                .map(|(h, &v)| PyramidLevel {
                    name: h.name.clone(),
                    stride: h.stride,
                    feature: g.value(v).clone(),
                })
                .collect(),
        };
        let heads = HeadOutputs {
            levels: o
                .loc
                .iter()
                .zip(&o.conf)
                .map(|(&l, &c)| LevelOutput {
                    loc: g.value(l).clone(),
                    conf: g.value(c).clone(),
                })
                .collect(),
            seg_logits: o.seg.map(|v| g.value(v).clone()),
        };
        (pyramid, heads)
    }

    /// Plain-text architecture summary.
    pub fn describe(&self) -> String {
        let cfg = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "input {0}×{0}  classes {1}  pyramid channels {2}  toggles mrf={3} extra_level={4} seg={5:?}",
            cfg.image_size(),
            cfg.num_classes,
            cfg.pyramid_channels,
            cfg.toggles.mrf,
            cfg.toggles.extra_level,
            cfg.toggles.seg
        );
        let _ = writeln!(s, "level  stride  extent  mrf  anchors/loc  loc_ch  conf_ch");
        for h in &self.heads {
            let _ = writeln!(
                s,
                "{:<6} {:>6}  {:>6}  {:<3}  {:>11}  {:>6}  {:>7}",
                h.name,
                h.stride,
                cfg.image_size() / h.stride,
                if h.mrf.is_some() { "yes" } else { "no" },
                h.anchors_per_location,
                h.loc.spec.out_channels,
                h.conf.spec.out_channels
            );
        }
        let _ = writeln!(
            s,
            "seg head: {} (2 channels at {}×{})",
            if self.seg_enabled() { "on" } else { "off" },
            cfg.image_size(),
            cfg.image_size()
        );
        let _ = writeln!(s, "anchors {}  parameters {}", cfg.anchors().len(), self.num_params());
        s
    }
}

/// Everything that turns one annotated image into a scalar training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// Anchors whose best IoU with a ground truth reaches this become positive.
    pub match_threshold: f64,
    /// Used only when the seg head is on.
    pub seg_thresholds: AreaThresholds,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGradients {
    pub loss: LossBreakdown,
    pub params: ParamGrads,
    pub image: Option<Tensor>,
}

impl NetworkParams {
    fn targets(
        &self,
        gts: &[GroundTruth],
        anchors: &[BBox],
        objective: &Objective,
    ) -> Result<(MatchAssignment, Option<SegMask>)> {
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let assignment = match_anchors(anchors, &boxes, objective.match_threshold)?;
        let size = self.config.image_size();
        let mask = self
            .seg_enabled()
            .then(|| rasterize_sws_mask(&boxes, size, size, &objective.seg_thresholds));
        Ok((assignment, mask))
    }

    /// Forward-only loss of one image.
    pub fn image_loss(&self, image: &Tensor, gts: &[GroundTruth], anchors: &[BBox], objective: &Objective) -> Result<LossBreakdown> {
        let (assignment, mask) = self.targets(gts, anchors, objective)?;
        let (_, heads) = self.forward(image)?;
        let preds = flatten_predictions(&heads, self.config.num_classes)?;
        let seg = heads.seg_logits.as_ref().zip(mask.as_ref());
        Ok(total_loss(&preds, seg, &assignment, gts, anchors, &objective.loss)?.0)
    }

    /// Loss of one image with its gradients w.r.t. every bound layer and,
    /// when `image_grad` is set, the image itself.
    pub fn image_gradients(
        &self,
        image: &Tensor,
        gts: &[GroundTruth],
        anchors: &[BBox],
        objective: &Objective,
        image_grad: bool,
    ) -> Result<ImageGradients> {
        let (assignment, mask) = self.targets(gts, anchors, objective)?;
        let mut g = Graph::new();
        let x = if image_grad { g.leaf(image.clone()) } else { g.constant(image.clone()) };
        let out = self.forward_graph(&mut g, x)?;
        let (_, heads) = self.collect_outputs(&g, &out);
        let nc = self.config.num_classes;
        let preds = flatten_predictions(&heads, nc)?;
        let seg = heads.seg_logits.as_ref().zip(mask.as_ref());
        let (loss, lg) = total_loss(&preds, seg, &assignment, gts, anchors, &objective.loss)?;

        let mut seeds = Vec::new();
        for ((gl, gc), (&lv, &cv)) in unflatten_gradients(&lg, &heads, nc)?
            .into_iter()
            .zip(out.loc.iter().zip(&out.conf))
        {
            seeds.push((lv, gl));
            seeds.push((cv, gc));
        }
        if let (Some(sv), Some(gs)) = (out.seg, lg.seg) {
            seeds.push((sv, gs));
        }
        let mut grads = g.backward(seeds)?;
        let params = out.bindings.collect(&g, &grads);
        let image = if image_grad {
            Some(grads.take(x).unwrap_or_else(|| Tensor::zeros(image.shape())))
        } else {
            None
        };
        Ok(ImageGradients { loss, params, image })
    }
}

fn seg_head_graph(g: &mut Graph, p: &SegHeadParams, finest: Var, binds: &mut Bindings) -> Result<Var> {
    let x = p.up1.apply(g, finest, binds)?;
    let x = p.up2.apply(g, x, binds)?;
    let x = p.transition.apply(g, x, binds)?;
    let x = g.relu(x);
    p.classifier.apply(g, x, binds)
}

/// Two stride-2 transposed convs, a 3×3 transition conv with ReLU, and a 1×1
/// classifier to two channels.
pub fn seg_head_forward(params: &SegHeadParams, finest_feature: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(finest_feature.clone());
    let y = seg_head_graph(&mut g, params, f, &mut Bindings::new())?;
    Ok(g.value(y).clone())
}

/// Flattens head maps into anchor order (level, row, column, anchor).
pub fn flatten_predictions(heads: &HeadOutputs, num_classes: usize) -> Result<Predictions> {
    let k = num_classes + 1;
    let mut conf = Vec::new();
    let mut loc = Vec::new();
    for lvl in &heads.levels {
        let (lc, s, s2) = lvl.loc.chw()?;
        let (cc, _, _) = lvl.conf.chw()?;
        let a = lc / 4;
        if lc != a * 4 || cc != a * k || s != s2 {
            return Err(shape_err(
                "flatten_predictions",
                format!("loc {:?} / conf {:?} inconsistent", lvl.loc.shape(), lvl.conf.shape()),
            ));
        }
        let plane = s * s;
        for p in 0..plane {
            for ai in 0..a {
                for c in 0..k {
                    conf.push(lvl.conf.data()[(ai * k + c) * plane + p]);
                }
                for m in 0..4 {
                    loc.push(lvl.loc.data()[(ai * 4 + m) * plane + p]);
                }
            }
        }
    }
    Ok(Predictions { num_classes, conf, loc })
}

/// Inverse of [`flatten_predictions`] applied to loss gradients: per level `(loc, conf)` maps.
pub fn unflatten_gradients(grads: &LossGradients, heads: &HeadOutputs, num_classes: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let k = num_classes + 1;
    let mut anchor = 0;
    let mut out = Vec::with_capacity(heads.levels.len());
    for lvl in &heads.levels {
        let (lc, s, _) = lvl.loc.chw()?;
        let a = lc / 4;
        let plane = s * s;
        let mut gl = Tensor::zeros(lvl.loc.shape());
        let mut gc = Tensor::zeros(lvl.conf.shape());
        for p in 0..plane {
            for ai in 0..a {
                for c in 0..k {
                    gc.data_mut()[(ai * k + c) * plane + p] = grads.conf[anchor * k + c];
                }
                for m in 0..4 {
                    gl.data_mut()[(ai * 4 + m) * plane + p] = grads.loc[anchor * 4 + m];
                }
                anchor += 1;
            }
        }
        out.push((gl, gc));
    }
    if anchor * 4 != grads.loc.len() {
        return Err(shape_err("unflatten_gradients", "anchor count mismatch"));
    }
    Ok(out)
}

/// Softmax class scores per anchor, `n_anchors × (num_classes + 1)`.
pub fn class_probabilities(preds: &Predictions) -> Vec<f64> {
    let k = preds.num_classes + 1;
    let mut out = Vec::with_capacity(preds.conf.len());
    for i in 0..preds.num_anchors() {
        let row = preds.logits(i);
        let t = Tensor::new(vec![k, 1, 1], row.to_vec()).expect("positive extent");
        out.extend_from_slice(tensor::softmax_channels(&t).expect("rank 3").data());
    }
    out
}
