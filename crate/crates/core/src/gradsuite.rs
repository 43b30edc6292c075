//! Central-difference gradient checks for every differentiable piece, from
//! single primitives up to the whole tiny network.
//!
//! Each check evaluates a scalar objective (a random projection of a tensor
//! output, or a loss) and compares its analytic gradient with
//! `(f(x+ε) − f(x−ε)) / 2ε` on a sample of coordinates of every input.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{match_anchors, BBox, BoxCoder, GroundTruth, Match, MatchAssignment};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Bindings;
use crate::losses::{background_losses, conf_loss, hard_negative_mine, loc_loss, total_loss, LossConfig, Predictions};
use crate::mrf::{mrf_forward, mrf_forward_graph, mrf_spec_with_branches, MrfBlockParams, DEFAULT_BRANCHES};
use crate::net::{build_network, NetConfig, NetworkParams, Objective, SegMode, Toggles};
use crate::sws::{rasterize_sws_mask, seg_loss, AreaThresholds, SegLabel, SegMask};
use crate::tensor::{relative_error, ConvSpec, Tensor};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Step for smooth objectives: balances truncation against roundoff.
const EPS: f64 = 1e-5;
/// Step for the tensor primitives. Each is linear in any single coordinate
/// (ReLU inputs keep a 0.1 margin from the kink), so central differences are
/// exact and a wide step only shrinks roundoff.
const LINEAR_EPS: f64 = 1e-3;
/// Coordinates probed per input tensor; smaller tensors are probed exhaustively.
const PROBES_PER_TENSOR: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Tensor,
    Mrf,
    Net,
    Loss,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Tensor, Suite::Loss, Suite::Mrf, Suite::Net];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tensor => "tensor",
            Suite::Mrf => "mrf",
            Suite::Net => "net",
            Suite::Loss => "loss",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown gradcheck module {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub suite: Suite,
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Probes `value` around `point` and compares against `analytic`, which holds
/// one gradient tensor per point tensor.
fn compare(
    point: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    rng: &mut ChaCha8Rng,
    mut value: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (t, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), point[t].shape(), "gradient {t} shape differs from its input");
        let n = point[t].len();
        let coords = if n <= PROBES_PER_TENSOR {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, PROBES_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let x0 = point[t].data()[i];
            probe[t].data_mut()[i] = x0 + eps;
            let plus = value(&probe)?;
            probe[t].data_mut()[i] = x0 - eps;
            let minus = value(&probe)?;
            probe[t].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            probes += 1;
        }
    }
    Ok((worst, probes))
}

/// Checks a piecewise-linear graph computation `build(g, leaves)` through the projection `<out, r>`.
fn check_graph(
    suite: Suite,
    name: String,
    tolerance: f64,
    point: Vec<Tensor>,
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let run = |xs: &[Tensor], leaf: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| if leaf { g.leaf(x.clone()) } else { g.constant(x.clone()) })
            .collect();
        let y = build(&mut g, &vars)?;
        Ok((g, vars, y))
    };
    let (g, vars, y) = run(&point, true)?;
    let r = Tensor::randn(g.value(y).shape(), 1.0, rng);
    let mut grads = g.backward(vec![(y, r.clone())])?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&point)
        .map(|(&v, x)| grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    let (max_rel_error, probes) = compare(&point, &analytic, LINEAR_EPS, rng, |xs| {
        let (g, _, y) = run(xs, false)?;
        Ok(g.value(y).dot(&r))
    })?;
    Ok(GradCheck { suite, name, max_rel_error, tolerance, probes })
}

/// Uniform values with magnitude in `[0.1, 1]`, so ReLU inputs sit well off the kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn tensor_suite(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let s = Suite::Tensor;
    let tol = PRIMITIVE_TOLERANCE;
    for k in [1, 3, 5] {
        for d in [1, 2, 3, 5] {
            for stride in [1, 2] {
                let spec = ConvSpec::new(2, 3, k).with_dilation(d).with_stride(stride).with_padding(d * (k - 1) / 2);
                let point = vec![
                    Tensor::randn(&[2, 9, 9], 1.0, rng),
                    Tensor::randn(&spec.weight_shape(), 0.5, rng),
                    Tensor::randn(&[3], 0.5, rng),
                ];
                out.push(check_graph(s, format!("conv2d k{k} d{d} s{stride}"), tol, point, rng, |g, v| {
                    g.conv2d(v[0], v[1], v[2], spec)
                })?);
            }
        }
    }
    for (k, stride, pad, d) in [(2, 2, 0, 1), (3, 1, 1, 1), (3, 2, 1, 1), (4, 2, 1, 1), (3, 1, 2, 2)] {
        let spec = ConvSpec::new(2, 3, k).with_stride(stride).with_padding(pad).with_dilation(d);
        let point = vec![
            Tensor::randn(&[2, 5, 5], 1.0, rng),
            Tensor::randn(&spec.transposed_weight_shape(), 0.5, rng),
            Tensor::randn(&[3], 0.5, rng),
        ];
        out.push(check_graph(
            s,
            format!("conv_transpose2d k{k} s{stride} p{pad} d{d}"),
            tol,
            point,
            rng,
            |g, v| g.conv_transpose2d(v[0], v[1], v[2], spec),
        )?);
    }
    let point = vec![off_kink(&[3, 6, 6], rng)];
    out.push(check_graph(s, "relu (off kink)".into(), tol, point, rng, |g, v| Ok(g.relu(v[0])))?);
    let point = vec![Tensor::randn(&[3, 4, 4], 1.0, rng), Tensor::randn(&[3, 4, 4], 1.0, rng)];
    out.push(check_graph(s, "add".into(), tol, point, rng, |g, v| g.add(v[0], v[1]))?);
    let point = vec![Tensor::randn(&[2, 4, 4], 1.0, rng), Tensor::randn(&[3, 4, 4], 1.0, rng)];
    out.push(check_graph(s, "concat".into(), tol, point, rng, |g, v| g.concat(v))?);
    let point = vec![Tensor::randn(&[2, 3, 3], 1.0, rng)];
    out.push(check_graph(s, "upsample2x".into(), tol, point, rng, |g, v| g.upsample2x(v[0]))?);
    Ok(out)
}

fn scalar_check(
    name: &str,
    tolerance: f64,
    point: Vec<Tensor>,
    analytic: Vec<Tensor>,
    rng: &mut ChaCha8Rng,
    value: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheck> {
    let (max_rel_error, probes) = compare(&point, &analytic, EPS, rng, value)?;
    Ok(GradCheck {
        suite: Suite::Loss,
        name: name.to_string(),
        max_rel_error,
        tolerance,
        probes,
    })
}

fn vector(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new(vec![n], v).expect("non-empty")
}

/// Twelve anchors on a 16-pixel canvas and two ground truths that match some of them.
struct MicroScene {
    anchors: Vec<BBox>,
    gts: Vec<GroundTruth>,
    assignment: MatchAssignment,
    num_classes: usize,
}

impl MicroScene {
    fn new() -> Result<Self> {
        let mut anchors = Vec::new();
        for &(cx, cy) in &[(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)] {
            for &(w, h) in &[(6.0, 6.0), (10.0, 5.0), (4.0, 9.0)] {
                anchors.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
            }
        }
        let gts = vec![
            GroundTruth { bbox: BBox::new(1.5, 1.0, 7.5, 7.5), class_id: 1 },
            GroundTruth { bbox: BBox::new(7.0, 10.0, 16.0, 14.5), class_id: 0 },
        ];
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let assignment = match_anchors(&anchors, &boxes, 0.5)?;
        Ok(Self { anchors, gts, assignment, num_classes: 2 })
    }

    fn preds(&self, conf: &Tensor, loc: &Tensor) -> Predictions {
        Predictions {
            num_classes: self.num_classes,
            conf: conf.data().to_vec(),
            loc: loc.data().to_vec(),
        }
    }

    fn random_point(&self, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let n = self.anchors.len();
        (
            Tensor::randn(&[n * (self.num_classes + 1)], 1.0, rng),
            Tensor::randn(&[n * 4], 0.3, rng),
        )
    }
}

fn loss_suite(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let scene = MicroScene::new()?;
    let k = scene.num_classes + 1;
    let labels: Vec<usize> = scene.gts.iter().map(|g| g.class_id + 1).collect();
    let boxes: Vec<BBox> = scene.gts.iter().map(|g| g.bbox).collect();

    // Softmax cross-entropy of a single positive anchor.
    let single = MatchAssignment { matches: vec![Match::Positive(0)] };
    let logits = Tensor::randn(&[k], 1.0, rng);
    let ce = |z: &Tensor, grad: Option<&mut [f64]>| {
        let p = Predictions { num_classes: scene.num_classes, conf: z.data().to_vec(), loc: vec![0.0; 4] };
        conf_loss(&p, &single, &[2], &[], grad)
    };
    let mut g = vec![0.0; k];
    ce(&logits, Some(&mut g))?;
    out.push(scalar_check("softmax cross-entropy", PRIMITIVE_TOLERANCE, vec![logits], vec![vector(g)], rng, |xs| {
        ce(&xs[0], None)
    })?);

    // Pixel-mean binary cross-entropy over a mask with all three labels.
    let mut mask = SegMask::filled(6, 5, SegLabel::Background);
    for (x, y) in [(1, 1), (2, 1), (3, 3), (4, 2)] {
        mask.set(x, y, SegLabel::Foreground);
    }
    for (x, y) in [(0, 4), (5, 0), (2, 2)] {
        mask.set(x, y, SegLabel::Ignore);
    }
    let z = Tensor::randn(&[2, 5, 6], 1.0, rng);
    let (_, _, gz) = seg_loss(&z, &mask)?;
    out.push(scalar_check("seg_loss", PRIMITIVE_TOLERANCE, vec![z], vec![gz], rng, |xs| {
        Ok(seg_loss(&xs[0], &mask)?.0)
    })?);

    // Confidence loss with the mined negatives held fixed at the probe point.
    let (conf, loc) = scene.random_point(rng);
    let mined = hard_negative_mine(&background_losses(&scene.preds(&conf, &loc)), &scene.assignment, 3.0);
    let mut g = vec![0.0; conf.len()];
    conf_loss(&scene.preds(&conf, &loc), &scene.assignment, &labels, &mined, Some(&mut g))?;
    out.push(scalar_check("conf_loss micro-scene", COMPOSITE_TOLERANCE, vec![conf.clone()], vec![vector(g)], rng, |xs| {
        conf_loss(&scene.preds(&xs[0], &loc), &scene.assignment, &labels, &mined, None)
    })?);

    let coder = LossConfig::default().coder;
    let mut g = vec![0.0; loc.len()];
    loc_loss(&scene.preds(&conf, &loc), &scene.assignment, &boxes, &scene.anchors, &coder, Some(&mut g))?;
    out.push(scalar_check("loc_loss micro-scene", COMPOSITE_TOLERANCE, vec![loc.clone()], vec![vector(g)], rng, |xs| {
        loc_loss(&scene.preds(&conf, &xs[0]), &scene.assignment, &boxes, &scene.anchors, &coder, None)
    })?);

    // Full objective, including mining and the seg term on a 16×16 mask.
    let seg_mask = rasterize_sws_mask(&boxes, 16, 16, &AreaThresholds { t1: 30.0, t2: 45.0 });
    let seg_z = Tensor::randn(&[2, 16, 16], 1.0, rng);
    let config = LossConfig { alpha: 0.7, beta: 1.3, ..LossConfig::default() };
    let total = |xs: &[Tensor]| {
        total_loss(
            &scene.preds(&xs[0], &xs[1]),
            Some((&xs[2], &seg_mask)),
            &scene.assignment,
            &scene.gts,
            &scene.anchors,
            &config,
        )
    };
    let point = vec![conf, loc, seg_z];
    let (_, lg) = total(&point)?;
    let analytic = vec![vector(lg.conf), vector(lg.loc), lg.seg.expect("seg term present")];
    out.push(scalar_check("total_loss micro-scene", COMPOSITE_TOLERANCE, point, analytic, rng, |xs| {
        Ok(total(xs)?.0.total)
    })?);
    Ok(out)
}

fn mrf_suite(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (name, in_ch) in [("MRF block", 8), ("MRF block (projected shortcut)", 6)] {
        let spec = mrf_spec_with_branches(in_ch, 8, &DEFAULT_BRANCHES);
        let mut params = MrfBlockParams::init(&spec, "mrf", rng)?;
        for c in params.convs_mut() {
            c.bias = Tensor::randn(c.bias.shape(), 0.1, rng);
        }
        let e = spec.max_effective_kernel();
        let input = Tensor::randn(&[in_ch, e, e], 1.0, rng);

        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let mut binds = Bindings::new();
        let y = mrf_forward_graph(&mut g, &params, &spec, x, &mut binds)?;
        let r = Tensor::randn(g.value(y).shape(), 1.0, rng);
        let mut grads = g.backward(vec![(y, r.clone())])?;
        let pg = binds.collect(&g, &grads);
        let mut point = vec![input];
        let mut analytic = vec![grads.take(x).expect("input feeds the output")];
        for c in params.convs() {
            let (gw, gb) = &pg.0[&c.name];
            point.extend([c.weight.clone(), c.bias.clone()]);
            analytic.extend([gw.clone(), gb.clone()]);
        }
        let (max_rel_error, probes) = compare(&point, &analytic, EPS, rng, |xs| {
            let mut p = params.clone();
            for (i, c) in p.convs_mut().into_iter().enumerate() {
                c.weight = xs[1 + 2 * i].clone();
                c.bias = xs[2 + 2 * i].clone();
            }
            Ok(mrf_forward(&p, &spec, &xs[0])?.dot(&r))
        })?;
        out.push(GradCheck {
            suite: Suite::Mrf,
            name: name.into(),
            max_rel_error,
            tolerance: COMPOSITE_TOLERANCE,
            probes,
        });
    }
    Ok(out)
}

fn tiny_scene() -> Vec<GroundTruth> {
    vec![
        GroundTruth { bbox: BBox::new(1.0, 2.0, 5.0, 6.0), class_id: 0 },
        GroundTruth { bbox: BBox::new(6.0, 5.0, 15.0, 14.0), class_id: 1 },
        GroundTruth { bbox: BBox::new(9.0, 1.0, 15.0, 7.0), class_id: 1 },
    ]
}

fn net_suite(rng: &mut ChaCha8Rng) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let gts = tiny_scene();
    let objective = Objective {
        match_threshold: 0.5,
        seg_thresholds: AreaThresholds { t1: 20.0, t2: 60.0 },
        loss: LossConfig { coder: BoxCoder { center_variance: 0.1, size_variance: 0.2 }, ..LossConfig::default() },
    };
    for (name, seg) in [("tiny network (SWS)", SegMode::Sws), ("tiny network (seg off)", SegMode::Off)] {
        let config = NetConfig::tiny(2, Toggles { seg, ..Toggles::full() });
        let mut net = build_network(&config, rng.random())?;
        for c in net.convs_mut() {
            c.bias = Tensor::randn(c.bias.shape(), 0.05, rng);
        }
        let anchors = config.anchors();
        let image = Tensor::randn(&[3, 16, 16], 1.0, rng);
        let r = net.image_gradients(&image, &gts, &anchors, &objective, true)?;
        let active: Vec<String> = r.params.0.keys().cloned().collect();
        let mut point = vec![image];
        let mut analytic = vec![r.image.expect("requested")];
        for n in &active {
            let c = net.convs().into_iter().find(|c| &c.name == n).expect("bound layer exists");
            let (gw, gb) = &r.params.0[n];
            point.extend([c.weight.clone(), c.bias.clone()]);
            analytic.extend([gw.clone(), gb.clone()]);
        }
        let value = |xs: &[Tensor]| -> Result<f64> {
            let mut probe: NetworkParams = net.clone();
            for c in probe.convs_mut() {
                if let Some(i) = active.iter().position(|n| n == &c.name) {
                    c.weight = xs[1 + 2 * i].clone();
                    c.bias = xs[2 + 2 * i].clone();
                }
            }
            Ok(probe.image_loss(&xs[0], &gts, &anchors, &objective)?.total)
        };
        let (max_rel_error, probes) = compare(&point, &analytic, EPS, rng, value)?;
        out.push(GradCheck {
            suite: Suite::Net,
            name: name.into(),
            max_rel_error,
            tolerance: COMPOSITE_TOLERANCE,
            probes,
        });
    }
    Ok(out)
}

/// Runs one suite with a fixed seed.
pub fn run_suite(suite: Suite) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    rng.set_stream(suite as u64);
    match suite {
        Suite::Tensor => tensor_suite(&mut rng),
        Suite::Loss => loss_suite(&mut rng),
        Suite::Mrf => mrf_suite(&mut rng),
        Suite::Net => net_suite(&mut rng),
    }
}

pub fn format_results(results: &[GradCheck]) -> String {
    use fmt::Write as _;
    let mut s = String::new();
    for r in results {
        let _ = writeln!(
            s,
            "{} {:<7} {:<36} max rel err {:.3e} (tol {:.0e}, {} probes)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.suite,
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.probes
        );
    }
    s
}
