//! Multiple receptive fields block.
//!
//! A 1×1 bottleneck feeds parallel branches with distinct kernel sizes and
//! dilation rates. Branch outputs are concatenated in spec order, fused by a
//! 1×1 convolution and added to a shortcut path before the final ReLU.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Bindings, ConvKind, ConvParams};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub out_channels: usize,
}

impl BranchSpec {
    pub fn effective_kernel(&self) -> usize {
        effective_receptive_field(self.kernel, self.dilation)
    }

    fn conv_spec(&self, in_channels: usize) -> ConvSpec {
        ConvSpec::same(in_channels, self.out_channels, self.kernel, self.dilation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MrfBlockSpec {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub branches: Vec<BranchSpec>,
    pub out_channels: usize,
    pub shortcut: bool,
}

/// The five default branches as `(kernel, dilation)`.
pub const DEFAULT_BRANCHES: [(usize, usize); 5] = [(1, 1), (3, 1), (5, 1), (3, 2), (3, 3)];

/// Kernel + (kernel-1)(dilation-1): the span of a dilated tap grid.
pub fn effective_receptive_field(kernel: usize, dilation: usize) -> usize {
    kernel + (kernel - 1) * (dilation - 1)
}

/// Default block: five branches, uniform channel split of `out_channels`
/// (remainder to the first branch), bottleneck `ceil(in/4)`, shortcut on.
pub fn default_mrf_spec(in_channels: usize, out_channels: usize) -> MrfBlockSpec {
    mrf_spec_with_branches(in_channels, out_channels, &DEFAULT_BRANCHES)
}

pub fn mrf_spec_with_branches(
    in_channels: usize,
    out_channels: usize,
    branches: &[(usize, usize)],
) -> MrfBlockSpec {
    let n = branches.len().max(1);
    let per = out_channels / n;
    let rem = out_channels % n;
    let branches = branches
        .iter()
        .enumerate()
        .map(|(i, &(kernel, dilation))| BranchSpec {
            kernel,
            dilation,
            out_channels: (per + if i == 0 { rem } else { 0 }).max(1),
        })
        .collect();
    MrfBlockSpec {
        in_channels,
        bottleneck_channels: in_channels.div_ceil(4),
        branches,
        out_channels,
        shortcut: true,
    }
}

impl MrfBlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::InvalidSpec("MRF channel counts must be positive".into()));
        }
        if self.branches.is_empty() {
            return Err(Error::InvalidSpec("MRF block needs at least one branch".into()));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.kernel == 0 || b.dilation == 0 || b.out_channels == 0 {
                return Err(Error::InvalidSpec(format!("branch {i} has a zero field: {b:?}")));
            }
            if b.effective_kernel() % 2 == 0 {
                return Err(Error::InvalidSpec(format!(
                    "branch {i} (k={}, d={}) has even effective kernel {}; same padding needs it odd",
                    b.kernel,
                    b.dilation,
                    b.effective_kernel()
                )));
            }
        }
        Ok(())
    }

    pub fn concat_channels(&self) -> usize {
        self.branches.iter().map(|b| b.out_channels).sum()
    }

    pub fn max_effective_kernel(&self) -> usize {
        self.branches.iter().map(BranchSpec::effective_kernel).max().unwrap_or(1)
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut && self.in_channels != self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrfBlockParams {
    pub bottleneck: ConvParams,
    pub branches: Vec<ConvParams>,
    pub fuse: ConvParams,
    pub projection: Option<ConvParams>,
}

impl MrfBlockParams {
    pub fn init<R: Rng + ?Sized>(spec: &MrfBlockSpec, prefix: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let bottleneck = ConvParams::msra(
            format!("{prefix}.bottleneck"),
            ConvSpec::new(spec.in_channels, spec.bottleneck_channels, 1),
            ConvKind::Standard,
            rng,
        );
        let branches = spec
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| {
                ConvParams::msra(
                    format!("{prefix}.branch{i}"),
                    b.conv_spec(spec.bottleneck_channels),
                    ConvKind::Standard,
                    rng,
                )
            })
            .collect();
        let fuse = ConvParams::msra(
            format!("{prefix}.fuse"),
            ConvSpec::new(spec.concat_channels(), spec.out_channels, 1),
            ConvKind::Standard,
            rng,
        );
        let projection = spec.has_projection().then(|| {
            ConvParams::msra(
                format!("{prefix}.shortcut"),
                ConvSpec::new(spec.in_channels, spec.out_channels, 1),
                ConvKind::Standard,
                rng,
            )
        });
        Ok(Self {
            bottleneck,
            branches,
            fuse,
            projection,
        })
    }

    pub fn convs(&self) -> Vec<&ConvParams> {
        let mut v = vec![&self.bottleneck];
        v.extend(self.branches.iter());
        v.push(&self.fuse);
        v.extend(self.projection.iter());
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut ConvParams> {
        let mut v = vec![&mut self.bottleneck];
        v.extend(self.branches.iter_mut());
        v.push(&mut self.fuse);
        v.extend(self.projection.iter_mut());
        v
    }

    fn check(&self, spec: &MrfBlockSpec) -> Result<()> {
        let consistent = self.bottleneck.spec == ConvSpec::new(spec.in_channels, spec.bottleneck_channels, 1)
            && self.branches.len() == spec.branches.len()
            && self
                .branches
                .iter()
                .zip(&spec.branches)
                .all(|(p, b)| p.spec == b.conv_spec(spec.bottleneck_channels))
            && self.fuse.spec == ConvSpec::new(spec.concat_channels(), spec.out_channels, 1)
            && self.projection.is_some() == spec.has_projection();
        if consistent {
            Ok(())
        } else {
            Err(Error::InvalidSpec("MRF params do not match block spec".into()))
        }
    }
}

/// Runs the block on a standalone graph and returns its output value.
pub fn mrf_forward(params: &MrfBlockParams, spec: &MrfBlockSpec, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = mrf_forward_graph(&mut g, params, spec, x, &mut Bindings::new())?;
    Ok(g.value(y).clone())
}

pub fn mrf_forward_graph(
    g: &mut Graph,
    params: &MrfBlockParams,
    spec: &MrfBlockSpec,
    x: Var,
    binds: &mut Bindings,
) -> Result<Var> {
    params.check(spec)?;
    let (c, h, w) = g.value(x).chw()?;
    if c != spec.in_channels {
        return Err(shape_err(
            "mrf_forward",
            format!("input channels {c}, expected {}", spec.in_channels),
        ));
    }
    let e = spec.max_effective_kernel();
    if h < e || w < e {
        return Err(shape_err(
            "mrf_forward",
            format!("input extent {h}×{w} is smaller than effective kernel {e}"),
        ));
    }
    let b = params.bottleneck.apply(g, x, binds)?;
    let b = g.relu(b);
    let mut outs = Vec::with_capacity(params.branches.len());
    for branch in &params.branches {
        let y = branch.apply(g, b, binds)?;
        outs.push(g.relu(y));
    }
    let cat = g.concat(&outs)?;
    let fused = params.fuse.apply(g, cat, binds)?;
    let pre = if spec.shortcut {
        let short = match &params.projection {
            Some(p) => p.apply(g, x, binds)?,
            None => x,
        };
        g.add(fused, short)?
    } else {
        fused
    };
    Ok(g.relu(pre))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchReport {
    pub index: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub effective_kernel: usize,
    /// Tap offsets `(dy, dx)` relative to the output pixel, row-major.
    pub taps: Vec<(isize, isize)>,
}

fn axis_taps(kernel: usize, dilation: usize) -> Vec<isize> {
    let half = (dilation * (kernel - 1) / 2) as isize;
    (0..kernel).map(|i| (i * dilation) as isize - half).collect()
}

pub fn rf_report(spec: &MrfBlockSpec) -> Vec<BranchReport> {
    spec.branches
        .iter()
        .enumerate()
        .map(|(index, b)| {
            let axis = axis_taps(b.kernel, b.dilation);
            let taps = axis
                .iter()
                .flat_map(|&dy| axis.iter().map(move |&dx| (dy, dx)))
                .collect();
            BranchReport {
                index,
                kernel: b.kernel,
                dilation: b.dilation,
                effective_kernel: b.effective_kernel(),
                taps,
            }
        })
        .collect()
}

/// Distinct tap offsets covered by the union of all branches.
pub fn covered_offsets(report: &[BranchReport]) -> BTreeSet<(isize, isize)> {
    report.iter().flat_map(|r| r.taps.iter().copied()).collect()
}

pub fn format_rf_report(report: &[BranchReport]) -> String {
    let mut s = String::from("branch  k  d  eff  taps\n");
    for r in report {
        let axis = axis_taps(r.kernel, r.dilation);
        let axis: Vec<String> = axis.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "{:>6} {:>2} {:>2} {:>4}  {{{}}}^2",
            r.index,
            r.kernel,
            r.dilation,
            r.effective_kernel,
            axis.join(",")
        );
    }
    let widest = report.iter().map(|r| r.taps.len()).max().unwrap_or(0);
    let _ = writeln!(
        s,
        "union: {} distinct offsets (largest single branch: {widest})",
        covered_offsets(report).len()
    );
    s
}
