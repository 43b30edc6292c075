//! Named convolution parameters and their binding onto a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{self, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Transposed,
}

/// Weights and bias of one convolution layer, addressed by a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub name: String,
    pub spec: ConvSpec,
    pub kind: ConvKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    /// MSRA initialization: zero-mean Gaussian with std `sqrt(2 / fan_in)`, zero bias.
    pub fn msra<R: Rng + ?Sized>(name: impl Into<String>, spec: ConvSpec, kind: ConvKind, rng: &mut R) -> Self {
        let fan_in = match kind {
            ConvKind::Standard => spec.in_channels * spec.kernel * spec.kernel,
            // Each output pixel of a stride-s transposed conv sees k²/s² taps per input channel.
            ConvKind::Transposed => {
                (spec.in_channels * spec.kernel * spec.kernel / (spec.stride * spec.stride)).max(1)
            }
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let shape = match kind {
            ConvKind::Standard => spec.weight_shape(),
            ConvKind::Transposed => spec.transposed_weight_shape(),
        };
        Self {
            name: name.into(),
            spec,
            kind,
            weight: Tensor::randn(&shape, std, rng),
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }

    pub fn zeros(name: impl Into<String>, spec: ConvSpec, kind: ConvKind) -> Self {
        let shape = match kind {
            ConvKind::Standard => spec.weight_shape(),
            ConvKind::Transposed => spec.transposed_weight_shape(),
        };
        Self {
            name: name.into(),
            spec,
            kind,
            weight: Tensor::zeros(&shape),
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match self.kind {
            ConvKind::Standard => tensor::conv2d_forward(input, &self.weight, &self.bias, &self.spec),
            ConvKind::Transposed => {
                tensor::transposed_conv2d_forward(input, &self.weight, &self.bias, &self.spec)
            }
        }
    }

    /// Adds this layer to `g`, registering its parameters in `binds`.
    pub fn apply(&self, g: &mut Graph, x: Var, binds: &mut Bindings) -> Result<Var> {
        let w = g.leaf(self.weight.clone());
        let b = g.leaf(self.bias.clone());
        binds.push(&self.name, w, b);
        match self.kind {
            ConvKind::Standard => g.conv2d(x, w, b, self.spec),
            ConvKind::Transposed => g.conv_transpose2d(x, w, b, self.spec),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Parameter leaves created while building one graph, in creation order.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    entries: Vec<(String, Var, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, weight: Var, bias: Var) {
        self.entries.push((name.to_string(), weight, bias));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    /// Gradients of every bound layer. Layers outside the backward cone get zeros.
    pub fn collect(&self, g: &Graph, grads: &Gradients) -> ParamGrads {
        let mut out = ParamGrads::default();
        for (name, w, b) in &self.entries {
            let gw = grads
                .get(*w)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(*w).shape()));
            let gb = grads
                .get(*b)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(*b).shape()));
            out.0.insert(name.clone(), (gw, gb));
        }
        out
    }
}

/// Weight and bias gradients keyed by layer name.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ParamGrads(pub BTreeMap<String, (Tensor, Tensor)>);

impl ParamGrads {
    pub fn get(&self, name: &str) -> Option<&(Tensor, Tensor)> {
        self.0.get(name)
    }

    /// Accumulates `other` into `self`, in key order.
    pub fn accumulate(&mut self, other: ParamGrads) -> Result<()> {
        for (name, (gw, gb)) in other.0 {
            match self.0.get_mut(&name) {
                Some((w, b)) => {
                    w.add_assign(&gw)?;
                    b.add_assign(&gb)?;
                }
                None => {
                    self.0.insert(name, (gw, gb));
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in self.0.values_mut() {
            *w = w.scale(s);
            *b = b.scale(s);
        }
    }

    /// Euclidean norm over every weight and bias gradient.
    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .map(|(w, b)| w.dot(w) + b.dot(b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(|(w, b)| w.is_finite() && b.is_finite())
    }
}

pub(crate) fn check_unique_names<'a>(names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::InvalidSpec(format!("duplicate layer name {n}")));
        }
    }
    Ok(())
}
