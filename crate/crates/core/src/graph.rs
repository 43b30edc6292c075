//! A single-sample computation tape over the tensor primitives.
//!
//! Nodes are appended in evaluation order, so a reverse sweep visits every
//! consumer before its producers.

use crate::error::{shape_err, Result};
use crate::tensor::{self, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, spec: ConvSpec },
    ConvTranspose { x: Var, w: Var, b: Var, spec: ConvSpec },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Upsample2x(Var),
}

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    /// A differentiable input (parameter or probed activation).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input whose gradient is never needed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let y = tensor::conv2d_forward(self.value(x), self.value(w), self.value(b), &spec)?;
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(y, Op::Conv { x, w, b, spec }, ng))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let y = tensor::transposed_conv2d_forward(self.value(x), self.value(w), self.value(b), &spec)?;
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(y, Op::ConvTranspose { x, w, b, spec }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::relu(self.value(x));
        let ng = self.needs_grad[x.0];
        self.push(y, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(&[self.value(a), self.value(b)])?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = tensor::concat_channels(&refs)?;
        let ng = self.any_grad(xs);
        Ok(self.push(y, Op::Concat(xs.to_vec()), ng))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = tensor::upsample_nearest_2x(self.value(x))?;
        let ng = self.needs_grad[x.0];
        Ok(self.push(y, Op::Upsample2x(x), ng))
    }

    /// Reverse sweep from the given output gradients. Seeds on the same
    /// variable accumulate.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(shape_err(
                    "backward",
                    format!("seed shape {:?} for value {:?}", g.shape(), self.value(v).shape()),
                ));
            }
            accumulate(&mut grads, v, g)?;
        }
        for idx in (0..self.values.len()).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv { x, w, b, spec } => {
                    let want_x = self.needs_grad[x.0];
                    let (gx, gw, gb) = tensor::conv::conv2d_backward_parts(
                        &g,
                        self.value(*x),
                        self.value(*w),
                        spec,
                        want_x,
                    )?;
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx)?;
                    }
                    self.accumulate_if(&mut grads, *w, gw)?;
                    self.accumulate_if(&mut grads, *b, gb)?;
                }
                Op::ConvTranspose { x, w, b, spec } => {
                    let want_x = self.needs_grad[x.0];
                    let (gx, gw, gb) = tensor::conv::transposed_conv2d_backward_parts(
                        &g,
                        self.value(*x),
                        self.value(*w),
                        spec,
                        want_x,
                    )?;
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx)?;
                    }
                    self.accumulate_if(&mut grads, *w, gw)?;
                    self.accumulate_if(&mut grads, *b, gb)?;
                }
                Op::Relu(x) => {
                    let gx = tensor::relu_backward(&g, self.value(*x))?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Add(a, b) => {
                    self.accumulate_if(&mut grads, *b, g.clone())?;
                    self.accumulate_if(&mut grads, *a, g)?;
                }
                Op::Concat(xs) => {
                    let chans: Vec<usize> = xs.iter().map(|v| self.value(*v).shape()[0]).collect();
                    let parts = tensor::concat_channels_backward(&g, &chans)?;
                    for (v, p) in xs.iter().zip(parts) {
                        self.accumulate_if(&mut grads, *v, p)?;
                    }
                }
                Op::Upsample2x(x) => {
                    let gx = tensor::upsample_nearest_2x_backward(&g)?;
                    accumulate(&mut grads, *x, gx)?;
                }
            }
        }
        Ok(Gradients(grads))
    }

    fn accumulate_if(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if self.needs_grad[v.0] {
            accumulate(grads, v, g)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 2, 2], 1.5));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(vec![(y, Tensor::full(&[1, 2, 2], 1.0))]).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[1, 2, 2], 2.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 0.5));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, ConvSpec::same(1, 1, 3, 1)).unwrap();
        let grads = g.backward(vec![(y, Tensor::full(&[1, 3, 3], 1.0))]).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn small_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b1 = Tensor::randn(&[3], 0.5, &mut rng);
        let probe = Tensor::randn(&[5, 8, 8], 1.0, &mut rng);
        let x0 = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let build = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let w = g.constant(w1.clone());
            let b = g.constant(b1.clone());
            let c = g.conv2d(xv, w, b, ConvSpec::same(2, 3, 3, 1)).unwrap();
            let r = g.relu(c);
            let cat = g.concat(&[r, xv]).unwrap();
            let up = g.upsample2x(cat).unwrap();
            (g, xv, up)
        };
        let value = |x: &Tensor| {
            let (g, _, up) = build(x);
            g.value(up).dot(&probe)
        };
        let grad = |x: &Tensor| {
            let (g, xv, up) = build(x);
            g.backward(vec![(up, probe.clone())]).unwrap().take(xv).unwrap()
        };
        let err = finite_diff_check(value, grad, &x0, 1e-6);
        assert!(err < 1e-6, "relative error {err}");
    }
}
