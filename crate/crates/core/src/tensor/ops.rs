use super::Tensor;
use crate::error::{shape_err, Result};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Gates `grad_out` by `input > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(shape_err(
            "relu_backward",
            format!("grad_out {:?} vs input {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Replicates every pixel into a 2×2 block.
pub fn upsample_nearest_2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &input.data()[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (x, v) in dst.iter_mut().enumerate() {
                *v = src[x / 2];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Sums each 2×2 block of `grad_out`.
pub fn upsample_nearest_2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.chw()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(shape_err(
            "upsample_backward",
            format!("grad extent {oh}×{ow} is not even"),
        ));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * h + y / 2) * w + x / 2] += grad_out.data()[(ch * oh + y) * ow + x];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Stacks feature maps along channels in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    for t in inputs {
        let (c, th, tw) = t.chw()?;
        if (th, tw) != (h, w) {
            return Err(shape_err(
                "concat_channels",
                format!("spatial extent {th}×{tw} does not match {h}×{w}"),
            ));
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Splits a concatenated gradient back into per-input channel blocks.
pub fn concat_channels_backward(grad_out: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = grad_out.chw()?;
    if channels.iter().sum::<usize>() != c {
        return Err(shape_err(
            "concat_channels_backward",
            format!("channel split {channels:?} does not sum to {c}"),
        ));
    }
    let mut offset = 0;
    channels
        .iter()
        .map(|&n| {
            let block = grad_out.data()[offset * h * w..(offset + n) * h * w].to_vec();
            offset += n;
            Tensor::new(vec![n, h, w], block)
        })
        .collect()
}

pub fn add(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| shape_err("add", "no inputs"))?;
    let mut out = (*first).clone();
    for t in &inputs[1..] {
        if t.shape() != first.shape() {
            return Err(shape_err(
                "add",
                format!("shape {:?} does not match {:?}", t.shape(), first.shape()),
            ));
        }
        out.add_assign(t)?;
    }
    Ok(out)
}

/// Each addend receives the incoming gradient unchanged.
pub fn add_backward(grad_out: &Tensor, arity: usize) -> Vec<Tensor> {
    vec![grad_out.clone(); arity]
}

/// Softmax across channels at every spatial position.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let plane = h * w;
    let src = input.data();
    let mut out = vec![0.0; c * plane];
    for p in 0..plane {
        let m = (0..c).map(|ch| src[ch * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for ch in 0..c {
            let e = (src[ch * plane + p] - m).exp();
            out[ch * plane + p] = e;
            z += e;
        }
        for ch in 0..c {
            out[ch * plane + p] /= z;
        }
    }
    Tensor::new(vec![c, h, w], out)
}
