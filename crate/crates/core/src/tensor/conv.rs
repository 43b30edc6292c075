use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Geometry of a square-kernel 2-D convolution.
///
/// For a transposed convolution the same fields describe the operator whose
/// adjoint it is: `in_channels` is the transposed layer's input width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    /// Stride-1 spec whose output extent equals its input extent.
    /// Requires an odd effective kernel.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    /// Span of the dilated tap grid: `k + (k-1)(d-1)`.
    pub fn effective_kernel(&self) -> usize {
        self.kernel + (self.kernel - 1) * (self.dilation - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::InvalidSpec(format!(
                "channels, kernel, stride and dilation must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// Weight layout of the transposed operator: `in × out × k × k`.
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel, self.kernel]
    }

    pub fn out_extent(&self, extent: usize) -> Result<usize> {
        let padded = extent + 2 * self.padding;
        let e = self.effective_kernel();
        if padded < e {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input extent {extent} with padding {} is smaller than effective kernel {e}",
                    self.padding
                ),
            ));
        }
        Ok((padded - e) / self.stride + 1)
    }

    pub fn transposed_out_extent(&self, extent: usize) -> Result<usize> {
        let full = (extent - 1) * self.stride + self.effective_kernel();
        if full <= 2 * self.padding {
            return Err(shape_err(
                "transposed_conv2d",
                format!(
                    "input extent {extent} gives non-positive output with padding {}",
                    self.padding
                ),
            ));
        }
        Ok(full - 2 * self.padding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Dimensions of a convolution in its forward ("gather") orientation.
#[derive(Clone, Copy)]
struct Geom {
    ic: usize,
    oc: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
    d: usize,
}

/// Output indices `o` in `[lo, hi)` with `0 <= o*s + off < n_in`.
#[inline]
fn valid_range(off: isize, s: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off < 0 { (-off + s - 1) / s } else { 0 };
    let last = n_in as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(n_out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

impl Geom {
    #[inline]
    fn tap_offset(&self, kidx: usize) -> isize {
        (kidx * self.d) as isize - self.p as isize
    }

    /// Rows of the unfolded input: `ic·k·k`. Weights are that many columns wide.
    fn patch_len(&self) -> usize {
        self.ic * self.k * self.k
    }

    /// 1×1, stride 1, no padding: the input already is its own unfolding.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }

    /// Calls `f(cols_row, out_offset, run_len, in_offset)` for every in-bounds run of taps.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let g = *self;
        for i in 0..g.ic {
            for ky in 0..g.k {
                let dy = g.tap_offset(ky);
                let (oy0, oy1) = valid_range(dy, g.s, g.ih, g.oh);
                for kx in 0..g.k {
                    let dx = g.tap_offset(kx);
                    let (ox0, ox1) = valid_range(dx, g.s, g.iw, g.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let row = (i * g.k + ky) * g.k + kx;
                    for oy in oy0..oy1 {
                        let iy = ((oy * g.s) as isize + dy) as usize;
                        let ix0 = ((ox0 * g.s) as isize + dx) as usize;
                        f(row, oy * g.ow + ox0, ox1 - ox0, i * g.ih * g.iw + iy * g.iw + ix0);
                    }
                }
            }
        }
    }

    /// `cols[(i,ky,kx), (oy,ox)] = in[i, oy·s+ky·d-p, ox·s+kx·d-p]`, zero outside.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let s = self.s;
        let mut cols = vec![0.0; self.patch_len() * plane];
        self.for_each_tap(|row, o0, len, src| {
            let dst = &mut cols[row * plane + o0..row * plane + o0 + len];
            if s == 1 {
                dst.copy_from_slice(&input[src..src + len]);
            } else {
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = input[src + j * s];
                }
            }
        });
        cols
    }

    /// Adjoint of `im2col`: accumulates unfolded columns back onto `dst`.
    fn col2im(&self, cols: &[f64], dst: &mut [f64]) {
        let plane = self.oh * self.ow;
        let s = self.s;
        self.for_each_tap(|row, o0, len, d0| {
            let src = &cols[row * plane + o0..row * plane + o0 + len];
            if s == 1 {
                for (a, &b) in dst[d0..d0 + len].iter_mut().zip(src) {
                    *a += b;
                }
            } else {
                for (j, &b) in src.iter().enumerate() {
                    dst[d0 + j * s] += b;
                }
            }
        });
    }

    /// `out[oc × oh·ow] += W · unfold(input)` with `W` an `oc × ic·k·k` matrix.
    fn gather(&self, input: &[f64], weights: &[f64], out: &mut [f64]) {
        let plane = self.oh * self.ow;
        if self.is_pointwise() {
            gemm_nn(self.oc, plane, self.ic, weights, input, out);
        } else {
            let cols = self.im2col(input);
            gemm_nn(self.oc, plane, self.patch_len(), weights, &cols, out);
        }
    }

    /// Adjoint of `gather` with respect to its input: scatters `grad` (out planes)
    /// back onto `dst` (in planes).
    fn scatter(&self, grad: &[f64], weights: &[f64], dst: &mut [f64]) {
        let plane = self.oh * self.ow;
        if self.is_pointwise() {
            gemm_tn(self.ic, plane, self.oc, weights, grad, dst);
        } else {
            let mut cols = vec![0.0; self.patch_len() * plane];
            gemm_tn(self.patch_len(), plane, self.oc, weights, grad, &mut cols);
            self.col2im(&cols, dst);
        }
    }

    /// `dw += grad · unfold(input)ᵀ`.
    fn weight_grad(&self, grad: &[f64], input: &[f64], dw: &mut [f64]) {
        let plane = self.oh * self.ow;
        if self.is_pointwise() {
            gemm_nt(self.oc, self.ic, plane, grad, input, dw);
        } else {
            let cols = self.im2col(input);
            gemm_nt(self.oc, self.patch_len(), plane, grad, &cols, dw);
        }
    }
}

fn check_weights(op: &'static str, weights: &Tensor, expected: [usize; 4]) -> Result<()> {
    if weights.shape() != expected {
        return Err(shape_err(
            op,
            format!("weight shape {:?}, expected {expected:?}", weights.shape()),
        ));
    }
    Ok(())
}

fn check_bias(op: &'static str, bias: &Tensor, channels: usize) -> Result<()> {
    if bias.len() != channels {
        return Err(shape_err(
            op,
            format!("bias length {} does not match {channels} output channels", bias.len()),
        ));
    }
    Ok(())
}

fn check_channels(op: &'static str, what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(shape_err(op, format!("{what} {got}, expected {expected}")));
    }
    Ok(())
}

fn conv_geom(spec: &ConvSpec, ih: usize, iw: usize) -> Result<Geom> {
    Ok(Geom {
        ic: spec.in_channels,
        oc: spec.out_channels,
        ih,
        iw,
        oh: spec.out_extent(ih)?,
        ow: spec.out_extent(iw)?,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        d: spec.dilation,
    })
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut out[o * plane..(o + 1) * plane] {
            *v += b;
        }
    }
}

fn plane_sums(grad: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| grad[c * plane..(c + 1) * plane].iter().sum())
        .collect()
}

/// Dilated cross-correlation (no kernel flip) with per-channel bias.
/// `weights` is `out × in × k × k`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = input.chw()?;
    check_channels("conv2d", "input channels", c, spec.in_channels)?;
    check_weights("conv2d", weights, spec.weight_shape())?;
    check_bias("conv2d", bias, spec.out_channels)?;
    let g = conv_geom(spec, h, w)?;
    let mut out = vec![0.0; g.oc * g.oh * g.ow];
    g.gather(input.data(), weights.data(), &mut out);
    add_bias(&mut out, bias.data(), g.oh * g.ow);
    Tensor::new(vec![g.oc, g.oh, g.ow], out)
}

/// Exact adjoints of [`conv2d_forward`].
pub fn conv2d_backward(grad_out: &Tensor, input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<ConvGrads> {
    let (input_grad, weights_grad, bias_grad) = conv2d_backward_parts(grad_out, input, weights, spec, true)?;
    Ok(ConvGrads {
        input: input_grad.expect("requested"),
        weights: weights_grad,
        bias: bias_grad,
    })
}

pub(crate) fn conv2d_backward_parts(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    spec.validate()?;
    let (c, h, w) = input.chw()?;
    check_channels("conv2d_backward", "input channels", c, spec.in_channels)?;
    check_weights("conv2d_backward", weights, spec.weight_shape())?;
    let g = conv_geom(spec, h, w)?;
    if grad_out.shape() != [g.oc, g.oh, g.ow] {
        return Err(shape_err(
            "conv2d_backward",
            format!(
                "grad_out shape {:?}, forward output is {:?}",
                grad_out.shape(),
                [g.oc, g.oh, g.ow]
            ),
        ));
    }
    let input_grad = if want_input {
        let mut gi = vec![0.0; c * h * w];
        g.scatter(grad_out.data(), weights.data(), &mut gi);
        Some(Tensor::new(vec![c, h, w], gi)?)
    } else {
        None
    };
    let mut gw = vec![0.0; weights.len()];
    g.weight_grad(grad_out.data(), input.data(), &mut gw);
    let gb = plane_sums(grad_out.data(), g.oc, g.oh * g.ow);
    Ok((
        input_grad,
        Tensor::new(weights.shape().to_vec(), gw)?,
        Tensor::new(vec![g.oc], gb)?,
    ))
}

/// Geometry of the convolution whose adjoint the transposed layer computes:
/// its "input" is the transposed output and vice versa.
fn transposed_geom(spec: &ConvSpec, h: usize, w: usize) -> Result<Geom> {
    Ok(Geom {
        ic: spec.out_channels,
        oc: spec.in_channels,
        ih: spec.transposed_out_extent(h)?,
        iw: spec.transposed_out_extent(w)?,
        oh: h,
        ow: w,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        d: spec.dilation,
    })
}

/// Fractionally-strided convolution; `weights` is `in × out × k × k`.
/// Output extent is `(H-1)·stride - 2·pad + d(k-1) + 1`.
pub fn transposed_conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = input.chw()?;
    check_channels("transposed_conv2d", "input channels", c, spec.in_channels)?;
    check_weights("transposed_conv2d", weights, spec.transposed_weight_shape())?;
    check_bias("transposed_conv2d", bias, spec.out_channels)?;
    let g = transposed_geom(spec, h, w)?;
    // Weight (t_in=o, t_out=i) in the adjoint orientation.
    let mut out = vec![0.0; g.ic * g.ih * g.iw];
    g.scatter(input.data(), weights.data(), &mut out);
    add_bias(&mut out, bias.data(), g.ih * g.iw);
    Tensor::new(vec![g.ic, g.ih, g.iw], out)
}

pub fn transposed_conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    let (gi, gw, gb) = transposed_conv2d_backward_parts(grad_out, input, weights, spec, true)?;
    Ok(ConvGrads {
        input: gi.expect("requested"),
        weights: gw,
        bias: gb,
    })
}

pub(crate) fn transposed_conv2d_backward_parts(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    spec.validate()?;
    let (c, h, w) = input.chw()?;
    check_channels("transposed_conv2d_backward", "input channels", c, spec.in_channels)?;
    check_weights("transposed_conv2d_backward", weights, spec.transposed_weight_shape())?;
    let g = transposed_geom(spec, h, w)?;
    if grad_out.shape() != [g.ic, g.ih, g.iw] {
        return Err(shape_err(
            "transposed_conv2d_backward",
            format!(
                "grad_out shape {:?}, forward output is {:?}",
                grad_out.shape(),
                [g.ic, g.ih, g.iw]
            ),
        ));
    }
    let input_grad = if want_input {
        let mut gi = vec![0.0; c * h * w];
        g.gather(grad_out.data(), weights.data(), &mut gi);
        Some(Tensor::new(vec![c, h, w], gi)?)
    } else {
        None
    };
    let mut gw = vec![0.0; weights.len()];
    g.weight_grad(input.data(), grad_out.data(), &mut gw);
    let gb = plane_sums(grad_out.data(), g.ic, g.ih * g.iw);
    Ok((
        input_grad,
        Tensor::new(weights.shape().to_vec(), gw)?,
        Tensor::new(vec![g.ic], gb)?,
    ))
}
