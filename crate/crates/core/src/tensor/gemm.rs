//! Dense row-major matrix products used by the convolution kernels.
//! Every output element accumulates its terms in ascending inner index, so
//! results are reproducible regardless of blocking.

const NB: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    rows_times(m, n, k, |i, p| a[i * k + p], b, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    rows_times(m, n, k, |i, p| a[p * m + i], b, c);
}

#[inline(always)]
fn rows_times(m: usize, n: usize, k: usize, a: impl Fn(usize, usize) -> f64, b: &[f64], c: &mut [f64]) {
    for j0 in (0..n).step_by(NB) {
        let j1 = (j0 + NB).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for p in 0..k {
                let (a0, a1, a2, a3) = (a(i, p), a(i + 1, p), a(i + 2, p), a(i + 3, p));
                let brow = &b[p * n + j0..p * n + j1];
                for (j, &bv) in brow.iter().enumerate() {
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a(i, p);
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
            i += 1;
        }
    }
}

/// Dot product with eight interleaved partial sums (fixed order).
#[inline]
fn dot8(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for (xs, ys) in (&mut xc).zip(&mut yc) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = 0.0;
    for (a, b) in xc.remainder().iter().zip(yc.remainder()) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot8(arow, &b[j * k..(j + 1) * k]);
        }
    }
}
