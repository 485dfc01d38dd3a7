//! Convolution primitives on flat `C×H×W` buffers.
//!
//! Width is always periodic (the panorama wraps); height is zero-padded.
//! Convolutions are lowered to GEMM through an explicit column buffer.

use matrixmultiply::dgemm;
use super::sigmoid;

/// `c = a·b (+ c if accumulate)` for row-major `m×k` and `k×n` operands.
/// Strides let callers pass transposed views.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched by dgemm is within the slices given the
    // caller-provided shapes and strides, which are checked in debug builds.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Column buffer for a 3×3, stride-2, pad-1 convolution.
/// Layout: `cols[(ci·9 + kh·3 + kw)·N + i·wo + j]`.
pub(crate) fn im2col_s2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let n = ho * wo;
    let mut cols = vec![0.0; c * 9 * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..3 {
            for kw in 0..3 {
                let row_base = (ci * 9 + kh * 3 + kw) * n;
                for i in 0..ho {
                    let r = 2 * i + kh;
                    if r == 0 || r > h {
                        continue;
                    }
                    let src = &plane[(r - 1) * w..r * w];
                    let dst = &mut cols[row_base + i * wo..row_base + (i + 1) * wo];
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = src[(2 * j + kw + w - 1) % w];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_s2`].
pub(crate) fn col2im_s2(dcols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let n = ho * wo;
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for kh in 0..3 {
            for kw in 0..3 {
                let row_base = (ci * 9 + kh * 3 + kw) * n;
                for i in 0..ho {
                    let r = 2 * i + kh;
                    if r == 0 || r > h {
                        continue;
                    }
                    let dst = &mut plane[(r - 1) * w..r * w];
                    let src = &dcols[row_base + i * wo..row_base + (i + 1) * wo];
                    for (j, s) in src.iter().enumerate() {
                        dst[(2 * j + kw + w - 1) % w] += s;
                    }
                }
            }
        }
    }
    dx
}

/// Column buffer for a circular 1-D convolution, kernel 3, pad 1.
/// Layout: `cols[(ci·3 + k)·L + j] = x[ci][(j + k − 1) mod L]`.
pub(crate) fn im2col_1d(x: &[f64], c: usize, len: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * 3 * len];
    for ci in 0..c {
        let src = &x[ci * len..(ci + 1) * len];
        for k in 0..3 {
            let dst = &mut cols[(ci * 3 + k) * len..(ci * 3 + k + 1) * len];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[(j + k + len - 1) % len];
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_1d`].
pub(crate) fn col2im_1d(dcols: &[f64], c: usize, len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; c * len];
    for ci in 0..c {
        let dst = &mut dx[ci * len..(ci + 1) * len];
        for k in 0..3 {
            let src = &dcols[(ci * 3 + k) * len..(ci * 3 + k + 1) * len];
            for (j, s) in src.iter().enumerate() {
                dst[(j + k + len - 1) % len] += s;
            }
        }
    }
    dx
}

/// `out = W·cols + b` with `W: co×k`, `cols: k×n`.
pub(crate) fn conv_forward(weight: &[f64], bias: &[f64], cols: &[f64], co: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; co * n];
    gemm(co, k, n, weight, (k, 1), cols, (n, 1), &mut out, false);
    for (row, b) in out.chunks_mut(n).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Accumulates weight and bias gradients; returns `∂/∂cols` when asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    weight: &[f64],
    cols: &[f64],
    dout: &[f64],
    co: usize,
    k: usize,
    n: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    // dW += dout · colsᵀ
    gemm(co, n, k, dout, (n, 1), cols, (1, n), dweight, true);
    for (db, row) in dbias.iter_mut().zip(dout.chunks(n)) {
        *db += row.iter().sum::<f64>();
    }
    want_input.then(|| {
        let mut dcols = vec![0.0; k * n];
        // dcols = Wᵀ · dout
        gemm(k, co, n, weight, (1, k), dout, (n, 1), &mut dcols, false);
        dcols
    })
}

/// SiLU `x·σ(x)`. Smooth, so finite differences stay meaningful at any step.
pub(crate) fn silu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= sigmoid(*v));
}

pub(crate) fn silu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        let s = sigmoid(z);
        *g *= s * (1.0 + z * (1.0 - s));
    }
}

/// Linear-interpolation taps for circular ×`factor` upsampling of a
/// length-`len` signal: `(left, right, right_weight)` per output sample.
pub(crate) fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|u| {
            let p = (u as f64 + 0.5) / factor as f64 - 0.5;
            let j0 = p.floor();
            let f = p - j0;
            let l = (j0 as isize).rem_euclid(len as isize) as usize;
            (l, (l + 1) % len, f)
        })
        .collect()
}

pub(crate) fn upsample(x: &[f64], c: usize, len: usize, taps: &[(usize, usize, f64)]) -> Vec<f64> {
    let out_len = taps.len();
    let mut out = vec![0.0; c * out_len];
    for ci in 0..c {
        let src = &x[ci * len..(ci + 1) * len];
        for (o, &(l, r, f)) in out[ci * out_len..(ci + 1) * out_len].iter_mut().zip(taps) {
            *o = (1.0 - f) * src[l] + f * src[r];
        }
    }
    out
}

pub(crate) fn upsample_backward(dout: &[f64], c: usize, len: usize, taps: &[(usize, usize, f64)]) -> Vec<f64> {
    let out_len = taps.len();
    let mut dx = vec![0.0; c * len];
    for ci in 0..c {
        let dst = &mut dx[ci * len..(ci + 1) * len];
        for (g, &(l, r, f)) in dout[ci * out_len..(ci + 1) * out_len].iter().zip(taps) {
            dst[l] += (1.0 - f) * g;
            dst[r] += f * g;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    // <A x, y> = <x, Aᵀ y> for each lowering.
    #[test]
    fn im2col_adjoints() {
        let (c, h, w) = (2, 6, 8);
        let x = pseudo(c * h * w, 0.7);
        let cols = im2col_s2(&x, c, h, w);
        let y = pseudo(cols.len(), 1.3);
        assert!((dot(&cols, &y) - dot(&x, &col2im_s2(&y, c, h, w))).abs() < 1e-10);

        let x = pseudo(3 * 10, 0.3);
        let cols = im2col_1d(&x, 3, 10);
        let y = pseudo(cols.len(), 2.1);
        assert!((dot(&cols, &y) - dot(&x, &col2im_1d(&y, 3, 10))).abs() < 1e-10);

        let taps = upsample_taps(5, 8);
        let x = pseudo(2 * 5, 0.9);
        let up = upsample(&x, 2, 5, &taps);
        let y = pseudo(up.len(), 0.4);
        assert!((dot(&up, &y) - dot(&x, &upsample_backward(&y, 2, 5, &taps))).abs() < 1e-10);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (ci, co, h, w) = (2, 3, 4, 6);
        let x = pseudo(ci * h * w, 0.77);
        let wt = pseudo(co * ci * 9, 1.9);
        let b = vec![0.1, -0.2, 0.3];
        let cols = im2col_s2(&x, ci, h, w);
        let out = conv_forward(&wt, &b, &cols, co, ci * 9, (h / 2) * (w / 2));
        for o in 0..co {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for kh in 0..3 {
                            for kw in 0..3 {
                                let r = 2 * i as isize + kh as isize - 1;
                                if r < 0 || r >= h as isize {
                                    continue;
                                }
                                let col = (2 * j as isize + kw as isize - 1).rem_euclid(w as isize) as usize;
                                acc += wt[((o * ci + c) * 3 + kh) * 3 + kw] * x[(c * h + r as usize) * w + col];
                            }
                        }
                    }
                    assert!((out[(o * (h / 2) + i) * (w / 2) + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let taps = upsample_taps(4, 8);
        let up = upsample(&[2.5; 4], 1, 4, &taps);
        assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }
}
