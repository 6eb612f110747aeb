//! Forward kernels and their hand-written backward passes.

use super::Tensor;
use crate::{Error, Result};

/// `c = a·b + beta·c` on raw row-major buffers, with optional transposition of either
/// operand. `a` is `m×k` after transposition, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are asserted above and the strides address exactly
    // the m×k, k×n and m×n row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, out.data_mut());
    Ok(out)
}

/// `out = a·b` into a preallocated buffer.
pub fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<()> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 || out.shape() != [m, n] {
        return Err(Error::Shape(format!("matmul_into {:?}·{:?} -> {:?}", a.shape(), b.shape(), out.shape())));
    }
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, out.data_mut());
    Ok(())
}

/// Gradients `(dA, dB)` of `C = A·B` given `dC`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if grad_out.shape() != [m, n] {
        return Err(Error::Shape(format!("grad {:?} vs output [{m}, {n}]", grad_out.shape())));
    }
    let mut ga = Tensor::zeros(&[m, k]);
    let mut gb = Tensor::zeros(&[k, n]);
    gemm(m, n, k, grad_out.data(), false, b.data(), true, 0.0, ga.data_mut());
    gemm(k, m, n, a.data(), true, grad_out.data(), false, 0.0, gb.data_mut());
    Ok((ga, gb))
}

/// (outer, axis_len, inner) decomposition used by the axis-generic kernels.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, subtracting the maximum before exponentiation.
pub fn softmax_stable(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(logits.shape(), axis)?;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Backward of softmax given its output `y`: `dx = y ⊙ (dy − Σ y·dy)`.
pub fn softmax_backward(y: &Tensor, grad_y: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (yv, gv) = (y.data(), grad_y.data());
    let mut out = vec![0.0; yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: f64 = (0..len).map(|j| yv[at(j)] * gv[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = yv[at(j)] * (gv[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Saved statistics for [`layer_norm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Normalizes every row (last axis) to zero mean and unit variance, then applies
/// `gain ⊙ xhat + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let d = *x.shape().last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!("layer_norm width {d}, gain {}, bias {}", gain.len(), bias.len())));
    }
    let rows = x.len() / d.max(1);
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(s);
        let hr = &mut xhat.data_mut()[r * d..(r + 1) * d];
        for (h, v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * s;
        }
        let yr = &mut y.data_mut()[r * d..(r + 1) * d];
        let hr = &xhat.data()[r * d..(r + 1) * d];
        for j in 0..d {
            yr[j] = g[j] * hr[j] + b[j];
        }
    }
    Ok((y, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &Tensor, grad_y: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let d = gain.len();
    let rows = cache.rstd.len();
    if grad_y.len() != rows * d {
        return Err(Error::Shape("layer_norm_backward grad size".into()));
    }
    let g = gain.data();
    let mut dx = Tensor::zeros(grad_y.shape());
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let gy = &grad_y.data()[r * d..(r + 1) * d];
        let h = &cache.xhat.data()[r * d..(r + 1) * d];
        for j in 0..d {
            dg[j] += gy[j] * h[j];
            db[j] += gy[j];
            dxhat[j] = gy[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dh = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let s = cache.rstd[r];
        let out = &mut dx.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] = s * (dxhat[j] - mean_d - h[j] * mean_dh);
        }
    }
    Ok((dx, Tensor::new(vec![d], dg)?, Tensor::new(vec![d], db)?))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn gelu_backward(x: &Tensor, grad_y: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_y.data())
        .map(|(&v, &g)| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `Σ_r w_r · (−log softmax(logits_r)[target_r])` and its gradient w.r.t. the logits.
/// Rows with zero weight are skipped entirely.
pub fn weighted_nll(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<(f64, Tensor)> {
    let (n, v) = logits.dims2()?;
    if targets.len() != n || weights.len() != n {
        return Err(Error::Shape(format!("{n} rows, {} targets, {} weights", targets.len(), weights.len())));
    }
    let mut grad = Tensor::zeros(&[n, v]);
    let mut loss = 0.0;
    for r in 0..n {
        let w = weights[r];
        if w == 0.0 {
            continue;
        }
        let t = targets[r];
        if t >= v {
            return Err(Error::IndexOutOfRange { index: t, size: v });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        loss += w * (lse - row[t]);
        let gr = grad.row_mut(r);
        for (j, g) in gr.iter_mut().enumerate() {
            *g = w * (row[j] - lse).exp();
        }
        gr[t] -= w;
    }
    Ok((loss, grad))
}

/// Mean negative log-likelihood over positions whose mask is nonzero (mask entries act
/// as weights). An all-zero mask yields loss 0.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[f64]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, targets, mask)?.0)
}

/// Gradient of [`cross_entropy`] w.r.t. the logits.
pub fn cross_entropy_backward(logits: &Tensor, targets: &[usize], mask: &[f64]) -> Result<Tensor> {
    Ok(cross_entropy_with_grad(logits, targets, mask)?.1)
}

fn cross_entropy_with_grad(logits: &Tensor, targets: &[usize], mask: &[f64]) -> Result<(f64, Tensor)> {
    if mask.len() != targets.len() {
        return Err(Error::Shape(format!("mask {} vs targets {}", mask.len(), targets.len())));
    }
    let total: f64 = mask.iter().sum();
    if total == 0.0 {
        return Ok((0.0, Tensor::zeros(logits.shape())));
    }
    let weights: Vec<f64> = mask.iter().map(|m| m / total).collect();
    weighted_nll(logits, targets, &weights)
}

/// `x / |x|`; returns the normalized vector and the original norm.
pub fn l2_normalize(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok((x.iter().map(|v| v / norm).collect(), norm))
}

/// Backward of [`l2_normalize`] given output `y` and the input norm.
pub fn l2_normalize_backward(y: &[f64], norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(grad_y).map(|(a, b)| a * b).sum();
    y.iter().zip(grad_y).map(|(yi, gi)| (gi - yi * dot) / norm).collect()
}
