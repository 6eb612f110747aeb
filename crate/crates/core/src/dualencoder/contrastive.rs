use crate::numerics::Tensor;
use crate::{Error, Result};

/// Gradients of the symmetric contrastive loss.
#[derive(Debug, Clone)]
pub struct ContrastiveGrads {
    pub images: Tensor,
    pub texts: Tensor,
    /// Derivative with respect to the log of the logit scale.
    pub log_scale: f64,
}

fn log_softmax_diag(z: &[f64], n: usize, by_rows: bool) -> (f64, Vec<f64>) {
    // returns (sum of -log p_ii, probabilities laid out like z)
    let mut probs = vec![0.0; n * n];
    let mut nll = 0.0;
    for a in 0..n {
        let at = |b: usize| if by_rows { a * n + b } else { b * n + a };
        let max = (0..n).map(|b| z[at(b)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).map(|b| (z[at(b)] - max).exp()).sum();
        let lse = max + sum.ln();
        for b in 0..n {
            probs[at(b)] = (z[at(b)] - lse).exp();
        }
        nll += lse - z[at(a)];
    }
    (nll, probs)
}

/// Symmetric InfoNCE over a batch of matched rows: cross-entropy of `scale · I Tᵀ`
/// against the diagonal along rows (image→text) and along columns (text→image),
/// averaged. `images` and `texts` are `B × d` and expected unit-norm.
pub fn contrastive_loss_and_grads(images: &Tensor, texts: &Tensor, log_scale: f64) -> Result<(f64, ContrastiveGrads)> {
    let (b, d) = images.dims2()?;
    if texts.shape() != images.shape() {
        return Err(Error::Shape(format!("{:?} images vs {:?} texts", images.shape(), texts.shape())));
    }
    if b < 2 {
        return Err(Error::Empty("contrastive loss needs a batch of at least two pairs".into()));
    }
    let s = log_scale.exp();
    let mut m = vec![0.0; b * b];
    crate::numerics::gemm(b, d, b, images.data(), false, texts.data(), true, 0.0, &mut m);
    let z: Vec<f64> = m.iter().map(|v| s * v).collect();
    let (nll_r, p_r) = log_softmax_diag(&z, b, true);
    let (nll_c, p_c) = log_softmax_diag(&z, b, false);
    let loss = (nll_r + nll_c) / (2.0 * b as f64);

    let mut gz = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let eye = if i == j { 1.0 } else { 0.0 };
            gz[i * b + j] = (p_r[i * b + j] - eye + p_c[i * b + j] - eye) / (2.0 * b as f64);
        }
    }
    let g_log_scale = s * gz.iter().zip(&m).map(|(g, v)| g * v).sum::<f64>();
    let gm: Vec<f64> = gz.iter().map(|g| s * g).collect();
    let mut gi = Tensor::zeros(&[b, d]);
    let mut gt = Tensor::zeros(&[b, d]);
    crate::numerics::gemm(b, b, d, &gm, false, texts.data(), false, 0.0, gi.data_mut());
    crate::numerics::gemm(b, b, d, &gm, true, images.data(), false, 0.0, gt.data_mut());
    Ok((loss, ContrastiveGrads { images: gi, texts: gt, log_scale: g_log_scale }))
}

pub fn contrastive_loss(images: &Tensor, texts: &Tensor, log_scale: f64) -> Result<f64> {
    Ok(contrastive_loss_and_grads(images, texts, log_scale)?.0)
}
