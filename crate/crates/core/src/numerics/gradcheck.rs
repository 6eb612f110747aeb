use rand::seq::index::sample;

use super::ParamSet;
use crate::rng::substream;
use crate::Result;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (all of them when the tensor is smaller).
    pub samples_per_param: usize,
    /// Denominator floor for the relative error. Gradients that are exactly zero by
    /// symmetry (e.g. attention key biases) are then compared against roundoff-level
    /// finite differences in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, samples_per_param: 8, abs_floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares analytic gradients against central finite differences on a random subsample
/// of coordinates.
///
/// `loss_and_grad` must compute the loss and accumulate gradients into the parameters
/// (they are zeroed first); `loss` must compute the same loss without touching gradients.
pub fn grad_check<M: ParamSet>(
    model: &mut M,
    mut loss_and_grad: impl FnMut(&mut M) -> Result<f64>,
    mut loss: impl FnMut(&M) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    model.zero_grad();
    loss_and_grad(model)?;
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
    model.zero_grad();

    let mut rng = substream(cfg.seed, "grad-check");
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tolerance: cfg.tolerance };
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let picks: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let original = model.params()[pi].value.data()[i];
            model.params_mut()[pi].value.data_mut()[i] = original + cfg.step;
            let up = loss(model)?;
            model.params_mut()[pi].value.data_mut()[i] = original - cfg.step;
            let down = loss(model)?;
            model.params_mut()[pi].value.data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grads[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((model.params()[pi].name.clone(), i));
            }
        }
    }
    Ok(report)
}
