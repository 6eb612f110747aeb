use std::collections::BTreeMap;

use super::Tensor;
use crate::{Error, Result};

/// A named trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { name: name.into(), grad: zeros.clone(), m: zeros.clone(), v: zeros, value, step: 0 }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns a fixed, ordered list of parameters.
pub trait ParamSet {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    fn num_values(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites every parameter value from `tensors`, which must contain each name with
    /// a matching shape. Optimizer state is reset.
    fn load_named(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in self.params_mut() {
            let t = tensors.get(&p.name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            *p = Parameter::new(p.name.clone(), t.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip applied before the update.
    pub grad_clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    /// From-scratch training defaults. Fine-tuning a pretrained decoder would instead use
    /// a learning rate around 5e-7, which cannot move a random initialization.
    fn default() -> Self {
        Self { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, grad_clip_norm: Some(1.0) }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.grad_clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Parse(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// One bias-corrected Adam update over `params`, then zeroes their gradients.
pub fn adam_step(params: &mut [&mut Parameter], cfg: &OptimizerConfig) {
    let scale = match cfg.grad_clip_norm {
        Some(clip) => {
            let norm = params.iter().flat_map(|p| p.grad.data()).map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for p in params.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let Parameter { value, grad, m, v, .. } = &mut **p;
        for (((x, g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let g = g * scale;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *x -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> Parameter {
        Parameter::new("x", Tensor::new(vec![1], vec![x]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut p = scalar_param(2.5);
        adam_step(&mut [&mut p], &OptimizerConfig::default());
        assert_eq!(p.value.data()[0], 2.5);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.0);
        p.grad.data_mut()[0] = 1.0;
        let cfg = OptimizerConfig { grad_clip_norm: None, ..Default::default() };
        adam_step(&mut [&mut p], &cfg);
        assert!((p.value.data()[0] + cfg.learning_rate).abs() < 1e-10);
        assert_eq!(p.grad.data()[0], 0.0, "gradients are zeroed after the step");
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = scalar_param(1.25);
        let cfg = OptimizerConfig { learning_rate: 0.0, ..Default::default() };
        for _ in 0..5 {
            p.grad.data_mut()[0] = 3.0;
            adam_step(&mut [&mut p], &cfg);
        }
        assert_eq!(p.value.data()[0], 1.25);
    }

    #[test]
    fn descends_on_a_parabola() {
        let mut p = scalar_param(5.0);
        let cfg = OptimizerConfig { learning_rate: 0.1, ..Default::default() };
        for _ in 0..100 {
            let x = p.value.data()[0];
            p.grad.data_mut()[0] = 2.0 * x;
            adam_step(&mut [&mut p], &cfg);
        }
        assert!(p.value.data()[0].abs() < 5.0);
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let mut a = scalar_param(0.0);
        let mut b = scalar_param(0.0);
        a.grad.data_mut()[0] = 300.0;
        b.grad.data_mut()[0] = 400.0;
        let cfg = OptimizerConfig { learning_rate: 0.0, ..Default::default() };
        adam_step(&mut [&mut a, &mut b], &cfg);
        // clipped gradient (0.6, 0.8) lands in the first moment scaled by 1 - beta1
        assert!((a.m.data()[0] - 0.06).abs() < 1e-12);
        assert!((b.m.data()[0] - 0.08).abs() < 1e-12);
    }
}
