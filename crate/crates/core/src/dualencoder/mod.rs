//! Dual encoder mapping raw image features and captions into one unit-norm embedding
//! space, trained with a symmetric contrastive loss.

mod contrastive;
mod model;
mod train;

pub use contrastive::{contrastive_loss, contrastive_loss_and_grads, ContrastiveGrads};
pub use model::{DualEncoder, EncoderConfig, ImageCache, TextCache};
pub use train::{retrieval_accuracy, train_encoder, EncoderEpoch, EncoderTrainConfig, EncoderTrainingLog};

use serde::{Deserialize, Serialize};

use crate::numerics::l2_normalize;
use crate::{Error, Result};

/// A point in the shared space. Encoder outputs are unit-norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        Ok(Self { values: l2_normalize(&self.values)?.0 })
    }
}

/// Cosine similarity.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("similarity of {}-d and {}-d embeddings", a.dim(), b.dim())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let a = Embedding::new(vec![0.3, -1.2, 2.0]);
        let neg = Embedding::new(a.values.iter().map(|v| -v).collect());
        let scaled = Embedding::new(a.values.iter().map(|v| 7.5 * v).collect());
        let b = Embedding::new(vec![1.0, 0.5, -0.25]);
        assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((similarity(&scaled, &b).unwrap() - similarity(&a, &b).unwrap()).abs() < 1e-12);
        assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        assert!(matches!(similarity(&a, &Embedding::zeros(3)), Err(Error::ZeroVector)));
        assert!(similarity(&a, &Embedding::zeros(2)).is_err());
    }
}
