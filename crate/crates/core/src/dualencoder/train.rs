use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::contrastive::contrastive_loss_and_grads;
use super::model::{DualEncoder, EncoderConfig};
use super::Embedding;
use crate::microworld::{CaptionText, RawImageFeature};
use crate::numerics::{adam_step, OptimizerConfig, ParamSet};
use crate::rng::substream;
use crate::vocab::Vocab;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerConfig { learning_rate: 1e-3, ..OptimizerConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_retrieval: f64,
    pub logit_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainingLog {
    pub epochs: Vec<EncoderEpoch>,
}

fn strict_top1(sims: &[f64], n: usize, by_rows: bool) -> usize {
    let mut correct = 0;
    for a in 0..n {
        let at = |b: usize| if by_rows { sims[a * n + b] } else { sims[b * n + a] };
        let own = at(a);
        if (0..n).all(|b| b == a || at(b) < own) {
            correct += 1;
        }
    }
    correct
}

fn retrieval_from_embeddings(images: &[Embedding], texts: &[Embedding]) -> f64 {
    let n = images.len();
    let mut sims = vec![0.0; n * n];
    for (i, a) in images.iter().enumerate() {
        for (j, b) in texts.iter().enumerate() {
            sims[i * n + j] = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
        }
    }
    let hits = strict_top1(&sims, n, true) + strict_top1(&sims, n, false);
    hits as f64 / (2 * n) as f64
}

/// Top-1 retrieval accuracy among the given pairs, image→text and text→image averaged.
/// A query counts as correct only if its partner is strictly the most similar.
pub fn retrieval_accuracy(enc: &DualEncoder, pairs: &[(&RawImageFeature, &CaptionText)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to retrieve".into()));
    }
    let imgs: Vec<&RawImageFeature> = pairs.iter().map(|p| p.0).collect();
    let caps: Vec<&CaptionText> = pairs.iter().map(|p| p.1).collect();
    Ok(retrieval_from_embeddings(&enc.encode_images(&imgs)?, &enc.encode_texts(&caps)?))
}

/// Trains a fresh encoder on matched (image, caption) pairs. The text vocabulary is built
/// from the training captions. Validation retrieval is logged after every epoch.
pub fn train_encoder(
    pairs: &[(&RawImageFeature, &CaptionText)],
    val: &[(&RawImageFeature, &CaptionText)],
    cfg: &EncoderTrainConfig,
) -> Result<(DualEncoder, EncoderTrainingLog)> {
    cfg.optimizer.validate()?;
    if pairs.len() < 2 || cfg.batch_size < 2 {
        return Err(Error::Empty("contrastive training needs at least two pairs per batch".into()));
    }
    let vocab = Vocab::build(&pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?;
    let mut enc = DualEncoder::new(EncoderConfig::new(pairs[0].0.values.len()), vocab, &mut substream(cfg.seed, "encoder-init"));
    let mut shuffle_rng = substream(cfg.seed, "encoder-shuffle");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = EncoderTrainingLog::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let imgs: Vec<&RawImageFeature> = chunk.iter().map(|&i| pairs[i].0).collect();
            let caps: Vec<&CaptionText> = chunk.iter().map(|&i| pairs[i].1).collect();
            let (fi, ic) = enc.image_forward(&imgs)?;
            let (ft, tc) = enc.text_forward(&caps)?;
            let (loss, g) = contrastive_loss_and_grads(&fi, &ft, enc.log_scale.value.data()[0])?;
            enc.image_backward(&ic, &g.images);
            enc.text_backward(&tc, &g.texts)?;
            enc.log_scale.grad.data_mut()[0] += g.log_scale;
            adam_step(&mut enc.params_mut(), &cfg.optimizer);
            enc.clamp_scale();
            total += loss;
            batches += 1;
        }
        let val_retrieval = if val.is_empty() { f64::NAN } else { retrieval_accuracy(&enc, val)? };
        log.epochs.push(EncoderEpoch {
            epoch,
            loss: total / batches.max(1) as f64,
            val_retrieval,
            logit_scale: enc.logit_scale(),
        });
    }
    Ok((enc, log))
}
