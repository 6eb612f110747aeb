use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layout::{build_training_input, InputSequence};
use super::loss::batch_loss_and_grad;
use super::model::{Decoder, DecoderConfig};
use crate::dualencoder::Embedding;
use crate::generation::{generate_caption, GenerationConfig};
use crate::metrics::{evaluate_set, MetricReport};
use crate::microworld::CaptionText;
use crate::numerics::{adam_step, OptimizerConfig, ParamSet};
use crate::rng::substream;
use crate::vocab::Vocab;
use crate::{Error, Result};

/// One text-only training example: the caption, its own embedding, and its nouns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub prefix: Embedding,
    pub anchors: Vec<String>,
    pub caption: CaptionText,
}

/// One evaluation example: a prefix (caption or image embedding), anchors, references.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub scene_id: u64,
    pub prefix: Embedding,
    pub anchors: Vec<String>,
    pub references: Vec<CaptionText>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    /// Epochs without a new best validation caption CIDEr before stopping.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClmConfig {
    /// Anchor dropout probability.
    pub q: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub early_stopping: Option<EarlyStopping>,
    /// Present training anchors in a fresh random order each epoch instead of caption
    /// order. Detector anchors arrive in confidence order at generation time, so with
    /// this off the model may read a word order into them that is not there.
    pub shuffle_anchors: bool,
    pub decoder: DecoderConfig,
    pub generation: GenerationConfig,
    pub seed: u64,
}

impl Default for ClmConfig {
    fn default() -> Self {
        Self {
            q: 0.5,
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig { learning_rate: 1e-3, ..OptimizerConfig::default() },
            early_stopping: Some(EarlyStopping { patience: 5 }),
            shuffle_anchors: false,
            decoder: DecoderConfig::default(),
            generation: GenerationConfig::default(),
            seed: 0,
        }
    }
}

impl ClmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(Error::InvalidSpec(format!("q = {} outside [0, 1]", self.q)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.generation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub text: Option<MetricReport>,
    pub caption: Option<MetricReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 = initialization).
    pub best_epoch: usize,
}

/// Decodes every item, in parallel; order of results follows `items`.
pub fn generate_for(dec: &Decoder, items: &[EvalItem], cfg: &GenerationConfig) -> Result<Vec<CaptionText>> {
    items.par_iter().map(|it| generate_caption(dec, &it.prefix, &it.anchors, cfg, it.scene_id)).collect()
}

fn report(dec: &Decoder, items: &[EvalItem], cfg: &GenerationConfig) -> Result<MetricReport> {
    let caps = generate_for(dec, items, cfg)?;
    let refs: Vec<Vec<CaptionText>> = items.iter().map(|i| i.references.clone()).collect();
    evaluate_set(&caps, &refs)
}

/// Scores the decoder on text-side prefixes and on image-side prefixes with identical
/// generation settings.
pub fn evaluate_transfer(
    dec: &Decoder,
    text_eval: &[EvalItem],
    image_eval: &[EvalItem],
    cfg: &GenerationConfig,
) -> Result<(MetricReport, MetricReport)> {
    if text_eval.is_empty() || image_eval.is_empty() {
        return Err(Error::Empty("both evaluation sets must be nonempty".into()));
    }
    Ok((report(dec, text_eval, cfg)?, report(dec, image_eval, cfg)?))
}

/// Trains a fresh decoder on text-only samples. Fresh anchor-dropout draws are made every
/// epoch. When `image_eval` is nonempty, each epoch is scored on both evaluation sets and
/// the parameters of the epoch with the best caption CIDEr are returned.
pub fn train_clm(
    samples: &[TrainingSample],
    vocab: &Vocab,
    text_eval: &[EvalItem],
    image_eval: &[EvalItem],
    cfg: &ClmConfig,
) -> Result<(Decoder, TrainingLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let mut dec = Decoder::new(cfg.decoder, vocab.clone(), &mut substream(cfg.seed, "clm-init"));
    let mut shuffle_rng = substream(cfg.seed, "clm-shuffle");
    let mut dropout_rng = substream(cfg.seed, "dropout");
    let mut anchor_rng = substream(cfg.seed, "anchor-order");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Decoder)> = None;
    let mut since_best = 0;
    let evaluate = !image_eval.is_empty();

    for epoch in 1..=cfg.epochs {
        let inputs: Vec<InputSequence> = samples
            .iter()
            .map(|s| {
                let mut anchors = s.anchors.clone();
                if cfg.shuffle_anchors {
                    anchors.shuffle(&mut anchor_rng);
                }
                build_training_input(
                    &s.prefix,
                    &anchors,
                    &s.caption.tokens,
                    cfg.q,
                    &mut dropout_rng,
                    vocab,
                    cfg.decoder.max_len,
                )
            })
            .collect::<Result<_>>()?;
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&InputSequence> = chunk.iter().map(|&i| &inputs[i]).collect();
            total += batch_loss_and_grad(&mut dec, &batch)?;
            adam_step(&mut dec.params_mut(), &cfg.optimizer);
            batches += 1;
        }
        let loss = total / batches as f64;
        if !loss.is_finite() {
            return Err(Error::InvalidSpec(format!("training diverged at epoch {epoch}")));
        }
        let (text, caption) = if evaluate {
            let text = if text_eval.is_empty() { None } else { Some(report(&dec, text_eval, &cfg.generation)?) };
            (text, Some(report(&dec, image_eval, &cfg.generation)?))
        } else {
            (None, None)
        };
        log.epochs.push(EpochRecord { epoch, loss, text, caption });

        let Some(score) = caption.map(|c| c.cider) else {
            log.best_epoch = epoch;
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, dec.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stopping.is_some_and(|es| since_best >= es.patience) {
                break;
            }
        }
    }
    if let Some((_, b)) = best {
        dec = b;
    }
    Ok((dec, log))
}
