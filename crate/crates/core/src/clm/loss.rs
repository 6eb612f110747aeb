use super::layout::{InputSequence, LayoutKind, Slot};
use super::model::Decoder;
use crate::numerics::weighted_nll;
use crate::{Error, Result};

/// Next-slot targets and loss weights for a packed batch. The row for position `i`
/// predicts slot `i + 1`; supervised rows of a sequence share weight `1 / (|T| · B)`,
/// where `|T|` counts the caption tokens and the terminal `[cls]`.
pub fn targets_and_weights(batch: &[&InputSequence]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let b = batch.len() as f64;
    for seq in batch {
        if seq.kind != LayoutKind::TextTraining {
            return Err(Error::InvalidSpec("loss needs a text-training layout".into()));
        }
        let count = seq.target_count() as f64;
        for i in 0..seq.len() {
            let next = i + 1;
            match seq.slots.get(next) {
                Some(Slot::Token(t)) if seq.loss_mask[next] != 0.0 => {
                    targets.push(*t);
                    weights.push(seq.loss_mask[next] / count / b);
                }
                _ => {
                    targets.push(0);
                    weights.push(0.0);
                }
            }
        }
    }
    Ok((targets, weights))
}

/// Per-sample normalized negative log-likelihood, averaged over the batch.
pub fn batch_loss(dec: &Decoder, batch: &[&InputSequence]) -> Result<f64> {
    let (targets, weights) = targets_and_weights(batch)?;
    let (logits, _) = dec.forward(batch)?;
    Ok(weighted_nll(&logits, &targets, &weights)?.0)
}

/// [`batch_loss`] plus gradient accumulation into the decoder parameters.
pub fn batch_loss_and_grad(dec: &mut Decoder, batch: &[&InputSequence]) -> Result<f64> {
    let (targets, weights) = targets_and_weights(batch)?;
    let (logits, mut cache) = dec.forward(batch)?;
    let (loss, g) = weighted_nll(&logits, &targets, &weights)?;
    dec.backward(&mut cache, &g)?;
    Ok(loss)
}

/// Loss of a single training sequence: mean NLL over its caption tokens and terminal `[cls]`.
pub fn clm_loss(dec: &Decoder, input: &InputSequence) -> Result<f64> {
    batch_loss(dec, &[input])
}
