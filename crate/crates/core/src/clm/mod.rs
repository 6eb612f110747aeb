//! Cross-modal language modeling: the decoder, its input layouts with anchor dropout,
//! and the training loop that conditions on caption embeddings only.

mod layout;
mod loss;
mod model;
mod train;

pub use layout::{build_generation_input, build_training_input, prefix_slots, InputSequence, LayoutKind, Slot};
pub use loss::{batch_loss, batch_loss_and_grad, clm_loss, targets_and_weights};
pub use model::{Decoder, DecoderCache, DecoderConfig, DecoderState};
pub use train::{
    evaluate_transfer, generate_for, train_clm, ClmConfig, EarlyStopping, EpochRecord, EvalItem, TrainingLog,
    TrainingSample,
};
pub use crate::vocab::{Vocab, CLS, PAD, SEP, UNK};

#[cfg(test)]
mod tests;
