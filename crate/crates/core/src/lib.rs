//! Zero-shot captioning by cross-modal language modeling with anchor augmentation.
//!
//! A decoder is trained to reconstruct captions from the caption's own embedding in a
//! contrastively learned image/text space, optionally conditioned on anchor words. At
//! generation time the caption embedding is swapped for the image embedding and the
//! anchors come from a (simulated) object detector.
//!
//! Everything runs on a synthetic micro-world so cross-modal transfer can be checked
//! against ground truth:
//!
//! - [`microworld`]: scenes, captions, raw image features, noun extraction, detector.
//! - [`numerics`]: dense tensors, explicit backward passes, Adam, gradient checks, checkpoints.
//! - [`dualencoder`]: the image/text encoders and contrastive training.
//! - [`clm`]: vocabulary, input layouts, the decoder and its training loop.
//! - [`generation`]: anchor filtering and beam search captioning.
//! - [`metrics`]: BLEU, ROUGE-L and CIDEr-D.
//! - [`counterfactual`]: concept directions applied to image embeddings.
//! - [`vocab`]: the shared word/id table with its special tokens.
//! - [`diagnostics`]: finite-difference checks over all differentiable code.

pub mod clm;
pub mod counterfactual;
pub mod diagnostics;
pub mod dualencoder;
pub mod error;
pub mod generation;
pub mod kv;
pub mod metrics;
pub mod microworld;
pub mod numerics;
pub mod rng;
pub mod vocab;

pub use error::{Error, Result};
