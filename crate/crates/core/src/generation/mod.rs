//! Zero-shot captioning: thresholded detector anchors, the generation layout, and beam
//! search over the decoder.

mod beam;

pub use beam::{beam_search, greedy, is_banned, log_softmax, BeamConfig, BeamHypothesis, StepModel};

use crate::clm::{build_generation_input, Decoder, DecoderState, InputSequence};
use crate::dualencoder::{DualEncoder, Embedding};
use crate::microworld::{CaptionText, Detection, RawImageFeature};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Detector confidence threshold: labels must score strictly above it.
    pub p: f64,
    pub length_normalize: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { beam_width: 5, max_len: 32, p: 0.5, length_normalize: false }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::InvalidSpec("beam width and max length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidSpec(format!("threshold p = {} outside [0, 1]", self.p)));
        }
        Ok(())
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig { beam_width: self.beam_width, max_len: self.max_len, length_normalize: self.length_normalize }
    }
}

/// Labels scoring strictly above `p`, most confident first, without repeats.
pub fn filter_anchors(detections: &[Detection], p: f64) -> Vec<String> {
    let mut kept: Vec<&Detection> = detections.iter().filter(|d| d.confidence > p).collect();
    kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.label.cmp(&b.label)));
    let mut out: Vec<String> = Vec::new();
    for d in kept {
        if !out.contains(&d.label) {
            out.push(d.label.clone());
        }
    }
    out
}

/// A decoder bound to one conditioning input.
pub struct DecoderStepper<'a> {
    pub decoder: &'a Decoder,
    pub input: &'a InputSequence,
}

impl StepModel for DecoderStepper<'_> {
    type State = DecoderState;

    fn start(&self) -> Result<(DecoderState, Vec<f64>)> {
        let (s, logits) = self.decoder.start(self.input)?;
        Ok((s, log_softmax(&logits)))
    }

    fn advance(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        if state.position >= self.decoder.cfg.max_len {
            // out of positions: only stopping remains possible
            let mut lp = vec![f64::NEG_INFINITY; self.decoder.vocab.len()];
            lp[crate::vocab::CLS] = 0.0;
            return Ok(lp);
        }
        let logits = self.decoder.step(state, crate::clm::Slot::Token(token), &self.input.prefix.values)?;
        Ok(log_softmax(&logits))
    }
}

/// Beam-search decoding of one input; the returned hypothesis keeps raw ids.
pub fn decode(decoder: &Decoder, input: &InputSequence, cfg: &GenerationConfig) -> Result<BeamHypothesis> {
    cfg.validate()?;
    beam_search(&DecoderStepper { decoder, input }, &cfg.beam())
}

/// Caption words for a prefix embedding and anchor list, specials stripped.
pub fn generate_caption(
    decoder: &Decoder,
    prefix: &Embedding,
    anchors: &[String],
    cfg: &GenerationConfig,
    scene_id: u64,
) -> Result<CaptionText> {
    let input = build_generation_input(prefix, anchors, &decoder.vocab);
    let h = decode(decoder, &input, cfg)?;
    Ok(CaptionText::new(scene_id, decoder.vocab.decode(&h.tokens)))
}

/// Encode the image, keep detections above `cfg.p` as anchors, and decode.
pub fn caption_image(
    raw: &RawImageFeature,
    detections: &[Detection],
    enc: &DualEncoder,
    dec: &Decoder,
    cfg: &GenerationConfig,
) -> Result<CaptionText> {
    let f_i = enc.encode_image(raw)?;
    generate_caption(dec, &f_i, &filter_anchors(detections, cfg.p), cfg, raw.scene_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(label: &str, confidence: f64) -> Detection {
        Detection { label: label.into(), confidence }
    }

    #[test]
    fn threshold_filtering() {
        let d = [det("car", 0.3), det("dog", 0.95), det("ball", 0.6)];
        assert_eq!(filter_anchors(&d, 0.5), ["dog", "ball"]);
        assert!(filter_anchors(&d, 1.0).is_empty());
        assert_eq!(filter_anchors(&d, 0.6), ["dog"], "strictly greater");
        let dup = [det("dog", 0.7), det("dog", 0.9)];
        assert_eq!(filter_anchors(&dup, 0.5), ["dog"]);
    }
}
