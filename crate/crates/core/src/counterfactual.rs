//! Counterfactual probing: move an image embedding along a direction taken from two text
//! embeddings and compare the caption before and after.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::clm::Decoder;
use crate::dualencoder::{DualEncoder, Embedding};
use crate::generation::{generate_caption, GenerationConfig};
use crate::microworld::{CaptionText, RawImageFeature};
use crate::{Error, Result};

/// A concept direction. `direction` is the raw difference of the two unit text
/// embeddings, not re-normalized, so its length reflects how far apart the phrases are.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptShift {
    pub source: CaptionText,
    pub target: CaptionText,
    pub direction: Embedding,
    pub scale: f64,
}

impl ConceptShift {
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn reversed(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
            direction: Embedding::new(self.direction.values.iter().map(|v| -v).collect()),
            scale: self.scale,
        }
    }
}

/// `encode_text(target) - encode_text(source)` with scale 1.
pub fn concept_direction(source: &CaptionText, target: &CaptionText, enc: &DualEncoder) -> Result<ConceptShift> {
    let s = enc.encode_text(source)?;
    let t = enc.encode_text(target)?;
    let direction = Embedding::new(t.values.iter().zip(&s.values).map(|(a, b)| a - b).collect());
    Ok(ConceptShift { source: source.clone(), target: target.clone(), direction, scale: 1.0 })
}

/// `f_i + scale * direction`, scaled back to unit length. A shift that is exactly zero
/// returns `f_i` untouched.
pub fn apply_counterfactual(f_i: &Embedding, shift: &ConceptShift) -> Result<Embedding> {
    if f_i.dim() != shift.direction.dim() {
        return Err(Error::Shape(format!(
            "embedding has dim {} but direction has dim {}",
            f_i.dim(),
            shift.direction.dim()
        )));
    }
    if shift.scale == 0.0 || shift.direction.values.iter().all(|&v| v == 0.0) {
        return Ok(f_i.clone());
    }
    let moved: Vec<f64> = f_i.values.iter().zip(&shift.direction.values).map(|(a, d)| a + shift.scale * d).collect();
    Embedding::new(moved).normalized()
}

/// Multiset word difference: `removed` occur more often in the first caption, `added`
/// more often in the second. Both lists are sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WordDiff {
    pub removed: Vec<String>,
    pub added: Vec<String>,
}

impl WordDiff {
    pub fn is_empty(&self) -> bool {
        self.removed.is_empty() && self.added.is_empty()
    }
}

pub fn word_diff(a: &CaptionText, b: &CaptionText) -> WordDiff {
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for w in &a.tokens {
        *counts.entry(w).or_default() += 1;
    }
    for w in &b.tokens {
        *counts.entry(w).or_default() -= 1;
    }
    let mut diff = WordDiff::default();
    for (w, n) in counts {
        let list = if n > 0 { &mut diff.removed } else { &mut diff.added };
        list.extend(std::iter::repeat_n(w.to_string(), n.unsigned_abs() as usize));
    }
    diff
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterfactualPair {
    pub scene_id: u64,
    pub original: CaptionText,
    pub counterfactual: CaptionText,
    pub diff: WordDiff,
}

/// Captions each image as-is and after the shift. The anchors are the same in both runs,
/// so any change comes from the moved prefix.
pub fn counterfactual_report(
    images: &[(&RawImageFeature, Vec<String>)],
    shift: &ConceptShift,
    enc: &DualEncoder,
    dec: &Decoder,
    cfg: &GenerationConfig,
) -> Result<Vec<CounterfactualPair>> {
    let raws: Vec<&RawImageFeature> = images.iter().map(|(r, _)| *r).collect();
    let embs = enc.encode_images(&raws)?;
    images
        .par_iter()
        .zip(embs)
        .map(|((raw, anchors), f_i)| {
            let original = generate_caption(dec, &f_i, anchors, cfg, raw.scene_id)?;
            let moved = apply_counterfactual(&f_i, shift)?;
            let counterfactual = generate_caption(dec, &moved, anchors, cfg, raw.scene_id)?;
            let diff = word_diff(&original, &counterfactual);
            Ok(CounterfactualPair { scene_id: raw.scene_id, original, counterfactual, diff })
        })
        .collect()
}

/// Aggregate view of a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CounterfactualSummary {
    pub pairs: usize,
    /// Counterfactual contains the target phrase and not the source phrase.
    pub flipped: usize,
    /// Same set of category words in both captions.
    pub categories_preserved: usize,
    pub unchanged: usize,
    /// Words that changed but belong to neither phrase, with how often they did.
    pub side_effects: BTreeMap<String, usize>,
}

impl CounterfactualSummary {
    pub fn flip_rate(&self) -> f64 {
        ratio(self.flipped, self.pairs)
    }

    pub fn preserve_rate(&self) -> f64 {
        ratio(self.categories_preserved, self.pairs)
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 { 0.0 } else { n as f64 / d as f64 }
}

pub fn contains_phrase(caption: &CaptionText, phrase: &CaptionText) -> bool {
    !phrase.tokens.is_empty() && caption.tokens.windows(phrase.tokens.len()).any(|w| w == phrase.tokens.as_slice())
}

fn categories_in<'a>(c: &'a CaptionText, categories: &[String]) -> Vec<&'a String> {
    let mut v: Vec<&String> = c.tokens.iter().filter(|t| categories.contains(t)).collect();
    v.sort();
    v.dedup();
    v
}

pub fn summarize(pairs: &[CounterfactualPair], shift: &ConceptShift, categories: &[String]) -> CounterfactualSummary {
    let mut s = CounterfactualSummary { pairs: pairs.len(), ..Default::default() };
    for p in pairs {
        if contains_phrase(&p.counterfactual, &shift.target) && !contains_phrase(&p.counterfactual, &shift.source) {
            s.flipped += 1;
        }
        if categories_in(&p.original, categories) == categories_in(&p.counterfactual, categories) {
            s.categories_preserved += 1;
        }
        if p.diff.is_empty() {
            s.unchanged += 1;
        }
        for w in p.diff.removed.iter().chain(&p.diff.added) {
            if !shift.source.tokens.contains(w) && !shift.target.tokens.contains(w) {
                *s.side_effects.entry(w.clone()).or_default() += 1;
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualencoder::EncoderConfig;
    use crate::rng::substream;
    use crate::vocab::Vocab;

    fn cap(s: &str) -> CaptionText {
        CaptionText::from_text(0, s)
    }

    fn encoder() -> DualEncoder {
        let vocab = Vocab::from_words(["a", "red", "blue", "dog", "cat"].map(String::from)).unwrap();
        DualEncoder::new(EncoderConfig::new(8), vocab, &mut substream(1, "encoder-init"))
    }

    fn shift(values: Vec<f64>, scale: f64) -> ConceptShift {
        ConceptShift { source: cap("red dog"), target: cap("blue dog"), direction: Embedding::new(values), scale }
    }

    #[test]
    fn direction_antisymmetric_and_zero_on_self() {
        let enc = encoder();
        let ab = concept_direction(&cap("red dog"), &cap("blue dog"), &enc).unwrap();
        let ba = concept_direction(&cap("blue dog"), &cap("red dog"), &enc).unwrap();
        for (x, y) in ab.direction.values.iter().zip(&ba.direction.values) {
            assert_eq!(*x, -*y);
        }
        assert_eq!(ab.reversed().direction, ba.direction);
        let same = concept_direction(&cap("red dog"), &cap("red dog"), &enc).unwrap();
        assert!(same.direction.values.iter().all(|&v| v == 0.0));
        assert!(matches!(
            concept_direction(&cap("green dog"), &cap("red dog"), &enc),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn zero_shift_is_identity() {
        let f = Embedding::new(vec![0.6, 0.8, 0.0]);
        let s = shift(vec![1.0, -2.0, 3.0], 0.0);
        assert_eq!(apply_counterfactual(&f, &s).unwrap(), f);
        let once = apply_counterfactual(&f, &shift(vec![0.0; 3], 1.0)).unwrap();
        let twice = apply_counterfactual(&once, &shift(vec![0.0; 3], 1.0)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn shifted_output_is_unit() {
        let f = Embedding::new(vec![0.6, 0.8, 0.0]);
        let out = apply_counterfactual(&f, &shift(vec![0.3, -1.0, 2.0], 1.5)).unwrap();
        assert!((out.norm() - 1.0).abs() < 1e-9);
        assert!(matches!(apply_counterfactual(&f, &shift(vec![0.0; 2], 1.0)), Err(Error::Shape(_))));
        let cancel = apply_counterfactual(&f, &shift(vec![-0.6, -0.8, 0.0], 1.0));
        assert!(matches!(cancel, Err(Error::ZeroVector)));
    }

    #[test]
    fn diff_roles_swap() {
        let a = cap("a red dog near a red ball");
        let b = cap("a blue dog near a red ball");
        let ab = word_diff(&a, &b);
        assert_eq!(ab, WordDiff { removed: vec!["red".into()], added: vec!["blue".into()] });
        let ba = word_diff(&b, &a);
        assert_eq!((ab.removed, ab.added), (ba.added, ba.removed));
        assert!(word_diff(&a, &a).is_empty());
    }

    #[test]
    fn summary_counts() {
        let s = shift(vec![0.0], 1.0);
        let mk = |o: &str, c: &str| {
            let (original, counterfactual) = (cap(o), cap(c));
            CounterfactualPair { scene_id: 0, diff: word_diff(&original, &counterfactual), original, counterfactual }
        };
        let pairs = [
            mk("a red dog near a ball", "a blue dog near a ball"),
            mk("a red dog", "a blue cat"),
            mk("a red dog", "a red dog"),
        ];
        let cats = ["dog".to_string(), "cat".into(), "ball".into()];
        let sum = summarize(&pairs, &s, &cats);
        assert_eq!((sum.pairs, sum.flipped, sum.categories_preserved, sum.unchanged), (3, 1, 2, 1));
        assert_eq!(sum.side_effects.get("cat"), Some(&1));
        assert!(!sum.side_effects.contains_key("blue"));
        assert!((sum.flip_rate() - 1.0 / 3.0).abs() < 1e-12);
    }
}
