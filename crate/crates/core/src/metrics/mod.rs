//! Corpus-level caption metrics: BLEU, ROUGE-L and CIDEr-D over whitespace tokens.

mod bleu;
mod cider;
mod report;
mod rouge;

pub use bleu::{bleu, modified_precision};
pub use cider::{cider, cider_per_sample, CIDER_SIGMA};
pub use report::{evaluate_set, MetricReport};
pub use rouge::{lcs_len, rouge_l, rouge_l_sample, ROUGE_BETA_SQ};

use std::collections::BTreeMap;

use crate::microworld::CaptionText;
use crate::{Error, Result};

pub(crate) type NgramCounts<'a> = BTreeMap<&'a [String], usize>;

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> NgramCounts<'_> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

pub(crate) fn check_aligned(candidates: &[CaptionText], references: &[Vec<CaptionText>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidates to score".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::Empty(format!("sample {i} has no references")));
    }
    Ok(())
}
