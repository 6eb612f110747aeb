use std::collections::{BTreeMap, HashSet};

use super::{check_aligned, ngram_counts, NgramCounts};
use crate::microworld::CaptionText;
use crate::{Error, Result};

/// Width of the Gaussian length penalty.
pub const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

struct Vector {
    weights: BTreeMap<Vec<String>, f64>,
    norm: f64,
    len: usize,
}

fn tfidf(counts: &NgramCounts<'_>, df: &BTreeMap<Vec<String>, usize>, log_n: f64, len: usize) -> Vector {
    let mut weights = BTreeMap::new();
    for (gram, &tf) in counts {
        let d = df.get(*gram).copied().unwrap_or(0).max(1) as f64;
        weights.insert(gram.to_vec(), tf as f64 * (log_n - d.ln()));
    }
    let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
    Vector { weights, norm, len }
}

fn similarity(cand: &Vector, reference: &Vector) -> f64 {
    if cand.norm == 0.0 || reference.norm == 0.0 {
        return 0.0;
    }
    let mut dot = 0.0;
    for (gram, &w) in &cand.weights {
        if let Some(&r) = reference.weights.get(gram) {
            dot += w.min(r) * r;
        }
    }
    let delta = cand.len as f64 - reference.len as f64;
    dot / (cand.norm * reference.norm) * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp()
}

/// CIDEr-D score of every sample (scaled by 10). Document frequencies count reference
/// sets, so the corpus must hold at least two of them.
///
/// N-gram maps are ordered, so the floating-point sums are identical on every run.
pub fn cider_per_sample(candidates: &[CaptionText], references: &[Vec<CaptionText>]) -> Result<Vec<f64>> {
    check_aligned(candidates, references)?;
    let distinct: HashSet<Vec<&Vec<String>>> =
        references.iter().map(|refs| refs.iter().map(|r| &r.tokens).collect()).collect();
    if distinct.len() < 2 {
        return Err(Error::CorpusTooSmall("CIDEr needs at least two distinct reference sets".into()));
    }
    let log_n = (references.len() as f64).ln();
    let mut scores = vec![0.0; candidates.len()];
    for n in 1..=MAX_N {
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for refs in references {
            let grams: HashSet<&[String]> = refs.iter().flat_map(|r| r.tokens.windows(n)).collect();
            for g in grams {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        for ((cand, refs), score) in candidates.iter().zip(references).zip(scores.iter_mut()) {
            let cv = tfidf(&ngram_counts(&cand.tokens, n), &df, log_n, cand.tokens.len());
            let mean: f64 = refs
                .iter()
                .map(|r| similarity(&cv, &tfidf(&ngram_counts(&r.tokens, n), &df, log_n, r.tokens.len())))
                .sum::<f64>()
                / refs.len() as f64;
            *score += mean / MAX_N as f64 * 10.0;
        }
    }
    Ok(scores)
}

pub fn cider(candidates: &[CaptionText], references: &[Vec<CaptionText>]) -> Result<f64> {
    let s = cider_per_sample(candidates, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
