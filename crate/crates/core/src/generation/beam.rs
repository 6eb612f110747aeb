use std::cmp::Ordering;

use crate::vocab::{CLS, PAD, SEP, UNK};
use crate::Result;

/// Anything that can score next tokens incrementally.
pub trait StepModel {
    type State: Clone;

    /// Log-probabilities over the vocabulary after the conditioning input.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    /// Appends `token` and returns the next log-probabilities.
    fn advance(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Generated ids, including the terminal `[cls]` when finished by it.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Maximum number of generated tokens; a hypothesis reaching it is finished.
    pub max_len: usize,
    /// Divide scores by length when ranking finished hypotheses.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_width: 5, max_len: 32, length_normalize: false }
    }
}

/// Ids never proposed during search.
pub fn is_banned(token: usize) -> bool {
    matches!(token, PAD | UNK | SEP)
}

fn score(h: &BeamHypothesis, cfg: &BeamConfig) -> f64 {
    if cfg.length_normalize && !h.tokens.is_empty() {
        h.log_prob / h.tokens.len() as f64
    } else {
        h.log_prob
    }
}

/// Higher score first, then lexicographically smaller ids.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis, cfg: &BeamConfig) -> Ordering {
    score(b, cfg).total_cmp(&score(a, cfg)).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Log-softmax of raw logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// One beam-search pass at a single width.
fn search_once<M: StepModel>(model: &M, cfg: &BeamConfig, width: usize) -> Result<BeamHypothesis> {
    let (state, lp) = model.start()?;
    let mut live: Vec<(BeamHypothesis, M::State, Vec<f64>)> =
        vec![(BeamHypothesis { tokens: vec![], log_prob: 0.0, finished: false }, state, lp)];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates: Vec<(BeamHypothesis, usize)> = Vec::new();
        for (i, (h, _, lp)) in live.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                if is_banned(tok) || l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let finished = tok == CLS || tokens.len() >= cfg.max_len;
                candidates.push((BeamHypothesis { tokens, log_prob: h.log_prob + l, finished }, i));
            }
        }
        candidates.sort_by(|a, b| rank(&a.0, &b.0, cfg));
        candidates.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (h, parent) in candidates {
            if h.finished {
                if !finished.iter().any(|f| f.tokens == h.tokens) {
                    finished.push(h);
                }
            } else {
                let mut st = live[parent].1.clone();
                let lp = model.advance(&mut st, *h.tokens.last().expect("nonempty"))?;
                next.push((h, st, lp));
            }
        }
        live = next;
        // log-probabilities only fall as tokens are appended, so once the best finished
        // hypothesis beats every live one nothing can overtake it
        if !cfg.length_normalize {
            if let Some(best) = finished.iter().map(|f| f.log_prob).reduce(f64::max) {
                if live.iter().all(|(h, _, _)| h.log_prob < best) {
                    break;
                }
            }
        }
    }
    finished.sort_by(|a, b| rank(a, b, cfg));
    Ok(finished.into_iter().next().unwrap_or(BeamHypothesis { tokens: vec![], log_prob: f64::NEG_INFINITY, finished: true }))
}

/// Beam search returning the best finished hypothesis (ties: smaller id sequence).
///
/// A single pass at width `k` can end worse than a pass at a smaller width, because a wider
/// beam may prune a prefix that a narrower one keeps. To make the result monotone in the
/// width, the passes at every width `1..=k` are run and the best of them is returned. Width
/// 1 is plain greedy decoding; a width covering every sequence is exhaustive search.
pub fn beam_search<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<BeamHypothesis> {
    let mut best: Option<BeamHypothesis> = None;
    for width in 1..=cfg.beam_width.max(1) {
        let h = search_once(model, cfg, width)?;
        if best.as_ref().is_none_or(|b| rank(&h, b, cfg) == Ordering::Less) {
            best = Some(h);
        }
    }
    Ok(best.expect("at least one pass"))
}

/// Plain argmax decoding.
pub fn greedy<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<BeamHypothesis> {
    let (mut state, mut lp) = model.start()?;
    let mut h = BeamHypothesis { tokens: vec![], log_prob: 0.0, finished: false };
    loop {
        let (tok, l) = lp
            .iter()
            .enumerate()
            .filter(|(t, l)| !is_banned(*t) && **l != f64::NEG_INFINITY)
            .fold(None, |best: Option<(usize, f64)>, (t, &l)| match best {
                Some((_, bl)) if bl >= l => best,
                _ => Some((t, l)),
            })
            .expect("some token is allowed");
        h.tokens.push(tok);
        h.log_prob += l;
        if tok == CLS || h.tokens.len() >= cfg.max_len {
            h.finished = true;
            return Ok(h);
        }
        lp = model.advance(&mut state, tok)?;
    }
}
