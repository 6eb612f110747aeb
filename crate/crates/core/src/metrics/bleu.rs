use super::{check_aligned, ngram_counts};
use crate::microworld::CaptionText;
use crate::Result;

/// Corpus-level clipped n-gram matches and candidate n-gram total for order `n`.
pub fn modified_precision(candidates: &[CaptionText], references: &[Vec<CaptionText>], n: usize) -> Result<(usize, usize)> {
    check_aligned(candidates, references)?;
    let mut matched = 0;
    let mut total = 0;
    for (cand, refs) in candidates.iter().zip(references) {
        let counts = ngram_counts(&cand.tokens, n);
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(&r.tokens, n)).collect();
        for (gram, c) in counts {
            let max_ref = ref_counts.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
            matched += c.min(max_ref);
            total += c;
        }
    }
    Ok((matched, total))
}

fn closest_ref_len(cand_len: usize, refs: &[CaptionText]) -> usize {
    refs.iter()
        .map(|r| r.tokens.len())
        .min_by_key(|&l| (l.abs_diff(cand_len), l))
        .unwrap_or(0)
}

/// Corpus BLEU with uniform weights over orders `1..=n` and the closest-reference
/// brevity penalty. Any order with zero matches yields 0.
pub fn bleu(candidates: &[CaptionText], references: &[Vec<CaptionText>], n: usize) -> Result<f64> {
    check_aligned(candidates, references)?;
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (m, t) = modified_precision(candidates, references, order)?;
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let c: usize = candidates.iter().map(|c| c.tokens.len()).sum();
    let r: usize = candidates.iter().zip(references).map(|(c, refs)| closest_ref_len(c.tokens.len(), refs)).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cap(t: &str) -> CaptionText {
        CaptionText::from_text(0, t)
    }

    #[test]
    fn identical_scores_one() {
        let c = [cap("a red dog next to a blue ball")];
        let r = [vec![cap("a red dog next to a blue ball")]];
        for n in 1..=4 {
            assert_eq!(bleu(&c, &r, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn no_overlap_scores_zero() {
        assert_eq!(bleu(&[cap("x y z")], &[vec![cap("a b c")]], 1).unwrap(), 0.0);
    }

    #[test]
    fn clipping_counts_by_hand() {
        let (m, t) = modified_precision(&[cap("the the the")], &[vec![cap("the cat")]], 1).unwrap();
        assert_eq!((m, t), (1, 3));
        // 1/3 precision, c=3 >= r=2 so no penalty
        assert!((bleu(&[cap("the the the")], &[vec![cap("the cat")]], 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        let c = [cap("a b")];
        let r = [vec![cap("a b c d"), cap("a b c d e f g h")]];
        let expected = (1.0f64 - 4.0 / 2.0).exp();
        assert!((bleu(&c, &r, 1).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn lengthening_perfect_candidate_never_lowers() {
        let r = [vec![cap("a b c d e f")]];
        let mut prev = 0.0;
        for k in 1..=6 {
            let words: Vec<&str> = ["a", "b", "c", "d", "e", "f"][..k].to_vec();
            let s = bleu(&[cap(&words.join(" "))], &r, 1).unwrap();
            assert!(s >= prev);
            prev = s;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        assert!(bleu(&[], &[], 1).is_err());
        assert!(bleu(&[cap("a")], &[], 1).is_err());
    }
}
