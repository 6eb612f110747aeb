use super::check_aligned;
use crate::microworld::CaptionText;
use crate::Result;

/// Recall weight of the LCS F-measure.
pub const ROUGE_BETA_SQ: f64 = 1.2;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Best LCS F-measure of one candidate against its references.
pub fn rouge_l_sample(candidate: &[String], references: &[CaptionText]) -> f64 {
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, &r.tokens);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.tokens.len() as f64;
            (1.0 + ROUGE_BETA_SQ) * p * rec / (rec + ROUGE_BETA_SQ * p)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l(candidates: &[CaptionText], references: &[Vec<CaptionText>]) -> Result<f64> {
    check_aligned(candidates, references)?;
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l_sample(&c.tokens, r)).sum();
    Ok(sum / candidates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cap(t: &str) -> CaptionText {
        CaptionText::from_text(0, t)
    }

    #[test]
    fn identical_and_disjoint() {
        assert_eq!(rouge_l(&[cap("a b c")], &[vec![cap("a b c")]]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[cap("a b c")], &[vec![cap("x y")]]).unwrap(), 0.0);
    }

    #[test]
    fn transposition_case_by_hand() {
        let c = cap("a b c d");
        assert_eq!(lcs_len(&c.tokens, &cap("a c b d").tokens), 3);
        // P = R = 3/4 so the F-measure is 3/4 whatever the weight
        let s = rouge_l(&[c], &[vec![cap("a c b d")]]).unwrap();
        assert!((s - 0.75).abs() < 1e-12);
    }

    #[test]
    fn one_only_for_exact_reference() {
        let refs = vec![cap("a b c"), cap("a b c d")];
        assert_eq!(rouge_l_sample(&cap("a b c d").tokens, &refs), 1.0);
        assert!(rouge_l_sample(&cap("a b").tokens, &refs) < 1.0);
        assert!(rouge_l_sample(&cap("a b c d e").tokens, &refs) < 1.0);
    }
}
