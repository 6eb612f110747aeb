use std::fmt;

use serde::{Deserialize, Serialize};

use super::{bleu, cider, rouge_l};
use crate::microworld::CaptionText;
use crate::Result;

/// Scores of one evaluation split. Fields hold raw values (BLEU and ROUGE-L in [0, 1],
/// CIDEr on its usual 0-10 scale); tables display every metric multiplied by 100 and
/// `mean_score` averages those displayed numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub mean_score: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn from_scores(bleu1: f64, bleu4: f64, rouge_l: f64, cider: f64, count: usize) -> Self {
        let mean_score = (bleu1 + bleu4 + rouge_l + cider) * 100.0 / 4.0;
        Self { bleu1, bleu4, rouge_l, cider, mean_score, count }
    }

    /// `(column, displayed value)` in table order.
    pub fn displayed(&self) -> [(&'static str, f64); 4] {
        [
            ("B@1", self.bleu1 * 100.0),
            ("B@4", self.bleu4 * 100.0),
            ("R-L", self.rouge_l * 100.0),
            ("CIDEr", self.cider * 100.0),
        ]
    }

    pub fn header() -> String {
        format!("{:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "B@1", "B@4", "M", "R-L", "CIDEr", "S", "mean")
    }
}

impl fmt::Display for MetricReport {
    /// One row aligned with [`MetricReport::header`]; METEOR and SPICE are not computed
    /// and print as `-`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.displayed();
        write!(
            f,
            "{:>7.1} {:>7.1} {:>7} {:>7.1} {:>7.1} {:>7} {:>7.1}",
            d[0].1, d[1].1, "-", d[2].1, d[3].1, "-", self.mean_score
        )
    }
}

pub fn evaluate_set(candidates: &[CaptionText], references: &[Vec<CaptionText>]) -> Result<MetricReport> {
    Ok(MetricReport::from_scores(
        bleu(candidates, references, 1)?,
        bleu(candidates, references, 4)?,
        rouge_l(candidates, references)?,
        cider(candidates, references)?,
        candidates.len(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cap(t: &str) -> CaptionText {
        CaptionText::from_text(0, t)
    }

    #[test]
    fn perfect_candidates() {
        let c = [cap("a red dog next to a blue ball"), cap("there is a green tree")];
        let r: Vec<_> = c.iter().map(|c| vec![c.clone()]).collect();
        let rep = evaluate_set(&c, &r).unwrap();
        assert_eq!((rep.bleu1, rep.bleu4, rep.rouge_l), (1.0, 1.0, 1.0));
        let mean = rep.displayed().iter().map(|(_, v)| v).sum::<f64>() / 4.0;
        assert!((rep.mean_score - mean).abs() < 1e-12);
        assert_eq!(rep.count, 2);
    }

    #[test]
    fn row_has_placeholders() {
        let row = MetricReport::from_scores(0.5, 0.25, 0.5, 1.0, 3).to_string();
        assert_eq!(row.split_whitespace().filter(|s| *s == "-").count(), 2);
        assert_eq!(row.split_whitespace().count(), MetricReport::header().split_whitespace().count());
    }
}
