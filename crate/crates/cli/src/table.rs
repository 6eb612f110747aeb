//! Human-readable tables for stdout. The same data is written as JSON lines by the
//! commands.

use std::fmt::Write as _;

use anchorcap::metrics::MetricReport;

use crate::commands::AblationTable;

/// Metric rows under a shared header, each labelled in a left column.
pub fn metric_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$} {}\n", "", MetricReport::header());
    for (label, r) in rows {
        let _ = writeln!(s, "{label:<width$} {r}");
    }
    s
}

/// Mean scores with one row per threshold and one column per dropout rate. The q = 1
/// column has a single value, shown on the first row.
pub fn ablation_grid(t: &AblationTable) -> String {
    let mut s = format!("{:>8}", "p \\ q");
    for q in &t.q {
        let _ = write!(s, " {q:>8}");
    }
    s.push('\n');
    for (row, &p) in t.p.iter().enumerate() {
        let _ = write!(s, "{p:>8}");
        for &q in &t.q {
            let cell = t.cells.iter().find(|c| c.q == q && (c.p == Some(p) || (c.p.is_none() && row == 0)));
            match cell {
                Some(c) => {
                    let _ = write!(s, " {:>8.1}", c.report.mean_score);
                }
                None => {
                    let _ = write!(s, " {:>8}", "");
                }
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commands::AblationCell;

    fn rep(mean: f64) -> MetricReport {
        MetricReport { bleu1: 0.0, bleu4: 0.0, rouge_l: 0.0, cider: 0.0, mean_score: mean, count: 1 }
    }

    #[test]
    fn anchor_free_column_is_collapsed() {
        let cell = |q, p, m| AblationCell { seed: 0, q, p, report: rep(m), best_epoch: 1 };
        let t = AblationTable {
            p: vec![0.5, 1.0],
            q: vec![0.5, 1.0],
            cells: vec![cell(0.5, Some(0.5), 10.0), cell(0.5, Some(1.0), 8.0), cell(1.0, None, 7.0)],
        };
        let grid = ablation_grid(&t);
        let lines: Vec<&str> = grid.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("10.0") && lines[1].contains("7.0"));
        assert!(lines[2].contains("8.0") && !lines[2].contains("7.0"));
        assert_eq!(t.mean_score(1.0, 1.0), Some(7.0));
    }

    #[test]
    fn metric_rows_align_with_header() {
        let table = metric_table(&[("image".into(), rep(1.0)), ("text".into(), rep(2.0))]);
        let widths: Vec<usize> = table.lines().map(str::len).collect();
        assert!(widths.iter().all(|&w| w == widths[0]), "{table}");
    }
}
