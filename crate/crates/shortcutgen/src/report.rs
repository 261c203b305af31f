//! Table rendering: the final/peak layouts used across the evaluation, as
//! both aligned text and CSV.

use crate::error::{Error, Result};
use crate::victim::Summary;

#[derive(Debug, Clone)]
pub struct MethodRow {
    pub label: String,
    pub summary: Summary,
}

fn fmt_pm(mean: f64, std: f64, runs: usize) -> String {
    if runs > 1 {
        format!("{mean:.2} ± {std:.2}")
    } else {
        format!("{mean:.2}")
    }
}

fn pad(s: &str, width: usize) -> String {
    let mut out = s.to_string();
    while out.chars().count() < width {
        out.push(' ');
    }
    out
}

fn render_grid(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], widths: &[usize]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| pad(c, widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    out.push_str(&line(header, &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row, &widths));
        out.push('\n');
    }
    out
}

/// `Method | Final | Peak (# epoch)` layout, one row per method.
pub fn render_final_peak_table(title: &str, rows: &[MethodRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::IncompleteReport("no rows".into()));
    }
    let header = vec![
        "Method".to_string(),
        "Final".to_string(),
        "Peak (# epoch)".to_string(),
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                fmt_pm(r.summary.final_mean, r.summary.final_std, r.summary.num_runs),
                format!(
                    "{} ({})",
                    fmt_pm(r.summary.peak_mean, r.summary.peak_std, r.summary.num_runs),
                    r.summary.peak_epoch_mode
                ),
            ]
        })
        .collect();
    Ok(format!("{title}\n{}", render_grid(&header, &body)))
}

/// `Method | <col1> | <col2> ...` layout with `final/peak` cells (the
/// transfer and cross-dataset shapes).
pub fn render_final_slash_peak_table(
    title: &str,
    columns: &[String],
    rows: &[(String, Vec<Summary>)],
) -> Result<String> {
    if rows.is_empty() || columns.is_empty() {
        return Err(Error::IncompleteReport("no rows or columns".into()));
    }
    for (label, cells) in rows {
        if cells.len() != columns.len() {
            return Err(Error::IncompleteReport(format!(
                "row `{label}` has {} cells for {} columns",
                cells.len(),
                columns.len()
            )));
        }
    }
    let mut header = vec!["Method".to_string()];
    header.extend(columns.iter().cloned());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, cells)| {
            let mut row = vec![label.clone()];
            row.extend(
                cells
                    .iter()
                    .map(|s| format!("{:.2}/{:.2}", s.final_mean, s.peak_mean)),
            );
            row
        })
        .collect();
    Ok(format!("{title}\n{}", render_grid(&header, &body)))
}

/// CSV companion to the final/peak table.
pub fn final_peak_csv(rows: &[MethodRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::IncompleteReport("no rows".into()));
    }
    let mut out = String::from(
        "method,final_mean,final_std,peak_mean,peak_std,peak_epoch_mode,num_runs\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{},{}\n",
            r.label,
            r.summary.final_mean,
            r.summary.final_std,
            r.summary.peak_mean,
            r.summary.peak_std,
            r.summary.peak_epoch_mode,
            r.summary.num_runs
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(final_mean: f64, final_std: f64, peak: f64, epoch: usize, runs: usize) -> Summary {
        Summary {
            num_runs: runs,
            final_mean,
            final_std,
            peak_mean: peak,
            peak_std: final_std / 2.0,
            peak_epoch_mode: epoch,
        }
    }

    #[test]
    fn table_has_expected_rows_and_formatting() {
        let rows = vec![
            MethodRow {
                label: "Clean".into(),
                summary: summary(94.09, 0.0, 94.17, 58, 1),
            },
            MethodRow {
                label: "SG no Aug".into(),
                summary: summary(10.45, 2.49, 60.96, 4, 5),
            },
            MethodRow {
                label: "SG".into(),
                summary: summary(36.04, 4.23, 39.19, 36, 5),
            },
            MethodRow {
                label: "Combined".into(),
                summary: summary(6.42, 0.42, 41.02, 2, 5),
            },
        ];
        let table = render_final_peak_table("validation accuracy", &rows).unwrap();
        for needle in ["Clean", "SG no Aug", "SG", "Combined"] {
            assert!(table.contains(needle), "missing row {needle}:\n{table}");
        }
        // two decimals, ± for multi-run rows, epoch in parentheses
        assert!(table.contains("10.45 ± 2.49"), "{table}");
        assert!(table.contains("(4)"), "{table}");
        // single-run rows print plain means
        assert!(table.contains("94.09"), "{table}");
        assert!(!table.contains("94.09 ±"), "{table}");
    }

    #[test]
    fn empty_report_is_rejected() {
        assert!(matches!(
            render_final_peak_table("t", &[]),
            Err(Error::IncompleteReport(_))
        ));
        assert!(final_peak_csv(&[]).is_err());
    }

    #[test]
    fn slash_table_shape_checks() {
        let cols = vec!["VGG11".to_string(), "WRN".to_string()];
        let rows = vec![(
            "Combined".to_string(),
            vec![summary(9.91, 0.1, 30.83, 2, 3), summary(5.87, 0.2, 38.26, 2, 3)],
        )];
        let table = render_final_slash_peak_table("transfer", &cols, &rows).unwrap();
        assert!(table.contains("9.91/30.83"));
        assert!(table.contains("5.87/38.26"));
        // ragged rows rejected
        let bad = vec![("X".to_string(), vec![summary(1.0, 0.0, 1.0, 1, 1)])];
        assert!(render_final_slash_peak_table("t", &cols, &bad).is_err());
    }

    #[test]
    fn csv_row_per_method() {
        let rows = vec![MethodRow {
            label: "Clean".into(),
            summary: summary(94.09, 0.0, 94.17, 58, 1),
        }];
        let csv = final_peak_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("Clean,94.09"));
    }
}
