//! Comparison tables: one row per report, one column per metric, with the
//! best value of each column flagged by `*`.

use std::fmt::Write as _;

use crate::error::{EvalError, Result};
use crate::report::{MetricReport, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Text,
}

fn format_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.4}")
    }
}

fn polarity(report: &MetricReport, column: &str) -> Polarity {
    report
        .polarity
        .get(column)
        .copied()
        .or_else(|| Polarity::for_name(column))
        .unwrap_or(Polarity::HigherIsBetter)
}

pub fn emit_table(reports: &[MetricReport], format: TableFormat) -> Result<String> {
    let first = reports.first().ok_or(EvalError::EmptyReports)?;
    let columns = &first.columns;
    for r in &reports[1..] {
        if &r.columns != columns {
            return Err(EvalError::InconsistentColumns(columns.clone(), r.columns.clone()));
        }
    }

    let best: Vec<Option<f64>> = columns
        .iter()
        .map(|col| {
            let values = reports
                .iter()
                .filter(|r| !r.failed.contains_key(col))
                .filter_map(|r| r.value(col))
                .filter(|v| !v.is_nan());
            match polarity(first, col) {
                Polarity::HigherIsBetter => values.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
                Polarity::LowerIsBetter => values.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v)))),
            }
        })
        .collect();

    let mut header = vec!["variant".to_string()];
    header.extend(columns.iter().cloned());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.label.clone()];
        for (col, best) in columns.iter().zip(&best) {
            let cell = if r.failed.contains_key(col) {
                "failed".to_string()
            } else {
                match r.value(col) {
                    Some(v) => {
                        let mut s = format_value(v);
                        if Some(v) == *best {
                            s.push('*');
                        }
                        s
                    }
                    None => "-".to_string(),
                }
            };
            row.push(cell);
        }
        rows.push(row);
    }

    let mut notes = Vec::new();
    for r in reports {
        for (col, n) in &r.infinite_counts {
            notes.push(format!(
                "{}: {n} image(s) with infinite {col} excluded from the mean",
                r.label
            ));
        }
        for (col, err) in &r.failed {
            notes.push(format!("{}: plugin {col} failed: {err}", r.label));
        }
    }
    notes.push("* best value per column".to_string());

    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            for row in &rows {
                out.push_str(&row.join(","));
                out.push('\n');
            }
            for n in notes {
                let _ = writeln!(out, "# {n}");
            }
        }
        TableFormat::Text => {
            let widths: Vec<usize> = (0..rows[0].len())
                .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
                .collect();
            for (i, row) in rows.iter().enumerate() {
                let line: Vec<String> = row
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(c, (cell, w))| {
                        if c == 0 {
                            format!("{cell:<w$}")
                        } else {
                            format!("{cell:>w$}")
                        }
                    })
                    .collect();
                out.push_str(line.join("  ").trim_end());
                out.push('\n');
                if i == 0 {
                    let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                    out.push_str(&"-".repeat(total));
                    out.push('\n');
                }
            }
            for n in notes {
                let _ = writeln!(out, "{n}");
            }
        }
    }
    Ok(out)
}
