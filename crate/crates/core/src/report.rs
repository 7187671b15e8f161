//! Rendering of aggregate tables as aligned text, CSV and JSON.
//!
//! Numbers are computed at full precision by [`crate::stats`] and rounded
//! here only, half-up to two decimals.

use std::fmt::Write as _;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::domain::MarkerCatalog;
use crate::stats::{
    compute_marker_rates, compute_mushra, hfr_table, timing_stats, CiOptions, CohortMap, GroupKey,
    MushraOptions, ResponseSet, StatsError,
};

/// Placeholder for a cell with no admissible responses.
pub const ABSENT: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    HfrTable,
    MarkerTable,
    MushraTable,
    TimingTable,
}

impl ReportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::HfrTable => "hfr-table",
            ReportKind::MarkerTable => "marker-table",
            ReportKind::MushraTable => "mushra-table",
            ReportKind::TimingTable => "timing-table",
        }
    }
}

impl FromStr for ReportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "hfr-table" => ReportKind::HfrTable,
            "marker-table" => ReportKind::MarkerTable,
            "mushra-table" => ReportKind::MushraTable,
            "timing-table" => ReportKind::TimingTable,
            other => return Err(format!("unknown report `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Text,
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "text" => Format::Text,
            "json" => Format::Json,
            "csv" => Format::Csv,
            other => return Err(format!("unknown format `{other}`")),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub kind: ReportKind,
    pub rows: GroupKey,
    pub cols: GroupKey,
    pub ci: CiOptions,
    pub catalog: MarkerCatalog,
    pub cohorts: CohortMap,
    pub mushra: MushraOptions,
}

impl ReportOptions {
    pub fn new(kind: ReportKind) -> Self {
        ReportOptions {
            kind,
            rows: match kind {
                ReportKind::TimingTable => GroupKey::TestKind,
                _ => GroupKey::System,
            },
            cols: GroupKey::StudyId,
            ci: CiOptions::default(),
            catalog: MarkerCatalog::default(),
            cohorts: CohortMap::new(),
            mushra: MushraOptions::default(),
        }
    }
}

/// Rounds half-up (away from zero on a tie) at the given number of decimals,
/// working on the shortest decimal representation of `value`.
pub fn round_half_up(value: f64, places: usize) -> String {
    if !value.is_finite() {
        return value.to_string();
    }
    let negative = value < 0.0;
    let repr = format!("{}", value.abs());
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();
    let int_len = digits.len();
    let frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    digits.extend((0..places).map(|i| frac.get(i).copied().unwrap_or(0)));
    if frac.get(places).is_some_and(|d| *d >= 5) {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - places;
    debug_assert!(split >= int_len);
    let mut out = String::new();
    if negative && digits.iter().any(|d| *d != 0) {
        out.push('-');
    }
    out.extend(digits[..split].iter().map(|d| char::from(b'0' + d)));
    if places > 0 {
        out.push('.');
        out.extend(digits[split..].iter().map(|d| char::from(b'0' + d)));
    }
    out
}

fn fmt2(value: f64) -> String {
    round_half_up(value, 2)
}

fn num2(value: f64) -> Value {
    fmt2(value)
        .parse::<f64>()
        .ok()
        .and_then(|v| serde_json::Number::from_f64(v).map(Value::Number))
        .unwrap_or(Value::Null)
}

/// A rendered table before formatting.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            let mut s = String::new();
            for (i, cell) in cells.iter().enumerate() {
                if i == 0 {
                    let _ = write!(s, "{:<w$}", cell, w = widths[i]);
                } else {
                    let _ = write!(s, "  {:>w$}", cell, w = widths[i]);
                }
            }
            s.trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.headers));
        out.push('\n');
        let total: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        for note in &self.notes {
            out.push_str(note);
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory csv");
        for row in &self.rows {
            w.write_record(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// A report in both tabular and structured form.
#[derive(Debug, Clone)]
pub struct Report {
    pub table: Table,
    pub json: Value,
}

impl Report {
    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Text => self.table.to_text(),
            Format::Csv => self.table.to_csv(),
            Format::Json => {
                let mut s = serde_json::to_string_pretty(&self.json).expect("report serializes");
                s.push('\n');
                s
            }
        }
    }
}

pub fn build_report(set: &ResponseSet, opts: &ReportOptions) -> Result<Report, StatsError> {
    match opts.kind {
        ReportKind::HfrTable => hfr_report(set, opts),
        ReportKind::MarkerTable => marker_report(set, opts),
        ReportKind::MushraTable => mushra_report(set, opts),
        ReportKind::TimingTable => timing_report(set, opts),
    }
}

fn hfr_report(set: &ResponseSet, opts: &ReportOptions) -> Result<Report, StatsError> {
    if set.is_empty() {
        return Err(StatsError::NoData("the HFR table".into()));
    }
    let table = hfr_table(set, opts.rows, opts.cols, opts.ci)?;
    let mut headers = vec![table.row_key.to_string()];
    for c in &table.columns {
        headers.push(format!("{c} HFR"));
        headers.push(format!("{c} CI"));
        headers.push(format!("{c} n"));
    }
    headers.push("mean".into());

    let mut rows = Vec::new();
    let mut json_rows = Vec::new();
    for r in &table.rows {
        let mut cells = vec![r.label.clone()];
        let mut json_cells = Map::new();
        for (col, cell) in table.columns.iter().zip(&r.cells) {
            match cell {
                Some(c) => {
                    cells.push(fmt2(c.estimate_pct));
                    cells.push(format!("[{}, {}]", fmt2(c.ci_low_pct), fmt2(c.ci_high_pct)));
                    cells.push(c.n.to_string());
                    json_cells.insert(
                        col.clone(),
                        json!({
                            "hfr": num2(c.estimate_pct),
                            "ci_low": num2(c.ci_low_pct),
                            "ci_high": num2(c.ci_high_pct),
                            "n": c.n,
                        }),
                    );
                }
                None => {
                    cells.extend([ABSENT.to_string(), ABSENT.to_string(), ABSENT.to_string()]);
                    json_cells.insert(col.clone(), Value::Null);
                }
            }
        }
        cells.push(r.mean_pct.map_or_else(|| ABSENT.to_string(), fmt2));
        rows.push(cells);
        json_rows.push(json!({
            "label": r.label,
            "cells": json_cells,
            "mean": r.mean_pct.map_or(Value::Null, num2),
        }));
    }
    let confidence = opts.ci.confidence * 100.0;
    Ok(Report {
        table: Table {
            title: format!("Human fooling rate (%) by {} and {}", table.row_key, table.col_key),
            headers,
            rows,
            notes: vec![format!(
                "CI: {} {}%; mean is the unweighted mean of the row's cells",
                opts.ci.method.as_str(),
                round_half_up(confidence, 0)
            )],
        },
        json: json!({
            "report": "hfr-table",
            "row_key": table.row_key,
            "col_key": table.col_key,
            "ci_method": opts.ci.method.as_str(),
            "confidence": opts.ci.confidence,
            "columns": table.columns,
            "rows": json_rows,
        }),
    })
}

fn marker_report(set: &ResponseSet, opts: &ReportOptions) -> Result<Report, StatsError> {
    let table = compute_marker_rates(set, &opts.catalog, &opts.cohorts)?;
    let mut headers = vec!["marker".to_string()];
    headers.extend(table.cohorts.iter().map(|c| c.cohort.clone()));
    let mut rows = Vec::new();
    for m in &table.catalog.markers {
        let mut cells = vec![m.display_text.clone()];
        cells.extend(table.cohorts.iter().map(|c| fmt2(c.rates[&m.marker_id])));
        rows.push(cells);
    }
    let mut n_row = vec!["n".to_string()];
    n_row.extend(table.cohorts.iter().map(|c| c.n.to_string()));
    rows.push(n_row);

    let cohorts: Vec<Value> = table
        .cohorts
        .iter()
        .map(|c| {
            let rates: Map<String, Value> = c.rates.iter().map(|(k, v)| (k.clone(), num2(*v))).collect();
            json!({ "cohort": c.cohort, "n": c.n, "rates": rates })
        })
        .collect();
    Ok(Report {
        table: Table {
            title: "Marker selection rate (% of cohort responses)".into(),
            headers,
            rows,
            notes: vec![],
        },
        json: json!({
            "report": "marker-table",
            "markers": table.catalog.markers.iter().map(|m| json!({"marker_id": m.marker_id, "display_text": m.display_text})).collect::<Vec<_>>(),
            "cohorts": cohorts,
        }),
    })
}

fn mushra_report(set: &ResponseSet, opts: &ReportOptions) -> Result<Report, StatsError> {
    let report = compute_mushra(set, &opts.mushra)?;
    let mut systems: Vec<_> = report.systems.iter().collect();
    systems.sort_by(|a, b| b.1.mean.total_cmp(&a.1.mean).then_with(|| a.0.cmp(b.0)));
    let ci = |c: Option<(f64, f64)>| c.map_or_else(|| ABSENT.to_string(), |(lo, hi)| format!("[{}, {}]", fmt2(lo), fmt2(hi)));
    let rows = systems
        .iter()
        .map(|(name, s)| vec![name.to_string(), fmt2(s.mean), ci(s.ci), s.n.to_string()])
        .collect();
    let json_rows: Vec<Value> = systems
        .iter()
        .map(|(name, s)| {
            json!({
                "system": name,
                "mean": num2(s.mean),
                "ci_low": s.ci.map_or(Value::Null, |c| num2(c.0)),
                "ci_high": s.ci.map_or(Value::Null, |c| num2(c.1)),
                "sd": s.sd.map_or(Value::Null, num2),
                "n": s.n,
            })
        })
        .collect();
    let mut notes = Vec::new();
    if !report.excluded_raters.is_empty() {
        notes.push(format!(
            "post-screening excluded {} rater(s): {}",
            report.excluded_raters.len(),
            report.excluded_raters.iter().cloned().collect::<Vec<_>>().join(", ")
        ));
    }
    Ok(Report {
        table: Table {
            title: "MUSHRA mean score".into(),
            headers: vec!["system".into(), "mean".into(), "CI".into(), "n".into()],
            rows,
            notes,
        },
        json: json!({
            "report": "mushra-table",
            "rows": json_rows,
            "excluded_raters": report.excluded_raters,
        }),
    })
}

fn timing_report(set: &ResponseSet, opts: &ReportOptions) -> Result<Report, StatsError> {
    let stats = timing_stats(set, opts.rows)?;
    let mut groups: Vec<_> = stats.iter().collect();
    groups.sort_by(|a, b| b.1.mean_s.total_cmp(&a.1.mean_s).then_with(|| a.0.cmp(b.0)));
    let rows = groups
        .iter()
        .map(|(g, t)| vec![g.to_string(), fmt2(t.mean_s), t.n.to_string()])
        .collect();
    let json_rows: Vec<Value> = groups
        .iter()
        .map(|(g, t)| json!({ "group": g, "seconds_per_sample": num2(t.mean_s), "n": t.n }))
        .collect();
    Ok(Report {
        table: Table {
            title: "Average time per audio sample (s)".into(),
            headers: vec![opts.rows.as_str().into(), "seconds".into(), "n".into()],
            rows,
            notes: vec![],
        },
        json: json!({
            "report": "timing-table",
            "group_key": opts.rows.as_str(),
            "rows": json_rows,
        }),
    })
}
