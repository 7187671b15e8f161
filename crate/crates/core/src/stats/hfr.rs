use std::collections::BTreeMap;

use serde::Serialize;

use super::{compute_ci_with, ordered_sum, CiOptions, Filter, GroupKey, Observation, ResponseSet, StatsError};
use crate::domain::{HfrResult, Label, TestKind};

/// Fooling rate over the observations matching `filter`.
pub fn compute_hfr(
    responses: &ResponseSet,
    filter: &Filter,
    ci: CiOptions,
) -> Result<HfrResult, StatsError> {
    let selected: Vec<&Observation> = responses
        .observations()
        .iter()
        .filter(|o| filter.matches(o))
        .collect();
    hfr_of(&selected, ci).map_err(|e| match e {
        StatsError::NoData(_) => StatsError::NoData(describe(filter)),
        other => other,
    })
}

fn describe(filter: &Filter) -> String {
    let mut parts = Vec::new();
    if let Some(s) = &filter.study_id {
        parts.push(format!("study={s}"));
    }
    if let Some(s) = &filter.system {
        parts.push(format!("system={s}"));
    }
    if let Some(t) = &filter.tag {
        parts.push(format!("tag={t}"));
    }
    if parts.is_empty() {
        "the selection".into()
    } else {
        parts.join(" ")
    }
}

pub(crate) fn hfr_of(selected: &[&Observation], ci: CiOptions) -> Result<HfrResult, StatsError> {
    if selected.is_empty() {
        return Err(StatsError::NoData("the selection".into()));
    }
    let mut humans: u64 = 0;
    for o in selected {
        match (o.test_kind, o.label) {
            (TestKind::Mushra, _) | (_, None) => {
                return Err(StatsError::KindMismatch {
                    expected: "HFR or HFR_GRANULAR".into(),
                    found: o.test_kind,
                })
            }
            (_, Some(Label::Human)) => humans += 1,
            (_, Some(Label::Tts)) => {}
        }
    }
    let n = selected.len() as u64;
    let estimate_pct = 100.0 * humans as f64 / n as f64;
    let (ci_low_pct, ci_high_pct) = compute_ci_with(estimate_pct, n, ci)?;
    Ok(HfrResult {
        estimate_pct,
        n,
        ci_low_pct,
        ci_high_pct,
    })
}

/// Unweighted mean of cell estimates; `None` for an empty row.
pub fn row_mean(estimates: &[f64]) -> Option<f64> {
    if estimates.is_empty() {
        return None;
    }
    let mut values = estimates.to_vec();
    Some(ordered_sum(&mut values) / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HfrRow {
    pub label: String,
    /// One entry per column; `None` marks an absent cell.
    pub cells: Vec<Option<HfrResult>>,
    pub mean_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HfrTable {
    pub row_key: &'static str,
    pub col_key: &'static str,
    pub columns: Vec<String>,
    /// Sorted by descending row mean, then label.
    pub rows: Vec<HfrRow>,
}

impl HfrTable {
    pub fn row(&self, label: &str) -> Option<&HfrRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn cell(&self, row: &str, col: &str) -> Option<&HfrResult> {
        let c = self.columns.iter().position(|x| x == col)?;
        self.row(row)?.cells[c].as_ref()
    }
}

pub fn hfr_table(
    responses: &ResponseSet,
    row_key: GroupKey,
    col_key: GroupKey,
    ci: CiOptions,
) -> Result<HfrTable, StatsError> {
    let mut cells: BTreeMap<(String, String), Vec<&Observation>> = BTreeMap::new();
    for o in responses.observations() {
        cells
            .entry((row_key.value(o), col_key.value(o)))
            .or_default()
            .push(o);
    }
    let mut columns: Vec<String> = cells.keys().map(|(_, c)| c.clone()).collect();
    columns.sort();
    columns.dedup();
    let mut labels: Vec<String> = cells.keys().map(|(r, _)| r.clone()).collect();
    labels.dedup();

    let mut rows = Vec::with_capacity(labels.len());
    for label in labels {
        let mut row_cells = Vec::with_capacity(columns.len());
        for col in &columns {
            let cell = match cells.get(&(label.clone(), col.clone())) {
                Some(obs) => Some(hfr_of(obs, ci)?),
                None => None,
            };
            row_cells.push(cell);
        }
        let estimates: Vec<f64> = row_cells.iter().flatten().map(|c| c.estimate_pct).collect();
        rows.push(HfrRow {
            label,
            mean_pct: row_mean(&estimates),
            cells: row_cells,
        });
    }
    rows.sort_by(|a, b| {
        let ma = a.mean_pct.unwrap_or(f64::NEG_INFINITY);
        let mb = b.mean_pct.unwrap_or(f64::NEG_INFINITY);
        mb.total_cmp(&ma).then_with(|| a.label.cmp(&b.label))
    });

    Ok(HfrTable {
        row_key: row_key.as_str(),
        col_key: col_key.as_str(),
        columns,
        rows,
    })
}
