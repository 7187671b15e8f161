use std::collections::BTreeMap;

use serde::Serialize;

use super::{Observation, ResponseSet, StatsError};
use crate::domain::{MarkerCatalog, TestKind};

/// Assignment of systems to cohorts, in display order. Systems without an
/// explicit assignment form a cohort named after themselves.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CohortMap {
    entries: Vec<(String, String)>,
}

impl CohortMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(mut self, system: impl Into<String>, cohort: impl Into<String>) -> Self {
        let system = system.into();
        self.entries.retain(|(s, _)| *s != system);
        self.entries.push((system, cohort.into()));
        self
    }

    pub fn cohort_of<'a>(&'a self, system: &'a str) -> &'a str {
        self.entries
            .iter()
            .find(|(s, _)| s == system)
            .map_or(system, |(_, c)| c.as_str())
    }

    /// Declared cohorts in first-assignment order.
    pub fn declared(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (_, c) in &self.entries {
            if !out.contains(&c.as_str()) {
                out.push(c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortRates {
    pub cohort: String,
    pub n: u64,
    /// marker_id to percentage of cohort responses selecting it.
    pub rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkerRateTable {
    pub catalog: MarkerCatalog,
    pub cohorts: Vec<CohortRates>,
}

impl MarkerRateTable {
    pub fn rate(&self, cohort: &str, marker_id: &str) -> Option<f64> {
        self.cohorts
            .iter()
            .find(|c| c.cohort == cohort)?
            .rates
            .get(marker_id)
            .copied()
    }
}

/// Per-cohort marker rates. The denominator is every admissible response
/// of the cohort, including those labeled human.
pub fn compute_marker_rates(
    responses: &ResponseSet,
    catalog: &MarkerCatalog,
    cohorts: &CohortMap,
) -> Result<MarkerRateTable, StatsError> {
    let mut grouped: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
    for o in responses.observations() {
        if o.test_kind != TestKind::HfrGranular {
            return Err(StatsError::KindMismatch {
                expected: "HFR_GRANULAR".into(),
                found: o.test_kind,
            });
        }
        if let Some(unknown) = o.markers.iter().find(|m| !catalog.contains(m)) {
            return Err(StatsError::UnknownMarker(unknown.clone()));
        }
        grouped.entry(cohorts.cohort_of(&o.system)).or_default().push(o);
    }

    let mut order: Vec<&str> = cohorts.declared();
    for c in grouped.keys() {
        if !order.contains(c) {
            order.push(c);
        }
    }
    if order.is_empty() {
        return Err(StatsError::NoData("marker rates".into()));
    }

    let mut out = Vec::with_capacity(order.len());
    for cohort in order {
        let obs = grouped
            .get(cohort)
            .ok_or_else(|| StatsError::NoData(format!("cohort {cohort}")))?;
        let n = obs.len() as u64;
        let rates = catalog
            .ids()
            .map(|id| {
                let hits = obs.iter().filter(|o| o.markers.contains(id)).count();
                (id.to_string(), 100.0 * hits as f64 / n as f64)
            })
            .collect();
        out.push(CohortRates {
            cohort: cohort.to_string(),
            n,
            rates,
        });
    }
    Ok(MarkerRateTable {
        catalog: catalog.clone(),
        cohorts: out,
    })
}
