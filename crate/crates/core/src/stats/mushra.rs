use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{z_score, Observation, ResponseSet, StatsError};
use crate::domain::{TestKind, HUMAN_SYSTEM};

/// Rater exclusion based on hidden-reference scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PostScreening {
    pub reference_system: String,
    /// A reference trial fails when scored below this value.
    pub threshold: u8,
    /// Raters failing more than this fraction of reference trials are excluded.
    pub max_fraction: f64,
}

impl Default for PostScreening {
    fn default() -> Self {
        PostScreening {
            reference_system: HUMAN_SYSTEM.to_string(),
            threshold: 90,
            max_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MushraOptions {
    pub confidence: f64,
    pub post_screening: Option<PostScreening>,
}

impl Default for MushraOptions {
    fn default() -> Self {
        MushraOptions {
            confidence: 0.95,
            post_screening: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MushraSummary {
    pub mean: f64,
    pub n: u64,
    /// Sample standard deviation; undefined for a single score.
    pub sd: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MushraReport {
    pub systems: BTreeMap<String, MushraSummary>,
    pub excluded_raters: BTreeSet<String>,
}

/// Raters whose hidden-reference scores fail the screening rule.
pub fn post_screen(responses: &ResponseSet, rule: &PostScreening) -> BTreeSet<String> {
    let mut per_rater: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for o in responses.observations() {
        if o.system != rule.reference_system {
            continue;
        }
        let Some(score) = o.mushra_score else { continue };
        let entry = per_rater.entry(&o.rater_id).or_default();
        entry.0 += 1;
        if score < rule.threshold {
            entry.1 += 1;
        }
    }
    per_rater
        .into_iter()
        .filter(|(_, (total, failed))| *failed as f64 > rule.max_fraction * *total as f64)
        .map(|(r, _)| r.to_string())
        .collect()
}

pub fn compute_mushra(
    responses: &ResponseSet,
    options: &MushraOptions,
) -> Result<MushraReport, StatsError> {
    for o in responses.observations() {
        if o.test_kind != TestKind::Mushra || o.mushra_score.is_none() {
            return Err(StatsError::KindMismatch {
                expected: "MUSHRA".into(),
                found: o.test_kind,
            });
        }
    }
    let excluded = options
        .post_screening
        .as_ref()
        .map(|rule| post_screen(responses, rule))
        .unwrap_or_default();

    let mut grouped: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
    for o in responses.observations() {
        if !excluded.contains(&o.rater_id) {
            grouped.entry(&o.system).or_default().push(o);
        }
    }
    if grouped.is_empty() {
        return Err(StatsError::NoData("MUSHRA scores".into()));
    }

    let z = z_score(options.confidence)?;
    let systems = grouped
        .into_iter()
        .map(|(system, obs)| {
            let scores = obs.iter().map(|o| u64::from(o.mushra_score.unwrap_or(0)));
            (system.to_string(), summarize(scores, z))
        })
        .collect();
    Ok(MushraReport {
        systems,
        excluded_raters: excluded,
    })
}

/// Mean and normal-approximation CI from integer sums, so the result is
/// independent of score order.
fn summarize(scores: impl Iterator<Item = u64>, z: f64) -> MushraSummary {
    let (mut n, mut sum, mut sum_sq) = (0u64, 0u64, 0u64);
    for s in scores {
        n += 1;
        sum += s;
        sum_sq += s * s;
    }
    let mean = sum as f64 / n as f64;
    if n < 2 {
        return MushraSummary {
            mean,
            n,
            sd: None,
            ci: None,
        };
    }
    let numerator = (n as u128 * sum_sq as u128) - (sum as u128 * sum as u128);
    let variance = numerator as f64 / (n as f64 * (n - 1) as f64);
    let sd = variance.sqrt();
    let half = z * sd / (n as f64).sqrt();
    MushraSummary {
        mean,
        n,
        sd: Some(sd),
        ci: Some(((mean - half).clamp(0.0, 100.0), (mean + half).clamp(0.0, 100.0))),
    }
}
