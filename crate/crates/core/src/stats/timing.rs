use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{group_by, ordered_sum, GroupKey, ResponseKey, ResponseSet, StatsError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingSummary {
    /// Mean seconds spent per audio sample.
    pub mean_s: f64,
    pub n: u64,
}

/// Mean rating time per audio sample. A trial presenting k stimuli
/// contributes its time divided by k for each of them.
pub fn timing_stats(
    responses: &ResponseSet,
    group: GroupKey,
) -> Result<BTreeMap<String, TimingSummary>, StatsError> {
    if responses.is_empty() {
        return Err(StatsError::NoData("timing statistics".into()));
    }
    Ok(group_by(responses, group)
        .into_iter()
        .map(|(label, obs)| {
            let mut per_sample: Vec<f64> = obs
                .iter()
                .map(|o| o.response_time_ms as f64 / 1000.0 / o.trial_size.max(1) as f64)
                .collect();
            let n = per_sample.len() as u64;
            let mean_s = ordered_sum(&mut per_sample) / n as f64;
            (label, TimingSummary { mean_s, n })
        })
        .collect())
}

/// Responses whose decision time is strictly below `min_decision_ms`.
/// Responses without a recorded decision time are never flagged.
pub fn flag_rushed(responses: &ResponseSet, min_decision_ms: u64) -> BTreeSet<ResponseKey> {
    responses
        .observations()
        .iter()
        .filter(|o| o.decision_time_ms.is_some_and(|d| d < min_decision_ms))
        .map(|o| o.key())
        .collect()
}
