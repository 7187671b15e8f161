//! Aggregate statistics over admissible responses.
//!
//! Everything here is a pure function of a [`ResponseSet`]. Counts are kept
//! as integers and floating sums are taken over sorted operands, so the
//! output does not depend on the order responses arrive in.

mod ci;
mod hfr;
mod markers;
mod mushra;
mod timing;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::domain::{Judgment, Label, Origin, Response, Stimulus, TestKind};
use crate::storage::ResultRow;

pub use ci::{compute_ci, compute_ci_with, z_score, CiMethod, CiOptions};
pub use hfr::{compute_hfr, hfr_table, row_mean, HfrRow, HfrTable};
pub use markers::{compute_marker_rates, CohortMap, CohortRates, MarkerRateTable};
pub use mushra::{compute_mushra, post_screen, MushraOptions, MushraReport, MushraSummary, PostScreening};
pub use timing::{flag_rushed, timing_stats, TimingSummary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no admissible responses for {0}")]
    NoData(String),
    #[error("expected {expected} responses, found {found}")]
    KindMismatch { expected: String, found: TestKind },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("response references unknown stimulus `{0}`")]
    UnknownStimulus(String),
    #[error("marker `{0}` is not in the catalog")]
    UnknownMarker(String),
}

/// Identifies one response (one trial of one session).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResponseKey {
    pub study_id: String,
    pub session_id: String,
    pub trial_id: String,
}

impl fmt::Display for ResponseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.study_id, self.session_id, self.trial_id)
    }
}

/// One judged stimulus joined with its metadata. MUSHRA responses yield one
/// observation per scored stimulus.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub study_id: String,
    pub rater_id: String,
    pub session_id: String,
    pub trial_id: String,
    pub test_kind: TestKind,
    pub system: String,
    pub origin: Origin,
    pub tag: Option<String>,
    pub utterance_id: String,
    pub stimulus_id: String,
    pub label: Option<Label>,
    pub markers: BTreeSet<String>,
    pub mushra_score: Option<u8>,
    pub response_time_ms: u64,
    pub decision_time_ms: Option<u64>,
    /// Number of stimuli presented in the trial this observation came from.
    pub trial_size: usize,
}

impl Observation {
    pub fn key(&self) -> ResponseKey {
        ResponseKey {
            study_id: self.study_id.clone(),
            session_id: self.session_id.clone(),
            trial_id: self.trial_id.clone(),
        }
    }
}

/// Admissible responses. Construction drops anything without verified
/// playback.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResponseSet {
    observations: Vec<Observation>,
    dropped_unverified: usize,
}

impl ResponseSet {
    pub fn from_observations(observations: Vec<Observation>) -> Self {
        ResponseSet {
            observations,
            dropped_unverified: 0,
        }
    }

    /// Joins responses with their stimuli.
    pub fn join(responses: &[Response], stimuli: &[Stimulus]) -> Result<Self, StatsError> {
        let index: HashMap<&str, &Stimulus> =
            stimuli.iter().map(|s| (s.stimulus_id.as_str(), s)).collect();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| StatsError::UnknownStimulus(id.to_string()))
        };
        let mut observations = Vec::new();
        let mut dropped = 0;
        for r in responses {
            if !r.playback_verified {
                dropped += 1;
                continue;
            }
            let base = |stim: &Stimulus, trial_size: usize| Observation {
                study_id: r.study_id.clone(),
                rater_id: r.rater_id.clone(),
                session_id: r.session_id.clone(),
                trial_id: r.trial_id.clone(),
                test_kind: r.judgment.test_kind(),
                system: stim.system.clone(),
                origin: stim.origin,
                tag: stim.tag.clone(),
                utterance_id: stim.utterance_id.clone(),
                stimulus_id: stim.stimulus_id.clone(),
                label: None,
                markers: BTreeSet::new(),
                mushra_score: None,
                response_time_ms: r.response_time_ms,
                decision_time_ms: r.decision_time_ms,
                trial_size,
            };
            match &r.judgment {
                Judgment::Binary { stimulus_id, label } => {
                    let mut o = base(lookup(stimulus_id)?, 1);
                    o.label = Some(*label);
                    observations.push(o);
                }
                Judgment::Granular {
                    stimulus_id,
                    label,
                    markers,
                } => {
                    let mut o = base(lookup(stimulus_id)?, 1);
                    o.label = Some(*label);
                    o.markers = markers.clone();
                    observations.push(o);
                }
                Judgment::Mushra { scores } => {
                    for (stimulus_id, score) in scores {
                        let mut o = base(lookup(stimulus_id)?, scores.len());
                        o.mushra_score = Some(*score);
                        observations.push(o);
                    }
                }
            }
        }
        Ok(ResponseSet {
            observations,
            dropped_unverified: dropped,
        })
    }

    /// Builds a set from exported CSV rows. `tags` optionally maps
    /// stimulus ids to their benchmark tag.
    pub fn from_rows(rows: &[ResultRow], tags: Option<&HashMap<String, String>>) -> Self {
        let mut sizes: HashMap<(&str, &str, &str), usize> = HashMap::new();
        for row in rows {
            *sizes
                .entry((&row.study_id, &row.session_id, &row.trial_id))
                .or_default() += 1;
        }
        let mut observations = Vec::new();
        let mut dropped = 0;
        for row in rows {
            if !row.playback_verified {
                dropped += 1;
                continue;
            }
            observations.push(Observation {
                study_id: row.study_id.clone(),
                rater_id: row.rater_id.clone(),
                session_id: row.session_id.clone(),
                trial_id: row.trial_id.clone(),
                test_kind: row.test_kind,
                system: row.system.clone(),
                origin: row.origin,
                tag: tags.and_then(|t| t.get(&row.stimulus_id).cloned()),
                utterance_id: row.utterance_id.clone(),
                stimulus_id: row.stimulus_id.clone(),
                label: row.label,
                markers: row.marker_set(),
                mushra_score: row.mushra_score,
                response_time_ms: row.response_time_ms,
                decision_time_ms: row.decision_time_ms,
                trial_size: sizes[&(row.study_id.as_str(), row.session_id.as_str(), row.trial_id.as_str())],
            });
        }
        ResponseSet {
            observations,
            dropped_unverified: dropped,
        }
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn dropped_unverified(&self) -> usize {
        self.dropped_unverified
    }

    pub fn filtered(&self, keep: impl Fn(&Observation) -> bool) -> ResponseSet {
        ResponseSet {
            observations: self.observations.iter().filter(|o| keep(o)).cloned().collect(),
            dropped_unverified: self.dropped_unverified,
        }
    }

    /// Removes every observation belonging to one of `flagged`.
    pub fn excluding(&self, flagged: &BTreeSet<ResponseKey>) -> ResponseSet {
        self.filtered(|o| !flagged.contains(&o.key()))
    }

    pub fn systems(&self) -> BTreeSet<&str> {
        self.observations.iter().map(|o| o.system.as_str()).collect()
    }
}

/// Column used to group observations into rows, cells or cohorts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKey {
    StudyId,
    System,
    TestKind,
    Origin,
    UtteranceId,
    Tag,
    Rater,
}

impl GroupKey {
    pub fn value(self, o: &Observation) -> String {
        match self {
            GroupKey::StudyId => o.study_id.clone(),
            GroupKey::System => o.system.clone(),
            GroupKey::TestKind => o.test_kind.as_str().to_string(),
            GroupKey::Origin => o.origin.as_str().to_string(),
            GroupKey::UtteranceId => o.utterance_id.clone(),
            GroupKey::Tag => o.tag.clone().unwrap_or_else(|| "untagged".to_string()),
            GroupKey::Rater => o.rater_id.clone(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::StudyId => "study_id",
            GroupKey::System => "system",
            GroupKey::TestKind => "test_kind",
            GroupKey::Origin => "origin",
            GroupKey::UtteranceId => "utterance_id",
            GroupKey::Tag => "tag",
            GroupKey::Rater => "rater_id",
        }
    }
}

impl FromStr for GroupKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "study_id" | "study" => GroupKey::StudyId,
            "system" => GroupKey::System,
            "test_kind" | "kind" => GroupKey::TestKind,
            "origin" => GroupKey::Origin,
            "utterance_id" | "utterance" => GroupKey::UtteranceId,
            "tag" | "benchmark" => GroupKey::Tag,
            "rater_id" | "rater" => GroupKey::Rater,
            other => return Err(format!("unknown grouping key `{other}`")),
        })
    }
}

/// Observation predicate over the common grouping columns.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Filter {
    pub system: Option<String>,
    pub tag: Option<String>,
    pub study_id: Option<String>,
}

impl Filter {
    pub fn all() -> Self {
        Filter::default()
    }

    pub fn system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn study(mut self, study_id: impl Into<String>) -> Self {
        self.study_id = Some(study_id.into());
        self
    }

    pub fn matches(&self, o: &Observation) -> bool {
        self.system.as_deref().is_none_or(|s| s == o.system)
            && self.tag.as_deref().is_none_or(|t| o.tag.as_deref() == Some(t))
            && self.study_id.as_deref().is_none_or(|s| s == o.study_id)
    }
}

/// Sum of floats in a canonical order.
pub(crate) fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

pub(crate) fn group_by(
    set: &ResponseSet,
    key: GroupKey,
) -> BTreeMap<String, Vec<&Observation>> {
    let mut out: BTreeMap<String, Vec<&Observation>> = BTreeMap::new();
    for o in set.observations() {
        out.entry(key.value(o)).or_default().push(o);
    }
    out
}
