//! Domain types shared by every module, plus study manifest parsing and
//! validation.

mod manifest;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use manifest::{Manifest, ManifestError};
pub use validate::{validate_manifest, Severity, ValidationReport, Violation, ViolationCode};

/// System label reserved for genuine human reference recordings.
pub const HUMAN_SYSTEM: &str = "human";

/// Default number of distinct raters every stimulus must receive.
pub const DEFAULT_MIN_RATERS: u32 = 30;

/// Default decision-time threshold below which a response is flagged as rushed.
pub const DEFAULT_MIN_DECISION_MS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestKind {
    #[serde(rename = "HFR")]
    Hfr,
    #[serde(rename = "HFR_GRANULAR")]
    HfrGranular,
    #[serde(rename = "MUSHRA")]
    Mushra,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::Hfr => "HFR",
            TestKind::HfrGranular => "HFR_GRANULAR",
            TestKind::Mushra => "MUSHRA",
        }
    }

    /// True for the binary human/TTS kinds.
    pub fn is_binary(self) -> bool {
        matches!(self, TestKind::Hfr | TestKind::HfrGranular)
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "HFR" => Ok(TestKind::Hfr),
            "HFR_GRANULAR" => Ok(TestKind::HfrGranular),
            "MUSHRA" => Ok(TestKind::Mushra),
            other => Err(format!("unknown test kind `{other}`")),
        }
    }
}

/// Ground-truth provenance of a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Human,
    Machine,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Human => "human",
            Origin::Machine => "machine",
        }
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "human" => Ok(Origin::Human),
            "machine" => Ok(Origin::Machine),
            other => Err(format!("unknown origin `{other}`")),
        }
    }
}

/// A rater's binary judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Human,
    Tts,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Human => "human",
            Label::Tts => "tts",
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "human" => Ok(Label::Human),
            "tts" => Ok(Label::Tts),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerDef {
    pub marker_id: String,
    pub display_text: String,
}

/// The checklist of perceptual flaws offered after a TTS judgment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerCatalog {
    #[serde(default = "MarkerCatalog::default_size")]
    pub size: usize,
    pub markers: Vec<MarkerDef>,
}

impl MarkerCatalog {
    fn default_size() -> usize {
        9
    }

    pub fn contains(&self, marker_id: &str) -> bool {
        self.markers.iter().any(|m| m.marker_id == marker_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.markers.iter().map(|m| m.marker_id.as_str())
    }
}

impl Default for MarkerCatalog {
    fn default() -> Self {
        let markers = [
            ("digital_voice", "Voice quality is digital"),
            ("unnatural_pauses", "Unnatural pauses"),
            ("unnatural_pitch", "Unnatural pitch"),
            ("flat_monotonic", "Flat or monotonic"),
            ("inappropriate_emotion", "Inappropriate emotion"),
            ("no_human_quirks", "No human quirks"),
            ("mispronunciations", "Mispronunciations"),
            ("word_skips_repeats", "Word skips/repeats"),
            ("digital_artifacts", "Digital artifacts"),
        ]
        .into_iter()
        .map(|(id, text)| MarkerDef {
            marker_id: id.to_string(),
            display_text: text.to_string(),
        })
        .collect();
        MarkerCatalog { size: 9, markers }
    }
}

/// Text shown on the instruction screen before the first trial.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instructions {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub cues: Vec<String>,
}

/// How a rater's trials are ordered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialOrdering {
    /// Seeded shuffle that avoids consecutive trials from the same system.
    #[default]
    Stratified,
    /// Plain seeded shuffle.
    Uniform,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentOptions {
    /// At most one rendition of each utterance per rater. `None` means on for
    /// the binary kinds; MUSHRA always groups by utterance.
    #[serde(default)]
    pub one_rendition_per_utterance: Option<bool>,
    #[serde(default)]
    pub ordering: TrialOrdering,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Study {
    pub study_id: String,
    pub test_kind: TestKind,
    pub systems: Vec<String>,
    pub utterance_count: u32,
    #[serde(default = "default_min_raters")]
    pub min_raters_per_system: u32,
    #[serde(default)]
    pub marker_catalog: Option<MarkerCatalog>,
    #[serde(default)]
    pub rng_seed: u64,
    /// Completion URL; `{code}` is replaced by the completion code.
    #[serde(default)]
    pub compensation_redirect: String,
    #[serde(default)]
    pub instructions: Option<Instructions>,
    #[serde(default)]
    pub assignment: AssignmentOptions,
    /// Drop responses flagged as rushed from the statistics.
    #[serde(default)]
    pub exclude_rushed: bool,
    #[serde(default = "default_min_decision_ms")]
    pub min_decision_ms: u64,
}

fn default_min_raters() -> u32 {
    DEFAULT_MIN_RATERS
}

fn default_min_decision_ms() -> u64 {
    DEFAULT_MIN_DECISION_MS
}

impl Study {
    pub fn one_rendition_per_utterance(&self) -> bool {
        match self.test_kind {
            TestKind::Mushra => true,
            _ => self.assignment.one_rendition_per_utterance.unwrap_or(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stimulus {
    pub stimulus_id: String,
    pub system: String,
    pub utterance_id: String,
    pub origin: Origin,
    pub audio_ref: String,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_utterance_id: Option<String>,
    /// Benchmark or corpus tag used as a table column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

/// What the rater submitted for one trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Judgment {
    Binary {
        stimulus_id: String,
        label: Label,
    },
    Granular {
        stimulus_id: String,
        label: Label,
        markers: BTreeSet<String>,
    },
    Mushra {
        scores: BTreeMap<String, u8>,
    },
}

impl Judgment {
    pub fn test_kind(&self) -> TestKind {
        match self {
            Judgment::Binary { .. } => TestKind::Hfr,
            Judgment::Granular { .. } => TestKind::HfrGranular,
            Judgment::Mushra { .. } => TestKind::Mushra,
        }
    }

    pub fn label(&self) -> Option<Label> {
        match self {
            Judgment::Binary { label, .. } | Judgment::Granular { label, .. } => Some(*label),
            Judgment::Mushra { .. } => None,
        }
    }
}

/// One accepted rater judgment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub study_id: String,
    pub rater_id: String,
    pub session_id: String,
    pub trial_id: String,
    pub judgment: Judgment,
    /// Server time from trial presentation to submission.
    pub response_time_ms: u64,
    /// Time from playback completion to submission.
    pub decision_time_ms: Option<u64>,
    pub playback_verified: bool,
    pub served_at: u64,
    pub responded_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HfrResult {
    pub estimate_pct: f64,
    pub n: u64,
    pub ci_low_pct: f64,
    pub ci_high_pct: f64,
}
