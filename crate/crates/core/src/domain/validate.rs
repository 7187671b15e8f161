use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use super::{Origin, Stimulus, Study, TestKind, HUMAN_SYSTEM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    Error,
    Warning,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Error => "ERROR",
            Severity::Warning => "WARNING",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationCode {
    EmptyStudyId,
    ZeroUtteranceCount,
    ZeroMinRaters,
    EmptySystemLabel,
    DuplicateSystemLabel,
    MissingMarkerCatalog,
    UnexpectedMarkerCatalog,
    MarkerCatalogSize,
    DuplicateMarkerId,
    EmptyStimulusId,
    DuplicateStimulusId,
    UnknownSystem,
    OriginMismatch,
    ZeroDuration,
    EmptyAudioRef,
    PromptEqualsTarget,
    MissingStimuliForSystem,
    UnevenUtteranceCoverage,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        use ViolationCode::*;
        match self {
            EmptyStudyId => "empty-study-id",
            ZeroUtteranceCount => "zero-utterance-count",
            ZeroMinRaters => "zero-min-raters",
            EmptySystemLabel => "empty-system-label",
            DuplicateSystemLabel => "duplicate-system-label",
            MissingMarkerCatalog => "missing-marker-catalog",
            UnexpectedMarkerCatalog => "unexpected-marker-catalog",
            MarkerCatalogSize => "marker-catalog-size",
            DuplicateMarkerId => "duplicate-marker-id",
            EmptyStimulusId => "empty-stimulus-id",
            DuplicateStimulusId => "duplicate-stimulus-id",
            UnknownSystem => "unknown-system",
            OriginMismatch => "origin-system-mismatch",
            ZeroDuration => "zero-duration",
            EmptyAudioRef => "empty-audio-ref",
            PromptEqualsTarget => "prompt-equals-target",
            MissingStimuliForSystem => "missing-stimuli-for-system",
            UnevenUtteranceCoverage => "uneven-utterance-coverage",
        }
    }

    /// Human-readable summary of the violated rule.
    pub fn description(self) -> &'static str {
        use ViolationCode::*;
        match self {
            EmptyStudyId => "study id is empty",
            ZeroUtteranceCount => "utterance_count must be at least 1",
            ZeroMinRaters => "min_raters_per_system must be at least 1",
            EmptySystemLabel => "system label is empty",
            DuplicateSystemLabel => "system label declared twice",
            MissingMarkerCatalog => "granular study without marker catalog",
            UnexpectedMarkerCatalog => "marker catalog on a non-granular study",
            MarkerCatalogSize => "marker catalog length differs from its declared size",
            DuplicateMarkerId => "marker id declared twice",
            EmptyStimulusId => "stimulus id is empty",
            DuplicateStimulusId => "stimulus id used twice",
            UnknownSystem => "stimulus references an undeclared system",
            OriginMismatch => "origin must be human exactly when system is `human`",
            ZeroDuration => "duration_ms must be positive",
            EmptyAudioRef => "audio_ref is empty",
            PromptEqualsTarget => "prompt equals target",
            MissingStimuliForSystem => "missing stimuli for system",
            UnevenUtteranceCoverage => "systems cover different utterance sets",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Violation {
    pub severity: Severity,
    pub code: ViolationCode,
    pub context: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}",
            self.severity.as_str(),
            self.code.as_str(),
            self.context
        )
    }
}

/// Result of manifest validation. Violations are sorted, so permuting the
/// stimulus list never changes the report.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// Valid iff there are no error-severity violations.
    pub fn is_valid(&self) -> bool {
        self.errors().next().is_none()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| v.severity == Severity::Error)
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    pub fn render(&self) -> String {
        self.violations
            .iter()
            .map(|v| format!("{v}\n"))
            .collect()
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn error(&mut self, code: ViolationCode, context: impl Into<String>) {
        self.0.push(Violation {
            severity: Severity::Error,
            code,
            context: context.into(),
        });
    }

    fn warn(&mut self, code: ViolationCode, context: impl Into<String>) {
        self.0.push(Violation {
            severity: Severity::Warning,
            code,
            context: context.into(),
        });
    }
}

pub fn validate_manifest(study: &Study, stimuli: &[Stimulus]) -> ValidationReport {
    use ViolationCode::*;
    let mut out = Collector(Vec::new());

    if study.study_id.trim().is_empty() {
        out.error(EmptyStudyId, "study");
    }
    if study.utterance_count == 0 {
        out.error(ZeroUtteranceCount, "study");
    }
    if study.min_raters_per_system == 0 {
        out.error(ZeroMinRaters, "study");
    }

    let mut declared = BTreeSet::new();
    for system in &study.systems {
        if system.trim().is_empty() {
            out.error(EmptySystemLabel, "study");
        } else if !declared.insert(system.as_str()) {
            out.error(DuplicateSystemLabel, format!("system={system}"));
        }
    }

    match (&study.marker_catalog, study.test_kind) {
        (None, TestKind::HfrGranular) => out.error(MissingMarkerCatalog, "study"),
        (Some(_), TestKind::Hfr | TestKind::Mushra) => out.error(UnexpectedMarkerCatalog, "study"),
        (Some(catalog), TestKind::HfrGranular) => {
            if catalog.markers.len() != catalog.size {
                out.error(
                    MarkerCatalogSize,
                    format!("declared={} actual={}", catalog.size, catalog.markers.len()),
                );
            }
            let mut seen = HashSet::new();
            for m in &catalog.markers {
                if !seen.insert(m.marker_id.as_str()) {
                    out.error(DuplicateMarkerId, format!("marker={}", m.marker_id));
                }
            }
        }
        (None, _) => {}
    }

    let mut seen_ids = HashSet::new();
    let mut per_system: BTreeMap<&str, usize> = BTreeMap::new();
    let mut utterances: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in stimuli {
        let ctx = format!("stimulus={}", s.stimulus_id);
        if s.stimulus_id.trim().is_empty() {
            out.error(EmptyStimulusId, format!("system={}", s.system));
        } else if !seen_ids.insert(s.stimulus_id.as_str()) {
            out.error(DuplicateStimulusId, ctx.clone());
        }
        if !declared.contains(s.system.as_str()) {
            out.error(UnknownSystem, format!("{ctx} system={}", s.system));
        }
        if (s.origin == Origin::Human) != (s.system == HUMAN_SYSTEM) {
            out.error(OriginMismatch, ctx.clone());
        }
        if s.duration_ms == 0 {
            out.error(ZeroDuration, ctx.clone());
        }
        if s.audio_ref.trim().is_empty() {
            out.error(EmptyAudioRef, ctx.clone());
        }
        if s.prompt_utterance_id.as_deref() == Some(s.utterance_id.as_str()) {
            out.error(PromptEqualsTarget, ctx.clone());
        }
        *per_system.entry(s.system.as_str()).or_default() += 1;
        utterances
            .entry(s.system.as_str())
            .or_default()
            .insert(s.utterance_id.as_str());
    }

    for system in &declared {
        let count = per_system.get(system).copied().unwrap_or(0);
        if count < study.utterance_count as usize {
            out.error(
                MissingStimuliForSystem,
                format!(
                    "system={system} have={count} need={}",
                    study.utterance_count
                ),
            );
        }
    }

    if study.test_kind == TestKind::Mushra {
        let mut sets = declared.iter().filter_map(|s| utterances.get(s));
        if let Some(first) = sets.next() {
            if sets.any(|other| other != first) {
                out.warn(UnevenUtteranceCoverage, "study");
            }
        }
    }

    let mut violations = out.0;
    violations.sort();
    ValidationReport { violations }
}
