//! Listener sessions.
//!
//! A [`Session`] is an event-sourced state machine:
//!
//! ```text
//! Created -> Instructed -> InTrial(0) -> AwaitingResponse(0) -> InTrial(1) -> ...
//!         ... -> AwaitingResponse(n-1) -> Completed -> Redeemed
//! ```
//!
//! Commands (`acknowledge`, `present`, `playback`, `submit`, `complete`)
//! inspect the current state and return the [`Event`]s to log; [`Session::apply`]
//! is the only code that mutates state, both live and during replay.

mod code;
mod coverage;
mod registry;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Judgment, Label, MarkerCatalog, Response, Study, TestKind};
use crate::storage::LogPayload;

pub use code::{completion_code, redirect_url, session_id};
pub use coverage::{Coverage, Interval};
pub use registry::{
    Clock, Completion, CreatedSession, Funnel, ManualClock, ProgressReport, Registry,
    RegistryConfig, RegistryError, StudyRuntime, SystemClock, SystemProgress, TrialStatus,
};

/// Default allowance for codec tail truncation when checking coverage.
pub const DEFAULT_TOLERANCE_MS: u64 = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "trial", rename_all = "snake_case")]
pub enum Phase {
    Created,
    Instructed,
    InTrial(usize),
    AwaitingResponse(usize),
    Completed,
    Redeemed,
}

/// Client report of a played stretch of audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaybackEvent {
    /// Required when the trial presents more than one stimulus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimulus_id: Option<String>,
    pub start_ms: u64,
    pub end_ms: u64,
    #[serde(default)]
    pub client_ts_ms: u64,
    pub playback_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledStimulus {
    pub stimulus_id: String,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledTrial {
    pub trial_id: String,
    pub stimuli: Vec<ScheduledStimulus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum Event {
    SessionCreated {
        session_id: String,
        study_id: String,
        rater_id: String,
        participant_id: String,
        #[serde(default)]
        crowd_session_id: Option<String>,
        tolerance_ms: u64,
        trials: Vec<ScheduledTrial>,
    },
    InstructionsAcknowledged {
        session_id: String,
    },
    TrialServed {
        session_id: String,
        trial_index: usize,
    },
    Playback {
        session_id: String,
        trial_id: String,
        events: Vec<PlaybackEvent>,
    },
    ResponseAccepted {
        session_id: String,
        response: Response,
    },
    SessionCompleted {
        session_id: String,
    },
    CodeIssued {
        session_id: String,
        code: String,
    },
}

impl Event {
    pub fn session_id(&self) -> &str {
        match self {
            Event::SessionCreated { session_id, .. }
            | Event::InstructionsAcknowledged { session_id }
            | Event::TrialServed { session_id, .. }
            | Event::Playback { session_id, .. }
            | Event::ResponseAccepted { session_id, .. }
            | Event::SessionCompleted { session_id }
            | Event::CodeIssued { session_id, .. } => session_id,
        }
    }
}

impl LogPayload for Event {
    fn kind(&self) -> &'static str {
        match self {
            Event::SessionCreated { .. } => "session-created",
            Event::InstructionsAcknowledged { .. } => "instructions-acknowledged",
            Event::TrialServed { .. } => "trial-served",
            Event::Playback { .. } => "playback",
            Event::ResponseAccepted { .. } => "response-accepted",
            Event::SessionCompleted { .. } => "session-completed",
            Event::CodeIssued { .. } => "code-issued",
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.session_id().is_empty() {
            return Err("empty session id".into());
        }
        match self {
            Event::SessionCreated {
                study_id,
                rater_id,
                trials,
                ..
            } => {
                if study_id.is_empty() || rater_id.is_empty() {
                    return Err("empty study or rater id".into());
                }
                if trials.is_empty() || trials.iter().any(|t| t.stimuli.is_empty()) {
                    return Err("session without trials".into());
                }
                if trials.iter().flat_map(|t| &t.stimuli).any(|s| s.duration_ms == 0) {
                    return Err("zero-length stimulus".into());
                }
            }
            Event::Playback { events, .. } => {
                for (i, e) in events.iter().enumerate() {
                    check_playback(e).map_err(|r| format!("playback event {i}: {r}"))?;
                }
            }
            Event::ResponseAccepted { response, .. } => {
                if !response.playback_verified {
                    return Err("response without verified playback".into());
                }
            }
            Event::CodeIssued { code, .. } if code.is_empty() => return Err("empty code".into()),
            _ => {}
        }
        Ok(())
    }
}

fn check_playback(e: &PlaybackEvent) -> Result<(), String> {
    if e.playback_rate != 1.0 {
        return Err(format!("playback_rate {} is not 1.0", e.playback_rate));
    }
    if e.start_ms >= e.end_ms {
        return Err(format!("empty interval {}..{}", e.start_ms, e.end_ms));
    }
    Ok(())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("session already exists for rater `{rater_id}` in study `{study_id}`")]
    Conflict { study_id: String, rater_id: String },
    #[error("rater `{0}` is not assigned to this study")]
    Forbidden(String),
    #[error("instructions have not been acknowledged")]
    InstructionsPending,
    #[error("trial `{got}` is not the current trial{}", .expected.as_ref().map(|e| format!(" (expected `{e}`)")).unwrap_or_default())]
    OutOfOrder { expected: Option<String>, got: String },
    #[error("playback event {index} rejected: {reason}")]
    PlaybackRejected { index: usize, reason: String },
    #[error("playback incomplete: covered {covered_ms} of {required_ms} ms required")]
    PlaybackIncomplete { covered_ms: u64, required_ms: u64 },
    #[error("invalid response payload: {0}")]
    Schema(String),
    #[error("{remaining} {} remaining", if *.remaining == 1 { "trial" } else { "trials" })]
    Premature { remaining: usize },
    #[error("storage unavailable: {0}")]
    Unavailable(String),
    #[error("inconsistent event: {0}")]
    Inconsistent(String),
}

/// What a rater submits for one trial.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponsePayload {
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default)]
    pub markers: Option<Vec<String>>,
    #[serde(default)]
    pub scores: Option<BTreeMap<String, i64>>,
    /// Client clock at submission, paired with playback `client_ts_ms`.
    #[serde(default)]
    pub client_ts_ms: Option<u64>,
}

impl ResponsePayload {
    pub fn label(label: Label) -> Self {
        ResponsePayload {
            label: Some(label),
            ..Default::default()
        }
    }

    pub fn granular(label: Label, markers: &[&str]) -> Self {
        ResponsePayload {
            label: Some(label),
            markers: Some(markers.iter().map(|m| m.to_string()).collect()),
            ..Default::default()
        }
    }

    pub fn scores(scores: impl IntoIterator<Item = (String, i64)>) -> Self {
        ResponsePayload {
            scores: Some(scores.into_iter().collect()),
            ..Default::default()
        }
    }

    fn into_judgment(
        self,
        kind: TestKind,
        catalog: Option<&MarkerCatalog>,
        trial: &ScheduledTrial,
    ) -> Result<Judgment, SessionError> {
        let schema = |m: &str| Err(SessionError::Schema(m.to_string()));
        let single = || trial.stimuli[0].stimulus_id.clone();
        match kind {
            TestKind::Hfr => {
                if self.markers.is_some() {
                    return schema("markers are not accepted in an HFR study");
                }
                if self.scores.is_some() {
                    return schema("scores are not accepted in an HFR study");
                }
                let Some(label) = self.label else {
                    return schema("label is required");
                };
                Ok(Judgment::Binary {
                    stimulus_id: single(),
                    label,
                })
            }
            TestKind::HfrGranular => {
                if self.scores.is_some() {
                    return schema("scores are not accepted in an HFR_GRANULAR study");
                }
                let Some(label) = self.label else {
                    return schema("label is required");
                };
                let listed = self.markers.unwrap_or_default();
                let markers: BTreeSet<String> = listed.iter().cloned().collect();
                if markers.len() != listed.len() {
                    return schema("markers repeat");
                }
                match label {
                    Label::Tts if markers.is_empty() => {
                        return schema("a tts judgment requires at least one marker")
                    }
                    Label::Human if !markers.is_empty() => {
                        return schema("markers are only accepted with a tts judgment")
                    }
                    _ => {}
                }
                let catalog = catalog.ok_or_else(|| SessionError::Schema("study has no marker catalog".into()))?;
                if let Some(unknown) = markers.iter().find(|m| !catalog.contains(m)) {
                    return Err(SessionError::Schema(format!("unknown marker `{unknown}`")));
                }
                Ok(Judgment::Granular {
                    stimulus_id: single(),
                    label,
                    markers,
                })
            }
            TestKind::Mushra => {
                if self.label.is_some() || self.markers.is_some() {
                    return schema("labels and markers are not accepted in a MUSHRA study");
                }
                let Some(scores) = self.scores else {
                    return schema("scores are required");
                };
                let expected: BTreeSet<&str> =
                    trial.stimuli.iter().map(|s| s.stimulus_id.as_str()).collect();
                let given: BTreeSet<&str> = scores.keys().map(String::as_str).collect();
                if expected != given {
                    return schema("scores must cover exactly the trial's stimuli");
                }
                let mut out = BTreeMap::new();
                for (id, score) in scores {
                    let score = u8::try_from(score)
                        .ok()
                        .filter(|s| *s <= 100)
                        .ok_or_else(|| SessionError::Schema(format!("score {score} for `{id}` outside 0..=100")))?;
                    out.insert(id, score);
                }
                Ok(Judgment::Mushra { scores: out })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    pub spec: ScheduledTrial,
    pub coverage: BTreeMap<String, Coverage>,
    pub served_at: Option<u64>,
    pub playback_completed_at: Option<u64>,
    pub playback_completed_client_ts: Option<u64>,
    pub response: Option<Response>,
}

impl TrialState {
    fn new(spec: ScheduledTrial) -> Self {
        TrialState {
            coverage: spec
                .stimuli
                .iter()
                .map(|s| (s.stimulus_id.clone(), Coverage::new()))
                .collect(),
            spec,
            served_at: None,
            playback_completed_at: None,
            playback_completed_client_ts: None,
            response: None,
        }
    }

    fn is_covered(&self, tolerance_ms: u64) -> bool {
        self.spec
            .stimuli
            .iter()
            .all(|s| self.coverage[&s.stimulus_id].is_complete(s.duration_ms, tolerance_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StimulusCoverage {
    pub stimulus_id: String,
    pub covered_ms: u64,
    pub duration_ms: u64,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageStatus {
    pub trial_id: String,
    pub covered_ms: u64,
    pub required_ms: u64,
    pub complete: bool,
    pub stimuli: Vec<StimulusCoverage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StimulusView {
    pub stimulus_id: String,
    pub duration_ms: u64,
    pub audio_url: String,
}

/// Static description of a trial as presented to the rater.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrialView {
    pub trial_id: String,
    pub index: usize,
    pub total: usize,
    pub test_kind: TestKind,
    pub stimuli: Vec<StimulusView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub markers: Option<MarkerCatalog>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubmitAck {
    pub trial_id: String,
    pub accepted: bool,
    pub completed: bool,
    pub remaining: usize,
    pub next_trial: Option<TrialView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub study_id: String,
    pub rater_id: String,
    pub participant_id: String,
    pub crowd_session_id: Option<String>,
    pub created_at: u64,
    pub tolerance_ms: u64,
    pub phase: Phase,
    pub trials: Vec<TrialState>,
    pub code: Option<String>,
}

impl Session {
    /// Builds the initial state from a `SessionCreated` event.
    pub fn from_created(event: &Event, ts_ms: u64) -> Result<Self, SessionError> {
        match event {
            Event::SessionCreated {
                session_id,
                study_id,
                rater_id,
                participant_id,
                crowd_session_id,
                tolerance_ms,
                trials,
            } => Ok(Session {
                session_id: session_id.clone(),
                study_id: study_id.clone(),
                rater_id: rater_id.clone(),
                participant_id: participant_id.clone(),
                crowd_session_id: crowd_session_id.clone(),
                created_at: ts_ms,
                tolerance_ms: *tolerance_ms,
                phase: Phase::Created,
                trials: trials.iter().cloned().map(TrialState::new).collect(),
                code: None,
            }),
            other => Err(SessionError::Inconsistent(format!(
                "{} before session-created",
                other.kind()
            ))),
        }
    }

    pub fn answered(&self) -> usize {
        self.trials.iter().filter(|t| t.response.is_some()).count()
    }

    pub fn remaining(&self) -> usize {
        self.trials.len() - self.answered()
    }

    pub fn responses(&self) -> impl Iterator<Item = &Response> {
        self.trials.iter().filter_map(|t| t.response.as_ref())
    }

    /// Index of the trial currently presented, if any.
    pub fn current_index(&self) -> Option<usize> {
        match self.phase {
            Phase::InTrial(k) | Phase::AwaitingResponse(k) => Some(k),
            _ => None,
        }
    }

    fn current_trial_id(&self) -> Option<String> {
        self.current_index().map(|k| self.trials[k].spec.trial_id.clone())
    }

    fn trial_index(&self, trial_id: &str) -> Option<usize> {
        self.trials.iter().position(|t| t.spec.trial_id == trial_id)
    }

    // ---- commands ----

    pub fn acknowledge(&self) -> Result<Vec<Event>, SessionError> {
        Ok(match self.phase {
            Phase::Created => vec![Event::InstructionsAcknowledged {
                session_id: self.session_id.clone(),
            }],
            _ => vec![],
        })
    }

    /// Serving the current trial; the first call after the instructions
    /// stamps the presentation time of trial 0.
    pub fn present(&self) -> Result<Vec<Event>, SessionError> {
        match self.phase {
            Phase::Created => Err(SessionError::InstructionsPending),
            Phase::Instructed => Ok(vec![Event::TrialServed {
                session_id: self.session_id.clone(),
                trial_index: 0,
            }]),
            _ => Ok(vec![]),
        }
    }

    pub fn playback(&self, trial_id: &str, events: &[PlaybackEvent]) -> Result<Vec<Event>, SessionError> {
        let k = self.require_current(trial_id)?;
        let trial = &self.trials[k];
        for (index, e) in events.iter().enumerate() {
            let reject = |reason: String| SessionError::PlaybackRejected { index, reason };
            check_playback(e).map_err(reject)?;
            let stimulus = match &e.stimulus_id {
                Some(id) => trial
                    .spec
                    .stimuli
                    .iter()
                    .find(|s| s.stimulus_id == *id)
                    .ok_or_else(|| reject(format!("stimulus `{id}` is not part of this trial")))?,
                None if trial.spec.stimuli.len() == 1 => &trial.spec.stimuli[0],
                None => return Err(reject("stimulus_id is required for multi-stimulus trials".into())),
            };
            if e.end_ms > stimulus.duration_ms {
                return Err(reject(format!(
                    "end_ms {} exceeds duration {}",
                    e.end_ms, stimulus.duration_ms
                )));
            }
        }
        if events.is_empty() {
            return Ok(vec![]);
        }
        Ok(vec![Event::Playback {
            session_id: self.session_id.clone(),
            trial_id: trial_id.to_string(),
            events: events.to_vec(),
        }])
    }

    /// Returns the events to log, or none when `trial_id` was already
    /// answered (the caller replays the original acknowledgment).
    pub fn submit(
        &self,
        trial_id: &str,
        payload: ResponsePayload,
        study: &Study,
        now: u64,
    ) -> Result<Vec<Event>, SessionError> {
        if let Some(k) = self.trial_index(trial_id) {
            if self.trials[k].response.is_some() {
                return Ok(vec![]);
            }
        }
        let k = self.require_current(trial_id)?;
        let trial = &self.trials[k];
        if self.phase == Phase::InTrial(k) {
            let status = self.coverage_status(k);
            return Err(SessionError::PlaybackIncomplete {
                covered_ms: status.covered_ms,
                required_ms: status.required_ms,
            });
        }
        let client_ts = payload.client_ts_ms;
        let judgment = payload.into_judgment(study.test_kind, study.marker_catalog.as_ref(), &trial.spec)?;
        let served_at = trial.served_at.unwrap_or(now);
        let decision_time_ms = match (client_ts, trial.playback_completed_client_ts) {
            (Some(submitted), Some(done)) if done > 0 => Some(submitted.saturating_sub(done)),
            _ => trial.playback_completed_at.map(|done| now.saturating_sub(done)),
        };
        let response = Response {
            study_id: self.study_id.clone(),
            rater_id: self.rater_id.clone(),
            session_id: self.session_id.clone(),
            trial_id: trial_id.to_string(),
            judgment,
            response_time_ms: now.saturating_sub(served_at),
            decision_time_ms,
            playback_verified: true,
            served_at,
            responded_at: now,
        };
        let mut events = vec![Event::ResponseAccepted {
            session_id: self.session_id.clone(),
            response,
        }];
        if k + 1 == self.trials.len() {
            events.push(Event::SessionCompleted {
                session_id: self.session_id.clone(),
            });
        }
        Ok(events)
    }

    pub fn complete(&self, mac_key: &[u8]) -> Result<Vec<Event>, SessionError> {
        match self.phase {
            Phase::Completed => Ok(vec![Event::CodeIssued {
                session_id: self.session_id.clone(),
                code: completion_code(mac_key, &self.study_id, &self.rater_id),
            }]),
            Phase::Redeemed => Ok(vec![]),
            _ => Err(SessionError::Premature {
                remaining: self.remaining(),
            }),
        }
    }

    fn require_current(&self, trial_id: &str) -> Result<usize, SessionError> {
        match self.phase {
            Phase::Created => Err(SessionError::InstructionsPending),
            Phase::InTrial(k) | Phase::AwaitingResponse(k) if self.trials[k].spec.trial_id == trial_id => Ok(k),
            _ => Err(SessionError::OutOfOrder {
                expected: self.current_trial_id(),
                got: trial_id.to_string(),
            }),
        }
    }

    // ---- reducer ----

    pub fn apply(&mut self, event: &Event, ts_ms: u64) -> Result<(), SessionError> {
        let bad = |what: &str| {
            Err(SessionError::Inconsistent(format!(
                "{what} in phase {:?}",
                self.phase
            )))
        };
        match event {
            Event::SessionCreated { .. } => return bad("duplicate session-created"),
            Event::InstructionsAcknowledged { .. } => match self.phase {
                Phase::Created => self.phase = Phase::Instructed,
                _ => return bad("instructions-acknowledged"),
            },
            Event::TrialServed { trial_index, .. } => match self.phase {
                Phase::Instructed if *trial_index == 0 => {
                    self.trials[0].served_at = Some(ts_ms);
                    self.phase = Phase::InTrial(0);
                }
                _ => return bad("trial-served"),
            },
            Event::Playback { trial_id, events, .. } => {
                let Some(k) = self.current_index().filter(|&k| self.trials[k].spec.trial_id == *trial_id) else {
                    return bad("playback for a non-current trial");
                };
                let tolerance = self.tolerance_ms;
                let trial = &mut self.trials[k];
                for e in events {
                    let id = e
                        .stimulus_id
                        .clone()
                        .unwrap_or_else(|| trial.spec.stimuli[0].stimulus_id.clone());
                    let Some(cov) = trial.coverage.get_mut(&id) else {
                        return Err(SessionError::Inconsistent(format!("unknown stimulus `{id}`")));
                    };
                    cov.add(e.start_ms, e.end_ms);
                }
                if self.phase == Phase::InTrial(k) && trial.is_covered(tolerance) {
                    trial.playback_completed_at = Some(ts_ms);
                    trial.playback_completed_client_ts = events.iter().map(|e| e.client_ts_ms).max();
                    self.phase = Phase::AwaitingResponse(k);
                }
            }
            Event::ResponseAccepted { response, .. } => match self.phase {
                Phase::AwaitingResponse(k) if self.trials[k].spec.trial_id == response.trial_id => {
                    self.trials[k].response = Some(response.clone());
                    if k + 1 < self.trials.len() {
                        self.trials[k + 1].served_at = Some(ts_ms);
                        self.phase = Phase::InTrial(k + 1);
                    } else {
                        self.phase = Phase::Completed;
                    }
                }
                _ => return bad("response-accepted"),
            },
            Event::SessionCompleted { .. } => {
                if self.phase != Phase::Completed {
                    return bad("session-completed");
                }
            }
            Event::CodeIssued { code, .. } => match self.phase {
                Phase::Completed => {
                    self.code = Some(code.clone());
                    self.phase = Phase::Redeemed;
                }
                _ => return bad("code-issued"),
            },
        }
        Ok(())
    }

    // ---- views ----

    pub fn coverage_status(&self, k: usize) -> CoverageStatus {
        let trial = &self.trials[k];
        let stimuli: Vec<StimulusCoverage> = trial
            .spec
            .stimuli
            .iter()
            .map(|s| {
                let cov = &trial.coverage[&s.stimulus_id];
                StimulusCoverage {
                    stimulus_id: s.stimulus_id.clone(),
                    covered_ms: cov.covered_ms(),
                    duration_ms: s.duration_ms,
                    complete: cov.is_complete(s.duration_ms, self.tolerance_ms),
                }
            })
            .collect();
        CoverageStatus {
            trial_id: trial.spec.trial_id.clone(),
            covered_ms: stimuli.iter().map(|s| s.covered_ms).sum(),
            required_ms: trial
                .spec
                .stimuli
                .iter()
                .map(|s| s.duration_ms.saturating_sub(self.tolerance_ms))
                .sum(),
            complete: stimuli.iter().all(|s| s.complete),
            stimuli,
        }
    }

    pub fn trial_view(&self, k: usize, study: &Study) -> TrialView {
        let spec = &self.trials[k].spec;
        TrialView {
            trial_id: spec.trial_id.clone(),
            index: k,
            total: self.trials.len(),
            test_kind: study.test_kind,
            stimuli: spec
                .stimuli
                .iter()
                .map(|s| StimulusView {
                    stimulus_id: s.stimulus_id.clone(),
                    duration_ms: s.duration_ms,
                    audio_url: format!("/v1/stimuli/{}/audio", s.stimulus_id),
                })
                .collect(),
            markers: match study.test_kind {
                TestKind::HfrGranular => study.marker_catalog.clone(),
                _ => None,
            },
        }
    }

    /// Acknowledgment for an answered trial; identical on every call.
    pub fn ack_for(&self, trial_id: &str, study: &Study) -> Option<SubmitAck> {
        let k = self.trial_index(trial_id)?;
        self.trials[k].response.as_ref()?;
        let next = (k + 1 < self.trials.len()).then(|| self.trial_view(k + 1, study));
        Some(SubmitAck {
            trial_id: trial_id.to_string(),
            accepted: true,
            completed: next.is_none(),
            remaining: self.trials.len() - (k + 1),
            next_trial: next,
        })
    }
}
