//! In-process session store backed by the event log.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;

use super::{
    redirect_url, session_id, Event, Phase, PlaybackEvent, ResponsePayload, ScheduledStimulus,
    ScheduledTrial, Session, SessionError, SubmitAck, TrialView, CoverageStatus,
    DEFAULT_TOLERANCE_MS,
};
use crate::assignment::TrialSchedule;
use crate::domain::{validate_manifest, Instructions, Manifest, Response, Stimulus, TestKind};
use crate::stats::{flag_rushed, ResponseSet};
use crate::storage::{rows_for_response, to_csv_string, EventLog, EventRecord, LogPayload, ResultRow};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Clock advanced by hand, for tests and simulations.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    pub mac_key: Vec<u8>,
    pub tolerance_ms: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            mac_key: b"development-key".to_vec(),
            tolerance_ms: DEFAULT_TOLERANCE_MS,
        }
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("study `{0}` has an invalid manifest:\n{1}")]
    InvalidManifest(String, String),
    #[error("schedule is for study `{schedule}`, manifest is `{manifest}`")]
    ScheduleMismatch { schedule: String, manifest: String },
    #[error("schedule references unknown stimulus `{0}`")]
    UnknownStimulus(String),
    #[error("study `{0}` is registered twice")]
    DuplicateStudy(String),
    #[error("replay failed at sequence {seq}: {reason}")]
    Replay { seq: u64, reason: String },
}

/// A study's manifest and schedule, loaded once at startup.
pub struct StudyRuntime {
    pub manifest: Manifest,
    pub schedule: TrialSchedule,
    index: HashMap<String, usize>,
}

impl StudyRuntime {
    pub fn new(manifest: Manifest, schedule: TrialSchedule) -> Result<Self, RegistryError> {
        let report = validate_manifest(&manifest.study, &manifest.stimuli);
        if !report.is_valid() {
            return Err(RegistryError::InvalidManifest(
                manifest.study.study_id.clone(),
                report.render(),
            ));
        }
        if schedule.study_id != manifest.study.study_id {
            return Err(RegistryError::ScheduleMismatch {
                schedule: schedule.study_id.clone(),
                manifest: manifest.study.study_id.clone(),
            });
        }
        let index: HashMap<String, usize> = manifest
            .stimuli
            .iter()
            .enumerate()
            .map(|(i, s)| (s.stimulus_id.clone(), i))
            .collect();
        for trial in schedule.raters.values().flatten() {
            if let Some(id) = trial.stimulus_ids.iter().find(|id| !index.contains_key(*id)) {
                return Err(RegistryError::UnknownStimulus(id.clone()));
            }
        }
        Ok(StudyRuntime {
            manifest,
            schedule,
            index,
        })
    }

    pub fn study_id(&self) -> &str {
        &self.manifest.study.study_id
    }

    pub fn stimulus(&self, stimulus_id: &str) -> Option<&Stimulus> {
        self.index.get(stimulus_id).map(|&i| &self.manifest.stimuli[i])
    }

    fn scheduled_trials(&self, rater_id: &str) -> Option<Vec<ScheduledTrial>> {
        let trials = self.schedule.raters.get(rater_id)?;
        if trials.is_empty() {
            return None;
        }
        Some(
            trials
                .iter()
                .map(|t| ScheduledTrial {
                    trial_id: t.trial_id.clone(),
                    stimuli: t
                        .stimulus_ids
                        .iter()
                        .map(|id| ScheduledStimulus {
                            stimulus_id: id.clone(),
                            duration_ms: self.stimulus(id).map_or(0, |s| s.duration_ms),
                        })
                        .collect(),
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub study_id: String,
    pub rater_id: String,
    pub test_kind: TestKind,
    pub total_trials: usize,
    pub instructions: Instructions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Trial {
        trial: TrialView,
        coverage: CoverageStatus,
    },
    Completed {
        answered: usize,
        redeemed: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Completion {
    pub code: String,
    pub redirect_url: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Funnel {
    pub created: usize,
    pub in_progress: usize,
    pub completed: usize,
    pub redeemed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SystemProgress {
    pub stimuli: usize,
    pub ratings: usize,
    /// Fewest distinct raters on any one of the system's stimuli.
    pub min_raters_per_stimulus: usize,
    pub target_met: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProgressReport {
    pub study_id: String,
    pub test_kind: TestKind,
    pub min_raters_per_system: u32,
    pub responses: usize,
    pub rushed: usize,
    pub funnel: Funnel,
    pub systems: BTreeMap<String, SystemProgress>,
}

pub struct Registry {
    studies: BTreeMap<String, StudyRuntime>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    log: Mutex<EventLog<Event>>,
    clock: Arc<dyn Clock>,
    config: RegistryConfig,
}

fn unavailable(e: impl std::fmt::Display) -> SessionError {
    SessionError::Unavailable(e.to_string())
}

impl Registry {
    pub fn new(
        studies: Vec<StudyRuntime>,
        log: EventLog<Event>,
        clock: Arc<dyn Clock>,
        config: RegistryConfig,
    ) -> Result<Self, RegistryError> {
        Self::recover(studies, log, Vec::new(), clock, config)
    }

    /// Rebuilds every session by folding `records` through the same reducer
    /// the live path uses.
    pub fn recover(
        studies: Vec<StudyRuntime>,
        log: EventLog<Event>,
        records: Vec<EventRecord<Event>>,
        clock: Arc<dyn Clock>,
        config: RegistryConfig,
    ) -> Result<Self, RegistryError> {
        let mut by_id = BTreeMap::new();
        for s in studies {
            let id = s.study_id().to_string();
            if by_id.insert(id.clone(), s).is_some() {
                return Err(RegistryError::DuplicateStudy(id));
            }
        }
        let mut sessions: BTreeMap<String, Session> = BTreeMap::new();
        for record in records {
            let fail = |reason: String| RegistryError::Replay {
                seq: record.seq,
                reason,
            };
            let id = record.event.session_id().to_string();
            match &record.event {
                Event::SessionCreated { .. } => {
                    if sessions.contains_key(&id) {
                        return Err(fail(format!("session `{id}` created twice")));
                    }
                    let s = Session::from_created(&record.event, record.ts_ms).map_err(|e| fail(e.to_string()))?;
                    sessions.insert(id, s);
                }
                other => {
                    let s = sessions
                        .get_mut(&id)
                        .ok_or_else(|| fail(format!("{} for unknown session `{id}`", other.kind())))?;
                    s.apply(other, record.ts_ms).map_err(|e| fail(e.to_string()))?;
                }
            }
        }
        Ok(Registry {
            studies: by_id,
            sessions: RwLock::new(
                sessions
                    .into_iter()
                    .map(|(k, v)| (k, Arc::new(Mutex::new(v))))
                    .collect(),
            ),
            log: Mutex::new(log),
            clock,
            config,
        })
    }

    pub fn studies(&self) -> impl Iterator<Item = &StudyRuntime> {
        self.studies.values()
    }

    pub fn study(&self, study_id: &str) -> Option<&StudyRuntime> {
        self.studies.get(study_id)
    }

    /// Finds a stimulus across all loaded studies.
    pub fn stimulus(&self, stimulus_id: &str) -> Option<&Stimulus> {
        self.studies.values().find_map(|s| s.stimulus(stimulus_id))
    }

    pub fn session(&self, session_id: &str) -> Option<Session> {
        self.sessions.read().get(session_id).map(|s| s.lock().clone())
    }

    pub fn create_session(
        &self,
        study_id: &str,
        rater_id: &str,
        participant_id: &str,
        crowd_session_id: Option<&str>,
    ) -> Result<CreatedSession, SessionError> {
        let study = self
            .studies
            .get(study_id)
            .ok_or_else(|| SessionError::NotFound(format!("study `{study_id}`")))?;
        let trials = study
            .scheduled_trials(rater_id)
            .ok_or_else(|| SessionError::Forbidden(rater_id.to_string()))?;
        let id = session_id(&self.config.mac_key, study_id, rater_id);
        let mut sessions = self.sessions.write();
        if sessions.contains_key(&id) {
            return Err(SessionError::Conflict {
                study_id: study_id.to_string(),
                rater_id: rater_id.to_string(),
            });
        }
        let total_trials = trials.len();
        let event = Event::SessionCreated {
            session_id: id.clone(),
            study_id: study_id.to_string(),
            rater_id: rater_id.to_string(),
            participant_id: participant_id.to_string(),
            crowd_session_id: crowd_session_id.map(str::to_string),
            tolerance_ms: self.config.tolerance_ms,
            trials,
        };
        let now = self.clock.now_ms();
        let record = self.log.lock().append(event, now).map_err(unavailable)?;
        let session = Session::from_created(&record.event, record.ts_ms)?;
        sessions.insert(id.clone(), Arc::new(Mutex::new(session)));
        let s = &study.manifest.study;
        Ok(CreatedSession {
            session_id: id,
            study_id: study_id.to_string(),
            rater_id: rater_id.to_string(),
            test_kind: s.test_kind,
            total_trials,
            instructions: s.instructions.clone().unwrap_or_else(|| Instructions {
                text: "Use headphones in a quiet room. Play each recording to the end before answering."
                    .into(),
                cues: Vec::new(),
            }),
        })
    }

    /// Runs a command against one session: decide, append, apply, then view.
    fn mutate<T>(
        &self,
        session_id: &str,
        decide: impl FnOnce(&Session, &StudyRuntime, u64) -> Result<Vec<Event>, SessionError>,
        view: impl FnOnce(&Session, &StudyRuntime) -> Result<T, SessionError>,
    ) -> Result<T, SessionError> {
        let handle = self
            .sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(format!("session `{session_id}`")))?;
        let mut session = handle.lock();
        let study = self
            .studies
            .get(&session.study_id)
            .ok_or_else(|| SessionError::NotFound(format!("study `{}`", session.study_id)))?;
        let now = self.clock.now_ms();
        let events = decide(&session, study, now)?;
        if !events.is_empty() {
            let mut log = self.log.lock();
            for event in events {
                let record = log.append(event, now).map_err(unavailable)?;
                session.apply(&record.event, record.ts_ms)?;
            }
        }
        view(&session, study)
    }

    pub fn acknowledge(&self, session_id: &str) -> Result<(), SessionError> {
        self.mutate(session_id, |s, _, _| s.acknowledge(), |_, _| Ok(()))
    }

    pub fn current_trial(&self, session_id: &str) -> Result<TrialStatus, SessionError> {
        self.mutate(
            session_id,
            |s, _, _| s.present(),
            |s, study| {
                Ok(match s.current_index() {
                    Some(k) => TrialStatus::Trial {
                        trial: s.trial_view(k, &study.manifest.study),
                        coverage: s.coverage_status(k),
                    },
                    None => TrialStatus::Completed {
                        answered: s.answered(),
                        redeemed: s.phase == Phase::Redeemed,
                    },
                })
            },
        )
    }

    pub fn record_playback(
        &self,
        session_id: &str,
        trial_id: &str,
        events: &[PlaybackEvent],
    ) -> Result<CoverageStatus, SessionError> {
        self.mutate(
            session_id,
            |s, _, _| s.playback(trial_id, events),
            |s, _| {
                let k = s.trials.iter().position(|t| t.spec.trial_id == trial_id).expect("current trial");
                Ok(s.coverage_status(k))
            },
        )
    }

    pub fn submit_response(
        &self,
        session_id: &str,
        trial_id: &str,
        payload: ResponsePayload,
    ) -> Result<SubmitAck, SessionError> {
        self.mutate(
            session_id,
            |s, study, now| s.submit(trial_id, payload, &study.manifest.study, now),
            |s, study| {
                s.ack_for(trial_id, &study.manifest.study)
                    .ok_or_else(|| SessionError::Inconsistent("accepted response missing".into()))
            },
        )
    }

    pub fn complete_session(&self, session_id: &str) -> Result<Completion, SessionError> {
        let key = self.config.mac_key.clone();
        self.mutate(
            session_id,
            |s, _, _| s.complete(&key),
            |s, study| {
                let code = s.code.clone().ok_or_else(|| SessionError::Inconsistent("no code issued".into()))?;
                Ok(Completion {
                    redirect_url: redirect_url(&study.manifest.study.compensation_redirect, &code),
                    code,
                })
            },
        )
    }

    /// Accepted responses for a study, ordered by rater then trial position.
    pub fn responses(&self, study_id: &str) -> Vec<Response> {
        let mut sessions: Vec<Session> = self
            .sessions
            .read()
            .values()
            .map(|s| s.lock().clone())
            .filter(|s| s.study_id == study_id)
            .collect();
        sessions.sort_by(|a, b| a.rater_id.cmp(&b.rater_id));
        sessions.iter().flat_map(|s| s.responses().cloned()).collect()
    }

    pub fn export_rows(&self, study_id: &str) -> Result<Vec<ResultRow>, SessionError> {
        let study = self
            .studies
            .get(study_id)
            .ok_or_else(|| SessionError::NotFound(format!("study `{study_id}`")))?;
        let index: HashMap<&str, &Stimulus> = study
            .manifest
            .stimuli
            .iter()
            .map(|s| (s.stimulus_id.as_str(), s))
            .collect();
        let mut rows = Vec::new();
        for r in self.responses(study_id) {
            rows.extend(rows_for_response(&r, &index).map_err(|e| SessionError::Inconsistent(e.to_string()))?);
        }
        Ok(rows)
    }

    pub fn export_csv(&self, study_id: &str) -> Result<String, SessionError> {
        Ok(to_csv_string(&self.export_rows(study_id)?))
    }

    pub fn progress(&self, study_id: &str) -> Result<ProgressReport, SessionError> {
        let study = self
            .studies
            .get(study_id)
            .ok_or_else(|| SessionError::NotFound(format!("study `{study_id}`")))?;
        let s = &study.manifest.study;
        let mut funnel = Funnel::default();
        for session in self.sessions.read().values() {
            let session = session.lock();
            if session.study_id != study_id {
                continue;
            }
            funnel.created += 1;
            match session.phase {
                Phase::Completed => funnel.completed += 1,
                Phase::Redeemed => {
                    funnel.completed += 1;
                    funnel.redeemed += 1;
                }
                _ => funnel.in_progress += 1,
            }
        }
        let responses = self.responses(study_id);
        let set = ResponseSet::join(&responses, &study.manifest.stimuli)
            .map_err(|e| SessionError::Inconsistent(e.to_string()))?;

        let mut raters: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        let mut ratings: HashMap<&str, usize> = HashMap::new();
        for o in set.observations() {
            raters.entry(o.stimulus_id.as_str()).or_default().insert(o.rater_id.as_str());
            *ratings.entry(o.system.as_str()).or_default() += 1;
        }
        let mut systems = BTreeMap::new();
        for system in &s.systems {
            let stimuli: Vec<&Stimulus> = study.manifest.stimuli.iter().filter(|x| &x.system == system).collect();
            let min_raters = stimuli
                .iter()
                .map(|x| raters.get(x.stimulus_id.as_str()).map_or(0, BTreeSet::len))
                .min()
                .unwrap_or(0);
            systems.insert(
                system.clone(),
                SystemProgress {
                    stimuli: stimuli.len(),
                    ratings: ratings.get(system.as_str()).copied().unwrap_or(0),
                    min_raters_per_stimulus: min_raters,
                    target_met: !stimuli.is_empty() && min_raters >= s.min_raters_per_system as usize,
                },
            );
        }
        Ok(ProgressReport {
            study_id: study_id.to_string(),
            test_kind: s.test_kind,
            min_raters_per_system: s.min_raters_per_system,
            responses: responses.len(),
            rushed: flag_rushed(&set, s.min_decision_ms).len(),
            funnel,
            systems,
        })
    }

    /// Canonical JSON of every session, for comparing live and replayed state.
    pub fn snapshot(&self) -> String {
        let sessions: BTreeMap<String, Session> = self
            .sessions
            .read()
            .iter()
            .map(|(k, v)| (k.clone(), v.lock().clone()))
            .collect();
        serde_json::to_string(&sessions).expect("sessions serialize")
    }

    pub fn last_seq(&self) -> u64 {
        self.log.lock().last_seq()
    }
}
