//! Scripted raters that drive a [`Registry`] through complete sessions.
//!
//! Used for dry runs of a study configuration and by the test suites.

use std::collections::BTreeMap;

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Label, TestKind, HUMAN_SYSTEM};
use crate::session::{
    ManualClock, PlaybackEvent, Registry, ResponsePayload, SessionError, TrialStatus, TrialView,
};

#[derive(Debug, Clone)]
pub struct SimulationOptions {
    pub seed: u64,
    /// Probability of a `human` label per system; systems not listed use
    /// `default_human_rate`.
    pub human_rate: BTreeMap<String, f64>,
    pub default_human_rate: f64,
    /// Chance that a rater splits playback into overlapping chunks.
    pub chunked_playback: f64,
    /// Inclusive range of simulated thinking time after playback.
    pub decision_ms: (u64, u64),
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            seed: 0,
            human_rate: BTreeMap::from([(HUMAN_SYSTEM.to_string(), 0.75)]),
            default_human_rate: 0.5,
            chunked_playback: 0.3,
            decision_ms: (300, 4000),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimulationSummary {
    pub sessions: usize,
    pub responses: usize,
}

/// Runs every scheduled rater of `study_id` to redemption.
pub fn simulate_study(
    registry: &Registry,
    clock: &ManualClock,
    study_id: &str,
    opts: &SimulationOptions,
) -> Result<SimulationSummary, SessionError> {
    let study = registry
        .study(study_id)
        .ok_or_else(|| SessionError::NotFound(format!("study `{study_id}`")))?;
    let raters: Vec<String> = study
        .schedule
        .raters
        .iter()
        .filter(|(_, t)| !t.is_empty())
        .map(|(r, _)| r.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut summary = SimulationSummary::default();
    for rater in raters {
        summary.responses += simulate_rater(registry, clock, study_id, &rater, opts, &mut rng)?;
        summary.sessions += 1;
    }
    Ok(summary)
}

/// One rater from session creation to completion code; returns the number
/// of accepted responses.
pub fn simulate_rater(
    registry: &Registry,
    clock: &ManualClock,
    study_id: &str,
    rater_id: &str,
    opts: &SimulationOptions,
    rng: &mut impl Rng,
) -> Result<usize, SessionError> {
    let created = registry.create_session(study_id, rater_id, &format!("sim-{rater_id}"), None)?;
    let sid = created.session_id;
    clock.advance(rng.random_range(1000..20_000));
    registry.acknowledge(&sid)?;
    let mut answered = 0;
    while let TrialStatus::Trial { trial, .. } = registry.current_trial(&sid)? {
        clock.advance(rng.random_range(100..1500));
        play_trial(registry, clock, &sid, &trial, opts, rng)?;
        clock.advance(rng.random_range(opts.decision_ms.0..=opts.decision_ms.1));
        let mut payload = judge(registry, study_id, &trial, opts, rng);
        payload.client_ts_ms = Some(clock.now());
        registry.submit_response(&sid, &trial.trial_id, payload)?;
        answered += 1;
    }
    clock.advance(rng.random_range(500..5000));
    registry.complete_session(&sid)?;
    Ok(answered)
}

fn play_trial(
    registry: &Registry,
    clock: &ManualClock,
    sid: &str,
    trial: &TrialView,
    opts: &SimulationOptions,
    rng: &mut impl Rng,
) -> Result<(), SessionError> {
    let multi = trial.stimuli.len() > 1;
    for s in &trial.stimuli {
        let d = s.duration_ms;
        let stimulus_id = multi.then(|| s.stimulus_id.clone());
        let ev = |start: u64, end: u64, at: u64| PlaybackEvent {
            stimulus_id: stimulus_id.clone(),
            start_ms: start,
            end_ms: end,
            client_ts_ms: at,
            playback_rate: 1.0,
        };
        if d > 2 && rng.random_bool(opts.chunked_playback) {
            let cut = rng.random_range(1..d - 1);
            let overlap = rng.random_range(0..=cut.min(500));
            clock.advance(cut);
            registry.record_playback(sid, &trial.trial_id, &[ev(0, cut, clock.now())])?;
            clock.advance(d - cut + overlap);
            registry.record_playback(sid, &trial.trial_id, &[ev(cut - overlap, d, clock.now())])?;
        } else {
            clock.advance(d);
            registry.record_playback(sid, &trial.trial_id, &[ev(0, d, clock.now())])?;
        }
    }
    Ok(())
}

fn judge(
    registry: &Registry,
    study_id: &str,
    trial: &TrialView,
    opts: &SimulationOptions,
    rng: &mut impl Rng,
) -> ResponsePayload {
    let study = registry.study(study_id).expect("study exists");
    let system_of = |id: &str| study.stimulus(id).map(|s| s.system.clone()).unwrap_or_default();
    let rate = |system: &str| opts.human_rate.get(system).copied().unwrap_or(opts.default_human_rate);
    match trial.test_kind {
        TestKind::Mushra => ResponsePayload::scores(trial.stimuli.iter().map(|s| {
            let centre = rate(&system_of(&s.stimulus_id)) * 100.0;
            let score = (centre + rng.random_range(-20.0..=20.0)).clamp(0.0, 100.0).round() as i64;
            (s.stimulus_id.clone(), score)
        })),
        kind => {
            let system = system_of(&trial.stimuli[0].stimulus_id);
            let label = if rng.random_bool(rate(&system).clamp(0.0, 1.0)) {
                Label::Human
            } else {
                Label::Tts
            };
            let mut payload = ResponsePayload::label(label);
            if kind == TestKind::HfrGranular {
                let ids: Vec<String> = trial
                    .markers
                    .as_ref()
                    .map(|c| c.ids().map(str::to_string).collect())
                    .unwrap_or_default();
                payload.markers = Some(match label {
                    Label::Human => Vec::new(),
                    Label::Tts => {
                        let k = rng.random_range(1..=ids.len().clamp(1, 3));
                        let mut chosen = ids.into_iter().choose_multiple(rng, k);
                        chosen.sort();
                        chosen
                    }
                });
            }
            payload
        }
    }
}
