//! Fixtures and reusable checks shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use hfr_core::assignment::{build_trial_schedule, minimum_pool, TrialSchedule};
use hfr_core::domain::{
    Label, Manifest, MarkerCatalog, Origin, Stimulus, Study, TestKind, HUMAN_SYSTEM,
};
use hfr_core::session::{
    Event, ManualClock, Phase, PlaybackEvent, Registry, RegistryConfig, ResponsePayload,
    ScheduledStimulus, ScheduledTrial, Session, SessionError, StudyRuntime,
};
use hfr_core::storage::{EventLog, LogPayload, ResultRow};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const KEY: &[u8] = b"test-mac-key";

pub fn study(kind: TestKind, id: &str, systems: &[&str], utterances: u32, min_raters: u32) -> Study {
    let mut value = serde_json::json!({
        "study_id": id,
        "test_kind": kind,
        "systems": systems,
        "utterance_count": utterances,
        "min_raters_per_system": min_raters,
        "compensation_redirect": "https://crowd.example/complete?cc={code}",
    });
    if kind == TestKind::HfrGranular {
        value["marker_catalog"] = serde_json::to_value(MarkerCatalog::default()).unwrap();
    }
    serde_json::from_value(value).unwrap()
}

pub fn stimuli(systems: &[&str], utterances: u32) -> Vec<Stimulus> {
    let mut out = Vec::new();
    for system in systems {
        for u in 0..utterances {
            out.push(Stimulus {
                stimulus_id: format!("{system}-{u:02}"),
                system: system.to_string(),
                utterance_id: format!("utt-{u:02}"),
                origin: if *system == HUMAN_SYSTEM { Origin::Human } else { Origin::Machine },
                audio_ref: format!("audio/{system}-{u:02}.wav"),
                duration_ms: 1500 + u64::from(u) * 137 % 1000,
                prompt_utterance_id: None,
                tag: None,
            });
        }
    }
    out
}

pub fn manifest(kind: TestKind, id: &str, systems: &[&str], utterances: u32, min_raters: u32) -> Manifest {
    Manifest {
        study: study(kind, id, systems, utterances, min_raters),
        stimuli: stimuli(systems, utterances),
    }
}

pub fn runtime(m: &Manifest, pool: usize, seed: u64) -> StudyRuntime {
    let schedule = build_trial_schedule(&m.study, &m.stimuli, pool, seed).expect("feasible schedule");
    StudyRuntime::new(m.clone(), schedule).expect("valid runtime")
}

pub fn registry(studies: Vec<StudyRuntime>, log: EventLog<Event>, clock: Arc<ManualClock>) -> Registry {
    Registry::new(
        studies,
        log,
        clock,
        RegistryConfig {
            mac_key: KEY.to_vec(),
            ..Default::default()
        },
    )
    .unwrap()
}

/// A results row for a binary judgment.
pub fn hfr_row(study_id: &str, system: &str, index: usize, label: Label) -> ResultRow {
    ResultRow {
        study_id: study_id.into(),
        rater_id: format!("rater-{:04}", index % 30 + 1),
        session_id: format!("s-{index}"),
        trial_id: format!("t-{index}"),
        test_kind: TestKind::Hfr,
        system: system.into(),
        utterance_id: format!("utt-{:02}", index % 30),
        stimulus_id: format!("{system}-{:02}", index % 30),
        origin: if system == HUMAN_SYSTEM { Origin::Human } else { Origin::Machine },
        label: Some(label),
        markers: String::new(),
        mushra_score: None,
        response_time_ms: 5000,
        decision_time_ms: Some(1200),
        playback_verified: true,
        served_at: 1000,
        responded_at: 6000,
    }
}

/// `n` binary rows of which the first `humans` carry the human label.
pub fn labeled_rows(study_id: &str, system: &str, n: usize, humans: usize) -> Vec<ResultRow> {
    (0..n)
        .map(|i| hfr_row(study_id, system, i, if i < humans { Label::Human } else { Label::Tts }))
        .collect()
}

// ---------------------------------------------------------------------------
// Session model check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmd {
    Acknowledge,
    Present,
    Complete,
    PlayFull(usize),
    PlayHead(usize),
    PlayTail(usize),
    PlayGapped(usize),
    PlayFast(usize),
    Submit(usize),
}

pub const MODEL_DURATION_MS: u64 = 1000;

pub fn model_alphabet(trials: usize) -> Vec<Cmd> {
    let mut cmds = vec![Cmd::Acknowledge, Cmd::Present, Cmd::Complete];
    for t in 0..trials {
        cmds.extend([
            Cmd::PlayFull(t),
            Cmd::PlayHead(t),
            Cmd::PlayTail(t),
            Cmd::PlayGapped(t),
            Cmd::PlayFast(t),
            Cmd::Submit(t),
        ]);
    }
    cmds
}

pub fn model_session(trials: usize) -> Session {
    let created = Event::SessionCreated {
        session_id: "s-model".into(),
        study_id: "model".into(),
        rater_id: "rater-0001".into(),
        participant_id: "p".into(),
        crowd_session_id: None,
        tolerance_ms: 0,
        trials: (0..trials)
            .map(|i| ScheduledTrial {
                trial_id: format!("t{i}"),
                stimuli: vec![ScheduledStimulus {
                    stimulus_id: format!("x{i}"),
                    duration_ms: MODEL_DURATION_MS,
                }],
            })
            .collect(),
    };
    Session::from_created(&created, 0).unwrap()
}

fn pb(start: u64, end: u64, rate: f64) -> PlaybackEvent {
    PlaybackEvent {
        stimulus_id: None,
        start_ms: start,
        end_ms: end,
        client_ts_ms: 0,
        playback_rate: rate,
    }
}

/// Runs one command through decide and apply; returns the events applied.
pub fn step(session: &mut Session, study: &Study, cmd: Cmd) -> Result<Vec<Event>, SessionError> {
    let tid = |t: usize| format!("t{t}");
    let d = MODEL_DURATION_MS;
    let events = match cmd {
        Cmd::Acknowledge => session.acknowledge(),
        Cmd::Present => session.present(),
        Cmd::Complete => session.complete(KEY),
        Cmd::PlayFull(t) => session.playback(&tid(t), &[pb(0, d, 1.0)]),
        Cmd::PlayHead(t) => session.playback(&tid(t), &[pb(0, d / 2, 1.0)]),
        Cmd::PlayTail(t) => session.playback(&tid(t), &[pb(d / 2, d, 1.0)]),
        Cmd::PlayGapped(t) => session.playback(&tid(t), &[pb(0, 3 * d / 10, 1.0), pb(7 * d / 10, d, 1.0)]),
        Cmd::PlayFast(t) => session.playback(&tid(t), &[pb(0, d, 2.0)]),
        Cmd::Submit(t) => session.submit(&tid(t), ResponsePayload::label(Label::Human), study, 1000),
    }?;
    for e in &events {
        e.validate().map_err(SessionError::Inconsistent)?;
        session.apply(e, 1000)?;
    }
    Ok(events)
}

#[derive(Debug, Default, Clone)]
pub struct ModelReport {
    /// Command sequences of length up to the depth bound, all of which the
    /// search covers.
    pub sequences: u128,
    pub states: usize,
    pub transitions: usize,
    pub accepted_responses: usize,
    pub accepted_without_coverage: usize,
    pub completed_without_all_responses: usize,
    pub unverified_responses: usize,
    pub illegal_transitions: usize,
}

impl ModelReport {
    pub fn violations(&self) -> usize {
        self.accepted_without_coverage
            + self.completed_without_all_responses
            + self.unverified_responses
            + self.illegal_transitions
    }
}

fn phase_rank(p: Phase) -> (usize, usize) {
    match p {
        Phase::Created => (0, 0),
        Phase::Instructed => (1, 0),
        Phase::InTrial(k) => (2 + 2 * k, 0),
        Phase::AwaitingResponse(k) => (3 + 2 * k, 0),
        Phase::Completed => (1000, 0),
        Phase::Redeemed => (1001, 0),
    }
}

fn legal(from: Phase, to: Phase, trials: usize) -> bool {
    use Phase::*;
    from == to
        || matches!(
            (from, to),
            (Created, Instructed) | (Instructed, InTrial(0)) | (Completed, Redeemed)
        )
        || matches!((from, to), (InTrial(a), AwaitingResponse(b)) if a == b)
        || matches!((from, to), (AwaitingResponse(a), InTrial(b)) if b == a + 1)
        || matches!((from, to), (AwaitingResponse(a), Completed) if a + 1 == trials)
}

fn check_transition(before: &Session, after: &Session, events: &[Event], trials: usize, r: &mut ModelReport) {
    if !legal(before.phase, after.phase, trials) || phase_rank(after.phase) < phase_rank(before.phase) {
        r.illegal_transitions += 1;
    }
    for e in events {
        if let Event::ResponseAccepted { response, .. } = e {
            r.accepted_responses += 1;
            if !response.playback_verified {
                r.unverified_responses += 1;
            }
            let k = before
                .trials
                .iter()
                .position(|t| t.spec.trial_id == response.trial_id)
                .expect("known trial");
            let trial = &before.trials[k];
            let covered = trial.spec.stimuli.iter().all(|s| {
                trial.coverage[&s.stimulus_id].covered_ms() >= s.duration_ms.saturating_sub(before.tolerance_ms)
            });
            if !covered {
                r.accepted_without_coverage += 1;
            }
        }
    }
    if matches!(after.phase, Phase::Completed | Phase::Redeemed) && after.answered() != trials {
        r.completed_without_all_responses += 1;
    }
}

/// Explores every command sequence up to `depth` on a session with `trials`
/// single-stimulus trials. States reached again with no more remaining
/// budget than before are not re-expanded, which keeps the search exact.
pub fn model_check(trials: usize, depth: usize) -> ModelReport {
    let study = study(TestKind::Hfr, "model", &["human", "tts"], 1, 1);
    let alphabet = model_alphabet(trials);
    let mut report = ModelReport {
        sequences: (0..=depth as u32).map(|k| (alphabet.len() as u128).pow(k)).sum(),
        ..Default::default()
    };
    let mut best: HashMap<String, usize> = HashMap::new();
    let mut stack = vec![(model_session(trials), depth)];
    while let Some((session, remaining)) = stack.pop() {
        let key = serde_json::to_string(&session).unwrap();
        if best.get(&key).is_some_and(|&r| r >= remaining) {
            continue;
        }
        best.insert(key, remaining);
        if remaining == 0 {
            continue;
        }
        for &cmd in &alphabet {
            let mut next = session.clone();
            report.transitions += 1;
            match step(&mut next, &study, cmd) {
                Ok(events) => {
                    check_transition(&session, &next, &events, trials, &mut report);
                    stack.push((next, remaining - 1));
                }
                Err(SessionError::Inconsistent(_)) => report.illegal_transitions += 1,
                Err(_) => {}
            }
        }
    }
    report.states = best.len();
    report
}

/// Plain depth-first enumeration of every sequence, without state merging.
pub fn brute_force(trials: usize, depth: usize) -> (ModelReport, HashSet<String>) {
    let study = study(TestKind::Hfr, "model", &["human", "tts"], 1, 1);
    let alphabet = model_alphabet(trials);
    let mut report = ModelReport::default();
    let mut seen = HashSet::new();
    fn go(
        s: &Session,
        depth: usize,
        alphabet: &[Cmd],
        study: &Study,
        trials: usize,
        report: &mut ModelReport,
        seen: &mut HashSet<String>,
    ) {
        report.sequences += 1;
        seen.insert(serde_json::to_string(s).unwrap());
        if depth == 0 {
            return;
        }
        for &cmd in alphabet {
            let mut next = s.clone();
            report.transitions += 1;
            match step(&mut next, study, cmd) {
                Ok(events) => check_transition(s, &next, &events, trials, report),
                Err(SessionError::Inconsistent(_)) => report.illegal_transitions += 1,
                Err(_) => {}
            }
            go(&next, depth - 1, alphabet, study, trials, report, seen);
        }
    }
    go(&model_session(trials), depth, &alphabet, &study, trials, &mut report, &mut seen);
    (report, seen)
}

// ---------------------------------------------------------------------------
// Randomized multi-session driver
// ---------------------------------------------------------------------------

/// Takes one plausible (sometimes deliberately wrong) action for a session.
/// Returns false once the session has nothing further to do.
pub fn random_action(registry: &Registry, clock: &ManualClock, sid: &str, rng: &mut impl Rng) -> bool {
    clock.advance(rng.random_range(50..3000));
    let session = registry.session(sid).expect("session exists");
    let study = registry.study(&session.study_id).expect("study exists").manifest.study.clone();
    match session.phase {
        Phase::Created => {
            if rng.random_bool(0.2) {
                assert_eq!(registry.current_trial(sid).unwrap_err(), SessionError::InstructionsPending);
            } else {
                registry.acknowledge(sid).unwrap();
            }
            true
        }
        Phase::Instructed => {
            registry.current_trial(sid).unwrap();
            true
        }
        Phase::InTrial(k) | Phase::AwaitingResponse(k) => {
            let trial = session.trials[k].clone();
            let tid = trial.spec.trial_id.clone();
            let multi = trial.spec.stimuli.len() > 1;
            let roll: f64 = rng.random();
            if roll < 0.15 {
                // submit regardless of coverage; rejected unless covered
                let payload = payload_for(&study, &trial.spec, rng);
                let result = registry.submit_response(sid, &tid, payload);
                if matches!(session.phase, Phase::InTrial(_)) {
                    assert!(matches!(result, Err(SessionError::PlaybackIncomplete { .. })), "{result:?}");
                }
            } else if roll < 0.22 {
                let s = trial.spec.stimuli.choose(rng).unwrap();
                let bad = PlaybackEvent {
                    stimulus_id: multi.then(|| s.stimulus_id.clone()),
                    start_ms: 0,
                    end_ms: s.duration_ms,
                    client_ts_ms: clock.now(),
                    playback_rate: *[0.5, 1.25, 2.0].choose(rng).unwrap(),
                };
                assert!(matches!(
                    registry.record_playback(sid, &tid, &[bad]),
                    Err(SessionError::PlaybackRejected { .. })
                ));
            } else if roll < 0.25 && k > 0 {
                // replay the previous answer, which must be idempotent
                let prev = session.trials[k - 1].clone();
                let first = session.ack_for(&prev.spec.trial_id, &study).unwrap();
                let again = registry
                    .submit_response(sid, &prev.spec.trial_id, payload_for(&study, &prev.spec, rng))
                    .unwrap();
                assert_eq!(first, again);
            } else if matches!(session.phase, Phase::AwaitingResponse(_)) && roll < 0.85 {
                let mut payload = payload_for(&study, &trial.spec, rng);
                payload.client_ts_ms = Some(clock.now());
                registry.submit_response(sid, &tid, payload).unwrap();
            } else {
                let s = trial.spec.stimuli.choose(rng).unwrap();
                let d = s.duration_ms;
                let a = rng.random_range(0..d);
                let b = if rng.random_bool(0.5) { d } else { rng.random_range(a + 1..=d) };
                let ev = PlaybackEvent {
                    stimulus_id: multi.then(|| s.stimulus_id.clone()),
                    start_ms: a,
                    end_ms: b,
                    client_ts_ms: clock.now(),
                    playback_rate: 1.0,
                };
                registry.record_playback(sid, &tid, &[ev]).unwrap();
            }
            true
        }
        Phase::Completed => {
            registry.complete_session(sid).unwrap();
            true
        }
        Phase::Redeemed => {
            let again = registry.complete_session(sid).unwrap();
            assert_eq!(Some(again.code), session.code);
            false
        }
    }
}

pub fn payload_for(study: &Study, trial: &ScheduledTrial, rng: &mut impl Rng) -> ResponsePayload {
    match study.test_kind {
        TestKind::Mushra => ResponsePayload::scores(
            trial
                .stimuli
                .iter()
                .map(|s| (s.stimulus_id.clone(), rng.random_range(0..=100))),
        ),
        TestKind::Hfr => ResponsePayload::label(if rng.random_bool(0.5) { Label::Human } else { Label::Tts }),
        TestKind::HfrGranular => {
            if rng.random_bool(0.4) {
                ResponsePayload::granular(Label::Human, &[])
            } else {
                let catalog = study.marker_catalog.clone().unwrap();
                let mut ids: Vec<&str> = catalog.ids().collect();
                ids.shuffle(rng);
                let k = rng.random_range(1..=3);
                ResponsePayload::granular(Label::Tts, &ids[..k])
            }
        }
    }
}

/// Three studies (one per test kind) whose combined schedule has `sessions`
/// raters' worth of pools.
pub fn mixed_studies(seed: u64) -> (Vec<Manifest>, Vec<usize>) {
    let hfr = manifest(TestKind::Hfr, "es-hfr", &["human", "xtts", "styletts2"], 6, 10);
    let granular = manifest(TestKind::HfrGranular, "es-granular", &["human", "xtts"], 6, 10);
    let mut mushra = manifest(TestKind::Mushra, "es-mushra", &["human", "xtts", "anchor"], 4, 10);
    mushra.study.rng_seed = seed;
    (vec![hfr, granular, mushra], vec![100, 60, 40])
}

#[derive(Debug)]
pub struct EventSourcingReport {
    pub sessions: usize,
    pub records: u64,
    pub responses: usize,
    pub state_identical: bool,
    pub csv_identical: bool,
    pub tail_halt_seq: Option<u64>,
    pub tail_recovered_identical: bool,
    pub flipped_halt_seq: Option<u64>,
}

/// Drives `mixed_studies` through randomly interleaved sessions on a file
/// log, then rebuilds everything from the file and compares.
pub fn event_sourcing_check(dir: &Path, seed: u64) -> EventSourcingReport {
    use hfr_core::storage::replay_file;

    let (manifests, pools) = mixed_studies(seed);
    let runtimes = || -> Vec<StudyRuntime> {
        manifests
            .iter()
            .zip(&pools)
            .enumerate()
            .map(|(i, (m, &p))| runtime(m, p, seed + i as u64))
            .collect()
    };
    let path = dir.join("events.log");
    let (log, existing) = EventLog::<Event>::open(&path).unwrap();
    assert!(existing.is_empty());
    let clock = Arc::new(ManualClock::new(1_700_000_000_000));
    let live = registry(runtimes(), log, clock.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pending: Vec<(String, String)> = Vec::new();
    for (m, _) in manifests.iter().zip(&pools) {
        for (rater, trials) in &live.study(&m.study.study_id).unwrap().schedule.raters {
            if trials.is_empty() {
                continue;
            }
            pending.push((m.study.study_id.clone(), rater.clone()));
        }
    }
    pending.shuffle(&mut rng);
    let sessions = pending.len();
    // each session stops after a random budget; about a third never finish
    let mut active: Vec<(String, usize)> = Vec::new();
    let mut pending = pending.into_iter();
    loop {
        while active.len() < 12 {
            let Some((study_id, rater)) = pending.next() else { break };
            let created = live.create_session(&study_id, &rater, &format!("p-{rater}"), Some("crowd-1")).unwrap();
            let budget = if rng.random_bool(0.35) { rng.random_range(0..40) } else { usize::MAX };
            active.push((created.session_id, budget));
        }
        if active.is_empty() {
            break;
        }
        let i = rng.random_range(0..active.len());
        let (sid, budget) = &mut active[i];
        let more = *budget > 0 && random_action(&live, &clock, sid, &mut rng);
        *budget = budget.saturating_sub(1);
        if !more {
            active.swap_remove(i);
        }
    }
    let records = live.last_seq();
    let live_snapshot = live.snapshot();
    let live_csv: Vec<String> = manifests
        .iter()
        .map(|m| live.export_csv(&m.study.study_id).unwrap())
        .collect();
    let responses = manifests.iter().map(|m| live.responses(&m.study.study_id).len()).sum();

    let (log, recs) = EventLog::<Event>::open(&path).unwrap();
    let replayed = Registry::recover(
        runtimes(),
        log,
        recs,
        clock.clone(),
        RegistryConfig {
            mac_key: KEY.to_vec(),
            ..Default::default()
        },
    )
    .unwrap();
    let state_identical = replayed.snapshot() == live_snapshot;
    let csv_identical = manifests
        .iter()
        .zip(&live_csv)
        .all(|(m, csv)| &replayed.export_csv(&m.study.study_id).unwrap() == csv);
    drop(replayed);

    // torn final write: the last record is cut in half
    let bytes = std::fs::read(&path).unwrap();
    let last_start = bytes[..bytes.len() - 1].iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
    let torn = dir.join("torn.log");
    std::fs::write(&torn, &bytes[..last_start + (bytes.len() - last_start) / 2]).unwrap();
    let mut tail_halt_seq = None;
    let mut good = Vec::new();
    for r in replay_file::<Event>(&torn, 1).unwrap() {
        match r {
            Ok(rec) => good.push(rec),
            Err(halt) => tail_halt_seq = Some(halt.last_good_seq),
        }
    }
    let expect = Registry::recover(runtimes(), EventLog::in_memory(), good, clock.clone(), RegistryConfig {
        mac_key: KEY.to_vec(),
        ..Default::default()
    })
    .unwrap()
    .snapshot();
    let (log, recs) = EventLog::<Event>::open(&torn).unwrap();
    let reopened_last = log.last_seq();
    let recovered = Registry::recover(runtimes(), log, recs, clock.clone(), RegistryConfig {
        mac_key: KEY.to_vec(),
        ..Default::default()
    })
    .unwrap();
    let tail_recovered_identical = recovered.snapshot() == expect && reopened_last + 1 == records;

    // a flipped byte inside the final record
    let mut flipped_bytes = bytes.clone();
    let pos = last_start + (bytes.len() - last_start) / 2;
    flipped_bytes[pos] ^= 0x01;
    let flipped = dir.join("flipped.log");
    std::fs::write(&flipped, &flipped_bytes).unwrap();
    let flipped_halt_seq = replay_file::<Event>(&flipped, 1)
        .unwrap()
        .find_map(|r| r.err())
        .map(|h| h.last_good_seq);

    EventSourcingReport {
        sessions,
        records,
        responses,
        state_identical,
        csv_identical,
        tail_halt_seq,
        tail_recovered_identical,
        flipped_halt_seq,
    }
}

// ---------------------------------------------------------------------------
// Assignment properties
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct ScheduleCheck {
    pub failures: Vec<String>,
}

/// Checks coverage, balance, no-repeat and determinism for one study.
pub fn check_schedule(m: &Manifest, pool: usize, seed: u64) -> Vec<String> {
    let mut failures = Vec::new();
    let id = &m.study.study_id;
    let schedule = match build_trial_schedule(&m.study, &m.stimuli, pool, seed) {
        Ok(s) => s,
        Err(e) => return vec![format!("{id}: {e}")],
    };
    let again = build_trial_schedule(&m.study, &m.stimuli, pool, seed).unwrap();
    if schedule.to_json() != again.to_json() {
        failures.push(format!("{id}: schedule JSON differs between runs"));
    }
    if TrialSchedule::from_json(&schedule.to_json()).as_ref() != Ok(&schedule) {
        failures.push(format!("{id}: schedule does not round-trip"));
    }
    let by_id: HashMap<&str, &Stimulus> = m.stimuli.iter().map(|s| (s.stimulus_id.as_str(), s)).collect();
    let mut raters_per_stimulus: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut counts = Vec::new();
    for (rater, trials) in &schedule.raters {
        counts.push(trials.len());
        let mut seen = HashSet::new();
        let mut utterances: HashMap<&str, usize> = HashMap::new();
        for t in trials {
            if m.study.test_kind == TestKind::Mushra {
                let utts: BTreeSet<&str> = t.stimulus_ids.iter().map(|s| by_id[s.as_str()].utterance_id.as_str()).collect();
                if utts.len() != 1 || t.stimulus_ids.len() != m.study.systems.len() {
                    failures.push(format!("{id}: MUSHRA trial {} mixes utterances or misses systems", t.trial_id));
                }
            } else if t.stimulus_ids.len() != 1 {
                failures.push(format!("{id}: binary trial {} has {} stimuli", t.trial_id, t.stimulus_ids.len()));
            }
            for s in &t.stimulus_ids {
                if !seen.insert(s.as_str()) {
                    failures.push(format!("{id}: {rater} sees {s} twice"));
                }
                raters_per_stimulus.entry(s.as_str()).or_default().insert(rater.as_str());
            }
            let u = by_id[t.stimulus_ids[0].as_str()].utterance_id.as_str();
            *utterances.entry(u).or_default() += 1;
        }
        if m.study.one_rendition_per_utterance() {
            if let Some((u, n)) = utterances.iter().find(|(_, n)| **n > 1) {
                failures.push(format!("{id}: {rater} hears utterance {u} {n} times"));
            }
        }
    }
    let (lo, hi) = (counts.iter().min().copied().unwrap_or(0), counts.iter().max().copied().unwrap_or(0));
    if hi - lo > 1 {
        failures.push(format!("{id}: trial counts range {lo}..{hi}"));
    }
    for s in &m.stimuli {
        let n = raters_per_stimulus.get(s.stimulus_id.as_str()).map_or(0, BTreeSet::len);
        if n < m.study.min_raters_per_system as usize {
            failures.push(format!("{id}: {} has {n} raters", s.stimulus_id));
        }
    }
    if schedule.raters.len() != pool {
        failures.push(format!("{id}: {} raters for pool {pool}", schedule.raters.len()));
    }
    failures
}

/// A random valid study and a feasible pool for it.
pub fn random_study(rng: &mut impl Rng, index: usize) -> (Manifest, usize) {
    let kind = *[TestKind::Hfr, TestKind::HfrGranular, TestKind::Mushra].choose(rng).unwrap();
    let tts = rng.random_range(1..=4);
    let mut systems = vec!["human".to_string()];
    systems.extend((0..tts).map(|i| format!("sys{i}")));
    let refs: Vec<&str> = systems.iter().map(String::as_str).collect();
    let utterances = rng.random_range(1..=8);
    let min_raters = rng.random_range(1..=6);
    let mut m = manifest(kind, &format!("random-{index}"), &refs, utterances, min_raters);
    if kind != TestKind::Mushra && rng.random_bool(0.3) {
        m.study.assignment.one_rendition_per_utterance = Some(false);
    }
    if rng.random_bool(0.3) {
        m.study.assignment.ordering = hfr_core::domain::TrialOrdering::Uniform;
    }
    let minimum = minimum_pool(&m.study, &m.stimuli);
    let pool = minimum + rng.random_range(0..=minimum.max(1) * 2);
    (m, pool)
}

// ---------------------------------------------------------------------------
// Statistics properties
// ---------------------------------------------------------------------------

pub mod stats_checks {
    use std::collections::{BTreeMap, BTreeSet};

    use hfr_core::domain::{Label, MarkerCatalog, Origin, TestKind, HUMAN_SYSTEM};
    use hfr_core::stats::{
        compute_ci, compute_ci_with, compute_hfr, compute_marker_rates, compute_mushra, hfr_table,
        row_mean, timing_stats, CiMethod, CiOptions, CohortMap, Filter, GroupKey, MushraOptions,
        Observation, ResponseSet,
    };
    use num_rational::Ratio;
    use rand::seq::SliceRandom;
    use rand::Rng;

    pub fn observation(kind: TestKind, system: &str, rater: usize, index: usize) -> Observation {
        Observation {
            study_id: format!("study-{}", index % 3),
            rater_id: format!("rater-{rater:04}"),
            session_id: format!("s-{rater}"),
            trial_id: format!("t-{index}"),
            test_kind: kind,
            system: system.to_string(),
            origin: if system == HUMAN_SYSTEM { Origin::Human } else { Origin::Machine },
            tag: Some(format!("tag-{}", index % 2)),
            utterance_id: format!("utt-{}", index % 7),
            stimulus_id: format!("{system}-{}", index % 7),
            label: None,
            markers: BTreeSet::new(),
            mushra_score: None,
            response_time_ms: 0,
            decision_time_ms: None,
            trial_size: 1,
        }
    }

    fn ratio_f64(r: Ratio<u64>) -> f64 {
        *r.numer() as f64 / *r.denom() as f64
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    /// Random binary observations across systems with known counts.
    fn binary_fixture(rng: &mut impl Rng) -> (Vec<Observation>, BTreeMap<String, (u64, u64)>) {
        let systems = rng.random_range(1..=5);
        let mut obs = Vec::new();
        let mut counts = BTreeMap::new();
        for s in 0..systems {
            let name = if s == 0 { HUMAN_SYSTEM.to_string() } else { format!("sys{s}") };
            let n = rng.random_range(1..=120u64);
            let humans = rng.random_range(0..=n);
            for i in 0..n {
                let mut o = observation(TestKind::HfrGranular, &name, i as usize % 13, obs.len());
                o.label = Some(if i < humans { Label::Human } else { Label::Tts });
                if o.label == Some(Label::Tts) {
                    for m in ["unnatural_pauses", "flat_monotonic", "digital_artifacts"] {
                        if rng.random_bool(0.4) {
                            o.markers.insert(m.to_string());
                        }
                    }
                }
                o.response_time_ms = rng.random_range(200..60_000);
                o.decision_time_ms = Some(rng.random_range(0..5_000));
                o.trial_size = rng.random_range(1..=4);
                obs.push(o);
            }
            counts.insert(name, (humans, n));
        }
        (obs, counts)
    }

    /// Checks pooling against exact rational arithmetic, permutation
    /// invariance and determinism over `fixtures` random cases.
    pub fn check(rng: &mut impl Rng, fixtures: usize) -> Vec<String> {
        let mut failures = Vec::new();
        let ci = CiOptions::default();
        let catalog = MarkerCatalog::default();
        for case in 0..fixtures {
            let (mut obs, counts) = binary_fixture(rng);
            let set = ResponseSet::from_observations(obs.clone());

            // pooled estimate equals total humans over total responses
            let (h, n) = counts.values().fold((0, 0), |(a, b), (h, n)| (a + h, b + n));
            let pooled = compute_hfr(&set, &Filter::all(), ci).unwrap();
            let oracle = ratio_f64(Ratio::new(100 * h, n));
            if !close(pooled.estimate_pct, oracle) || pooled.n != n {
                failures.push(format!("case {case}: pooled {} vs {oracle}", pooled.estimate_pct));
            }
            // and the n-weighted mean of the per-system estimates
            let weighted = counts
                .values()
                .fold(Ratio::new(0, 1), |acc, (h, n)| acc + Ratio::new(100 * h, *n) * Ratio::from(*n))
                / Ratio::from(n);
            if !close(pooled.estimate_pct, ratio_f64(weighted)) {
                failures.push(format!("case {case}: pooled differs from weighted mean"));
            }
            for (system, (h, n)) in &counts {
                let r = compute_hfr(&set, &Filter::all().system(system), ci).unwrap();
                if !close(r.estimate_pct, ratio_f64(Ratio::new(100 * h, *n))) {
                    failures.push(format!("case {case}: {system} estimate {}", r.estimate_pct));
                }
                if !(r.ci_low_pct <= r.estimate_pct && r.estimate_pct <= r.ci_high_pct)
                    || r.ci_low_pct < 0.0
                    || r.ci_high_pct > 100.0
                {
                    failures.push(format!("case {case}: {system} interval {r:?}"));
                }
            }

            // row mean equals the unweighted mean of its cells
            let table = hfr_table(&set, GroupKey::System, GroupKey::Tag, ci).unwrap();
            for row in &table.rows {
                let cells: Vec<f64> = row.cells.iter().flatten().map(|c| c.estimate_pct).collect();
                let mut exact = Ratio::new(0u64, 1);
                for c in row.cells.iter().flatten() {
                    let humans = (c.estimate_pct * c.n as f64 / 100.0).round() as u64;
                    exact += Ratio::new(100 * humans, c.n);
                }
                let exact = ratio_f64(exact / Ratio::from(cells.len() as u64));
                if !row.mean_pct.is_some_and(|m| close(m, exact)) || row_mean(&cells) != row.mean_pct {
                    failures.push(format!("case {case}: row {} mean {:?} vs {exact}", row.label, row.mean_pct));
                }
            }

            // marker rates count over every admissible response in the cohort
            let markers = compute_marker_rates(&set, &catalog, &CohortMap::new()).unwrap();
            for cohort in &markers.cohorts {
                let members: Vec<&Observation> = obs.iter().filter(|o| o.system == cohort.cohort).collect();
                for id in catalog.ids() {
                    let hits = members.iter().filter(|o| o.markers.contains(id)).count() as u64;
                    let exact = ratio_f64(Ratio::new(100 * hits, members.len() as u64));
                    if !close(cohort.rates[id], exact) {
                        failures.push(format!("case {case}: marker {id} rate {} vs {exact}", cohort.rates[id]));
                    }
                }
            }

            // timing is the mean of per-sample seconds
            let timing = timing_stats(&set, GroupKey::System).unwrap();
            for (system, summary) in &timing {
                let members: Vec<&Observation> = obs.iter().filter(|o| &o.system == system).collect();
                let exact = members
                    .iter()
                    .fold(Ratio::new(0u64, 1), |acc, o| acc + Ratio::new(o.response_time_ms, 1000 * o.trial_size as u64))
                    / Ratio::from(members.len() as u64);
                if !close(summary.mean_s, ratio_f64(exact)) {
                    failures.push(format!("case {case}: timing {system} {} vs {}", summary.mean_s, ratio_f64(exact)));
                }
            }

            // every aggregate is invariant under reordering and repeatable
            obs.shuffle(rng);
            let shuffled = ResponseSet::from_observations(obs.clone());
            if compute_hfr(&shuffled, &Filter::all(), ci).unwrap() != pooled
                || hfr_table(&shuffled, GroupKey::System, GroupKey::Tag, ci).unwrap() != table
                || compute_marker_rates(&shuffled, &catalog, &CohortMap::new()).unwrap() != markers
                || timing_stats(&shuffled, GroupKey::System).unwrap() != timing
                || hfr_table(&set, GroupKey::System, GroupKey::Tag, ci).unwrap() != table
            {
                failures.push(format!("case {case}: binary aggregate depends on order"));
            }

            let mushra = mushra_fixture(rng);
            let set = ResponseSet::from_observations(mushra.clone());
            let opts = MushraOptions::default();
            let report = compute_mushra(&set, &opts).unwrap();
            for (system, summary) in &report.systems {
                let scores: Vec<u64> = mushra
                    .iter()
                    .filter(|o| &o.system == system)
                    .map(|o| u64::from(o.mushra_score.unwrap()))
                    .collect();
                let exact = ratio_f64(Ratio::new(scores.iter().sum(), scores.len() as u64));
                if !close(summary.mean, exact) || summary.n != scores.len() as u64 {
                    failures.push(format!("case {case}: MUSHRA {system} mean {} vs {exact}", summary.mean));
                }
            }
            let mut reordered = mushra;
            reordered.shuffle(rng);
            if compute_mushra(&ResponseSet::from_observations(reordered), &opts).unwrap() != report {
                failures.push(format!("case {case}: MUSHRA depends on order"));
            }
        }
        failures.extend(ci_monotonicity());
        failures
    }

    fn mushra_fixture(rng: &mut impl Rng) -> Vec<Observation> {
        let mut out = Vec::new();
        let raters = rng.random_range(1..=20);
        for r in 0..raters {
            for (k, system) in [HUMAN_SYSTEM, "xtts", "anchor"].iter().enumerate() {
                let mut o = observation(TestKind::Mushra, system, r, r * 3 + k);
                o.mushra_score = Some(rng.random_range(0..=100));
                o.trial_size = 3;
                o.response_time_ms = rng.random_range(1_000..90_000);
                out.push(o);
            }
        }
        out
    }

    /// Interval width shrinks with n and grows with confidence.
    pub fn ci_monotonicity() -> Vec<String> {
        let mut failures = Vec::new();
        for method in [CiMethod::Wald, CiMethod::Wilson] {
            for p in [5.0, 25.0, 50.0, 78.0, 95.0] {
                let width = |n: u64, confidence: f64| {
                    let (lo, hi) = compute_ci_with(p, n, CiOptions { method, confidence }).unwrap();
                    hi - lo
                };
                for n in [10u64, 20, 50, 100, 400, 900, 5_000] {
                    if width(n * 2, 0.95) > width(n, 0.95) + 1e-12 {
                        failures.push(format!("{method:?} p={p}: width grows from n={n} to {}", n * 2));
                    }
                    let widths: Vec<f64> = [0.8, 0.9, 0.95, 0.99].iter().map(|c| width(n, *c)).collect();
                    if widths.windows(2).any(|w| w[1] + 1e-12 < w[0]) {
                        failures.push(format!("{method:?} p={p} n={n}: width falls with confidence"));
                    }
                }
            }
        }
        for n in [1u64, 10, 900] {
            if compute_ci(100.0, n, 0.95).unwrap() != (100.0, 100.0) || compute_ci(0.0, n, 0.95).unwrap() != (0.0, 0.0) {
                failures.push(format!("degenerate interval at n={n}"));
            }
        }
        failures
    }
}

// ---------------------------------------------------------------------------
// Interval merging
// ---------------------------------------------------------------------------

/// Named coverage cases with the expected covered milliseconds.
pub fn interval_merge_failures() -> Vec<String> {
    use hfr_core::session::Coverage;
    type Case = (&'static str, &'static [(u64, u64)], u64);
    let cases: &[Case] = &[
        ("disjoint", &[(0, 100), (200, 300)], 200),
        ("overlapping", &[(0, 150), (100, 300)], 300),
        ("duplicate", &[(0, 500), (0, 500), (0, 500)], 500),
        ("out-of-order", &[(600, 1000), (0, 300), (250, 650)], 1000),
        ("adjacent", &[(0, 100), (100, 200)], 200),
        ("nested", &[(0, 1000), (200, 300)], 1000),
        ("bridging", &[(0, 100), (300, 400), (50, 350)], 400),
    ];
    let mut failures = Vec::new();
    for (name, intervals, expected) in cases {
        let mut forward = Coverage::new();
        let mut backward = Coverage::new();
        for &(a, b) in intervals.iter() {
            forward.add(a, b);
        }
        for &(a, b) in intervals.iter().rev() {
            backward.add(a, b);
        }
        if forward.covered_ms() != *expected || backward.covered_ms() != *expected {
            failures.push(format!(
                "{name}: covered {} / {} ms, expected {expected}",
                forward.covered_ms(),
                backward.covered_ms()
            ));
        }
        if forward.intervals() != backward.intervals() {
            failures.push(format!("{name}: merged intervals depend on order"));
        }
        if forward.intervals().windows(2).any(|w| w[0].end_ms >= w[1].start_ms) {
            failures.push(format!("{name}: intervals left unmerged"));
        }
    }
    let mut c = Coverage::new();
    c.add(0, 750);
    if !c.is_complete(1000, 250) || c.is_complete(1001, 250) {
        failures.push("tolerance boundary".into());
    }
    failures
}

// ---------------------------------------------------------------------------
// End-to-end command line
// ---------------------------------------------------------------------------

pub fn hfr(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["hfr"];
    argv.extend_from_slice(args);
    let code = hfr_core::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[derive(Debug, Default)]
pub struct EndToEnd {
    pub compared_values: usize,
    pub failures: Vec<String>,
}

fn compare_printed(report: &mut EndToEnd, id: &str, what: String, printed: &serde_json::Value, expected: f64) {
    use hfr_core::report::round_half_up;
    let got = printed.as_f64().map(|v| round_half_up(v, 2));
    if got.as_deref() != Some(round_half_up(expected, 2).as_str()) {
        report.failures.push(format!("{id} {what}: printed {got:?}, in-process {expected}"));
    }
    report.compared_values += 1;
}

/// manifest, validate, schedule, simulate, export and report through the
/// command line, compared with the statistics computed in process.
pub fn end_to_end(dir: &Path) -> EndToEnd {
    use hfr_core::report::round_half_up;
    use hfr_core::service::{replay_registry, ServiceConfig};
    use hfr_core::stats::{compute_marker_rates, hfr_table, CiOptions, CohortMap, GroupKey, ResponseSet};

    let mut report = EndToEnd::default();
    let fail = |r: &mut EndToEnd, m: String| r.failures.push(m);
    let studies = [
        manifest(TestKind::Hfr, "e2e-hfr", &["human", "xtts", "styletts2"], 5, 6),
        manifest(TestKind::HfrGranular, "e2e-granular", &["human", "xtts"], 5, 6),
    ];
    let mut toml = format!("data_dir = \"{}\"\nmac_key = \"e2e-key\"\n", path_str(&dir.join("data")));
    for m in &studies {
        let id = &m.study.study_id;
        let manifest_path = dir.join(format!("{id}.json"));
        std::fs::write(&manifest_path, m.to_json()).unwrap();
        let (code, out, err) = hfr(&["validate", "--manifest", path_str(&manifest_path)]);
        if code != 0 || !out.is_empty() {
            fail(&mut report, format!("validate {id}: exit {code}: {out}{err}"));
        }
        let pool = minimum_pool(&m.study, &m.stimuli) + 3;
        let schedule_path = dir.join(format!("{id}.schedule.json"));
        let pool_arg = pool.to_string();
        let (code, _, err) = hfr(&[
            "schedule",
            "--manifest",
            path_str(&manifest_path),
            "--pool",
            &pool_arg,
            "--seed",
            "5",
            "--out",
            path_str(&schedule_path),
        ]);
        if code != 0 {
            fail(&mut report, format!("schedule {id}: exit {code}: {err}"));
        }
        toml.push_str(&format!(
            "\n[[studies]]\nmanifest = \"{}\"\nschedule = \"{}\"\n",
            path_str(&manifest_path),
            path_str(&schedule_path)
        ));
    }
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, &toml).unwrap();
    let (code, out, err) = hfr(&["simulate", "--config", path_str(&config_path), "--seed", "17", "--human-rate", "xtts=0.6"]);
    if code != 0 {
        fail(&mut report, format!("simulate: exit {code}: {err}"));
    }
    if out.lines().count() != studies.len() {
        fail(&mut report, format!("simulate summary: {out}"));
    }

    let config = ServiceConfig::load(&config_path).unwrap();
    let (registry, halted) = replay_registry(&config).unwrap();
    if halted.is_some() {
        fail(&mut report, "replay halted on a clean log".into());
    }
    for m in &studies {
        let id = &m.study.study_id;
        let csv_path = dir.join(format!("{id}.csv"));
        let (code, _, err) = hfr(&["export", "--config", path_str(&config_path), "--study", id, "--out", path_str(&csv_path)]);
        if code != 0 {
            fail(&mut report, format!("export {id}: exit {code}: {err}"));
            continue;
        }
        if std::fs::read_to_string(&csv_path).unwrap() != registry.export_csv(id).unwrap() {
            fail(&mut report, format!("export {id}: CSV differs from in-process export"));
        }
        let set = ResponseSet::join(&registry.responses(id), &m.stimuli).unwrap();
        if set.is_empty() {
            fail(&mut report, format!("{id}: no responses simulated"));
            continue;
        }
        let (code, out, err) = hfr(&["report", "--results", path_str(&csv_path), "--report", "hfr-table", "--format", "json"]);
        if code != 0 {
            fail(&mut report, format!("report {id}: exit {code}: {err}"));
            continue;
        }
        let printed: serde_json::Value = serde_json::from_str(&out).unwrap();
        let table = hfr_table(&set, GroupKey::System, GroupKey::StudyId, CiOptions::default()).unwrap();
        for row in &table.rows {
            let printed_row = printed["rows"].as_array().unwrap().iter().find(|r| r["label"] == row.label.as_str());
            let Some(printed_row) = printed_row else {
                fail(&mut report, format!("{id}: row {} missing from report", row.label));
                continue;
            };
            compare_printed(&mut report, id, format!("{} mean", row.label), &printed_row["mean"], row.mean_pct.unwrap());
            for (col, cell) in table.columns.iter().zip(&row.cells) {
                let c = cell.as_ref().unwrap();
                let p = &printed_row["cells"][col];
                compare_printed(&mut report, id, format!("{} hfr", row.label), &p["hfr"], c.estimate_pct);
                compare_printed(&mut report, id, format!("{} ci_low", row.label), &p["ci_low"], c.ci_low_pct);
                compare_printed(&mut report, id, format!("{} ci_high", row.label), &p["ci_high"], c.ci_high_pct);
                if p["n"].as_u64() != Some(c.n) {
                    report.failures.push(format!("{id} {} n", row.label));
                }
            }
        }
        if m.study.test_kind == TestKind::HfrGranular {
            let (code, out, err) = hfr(&["report", "--results", path_str(&csv_path), "--report", "marker-table", "--format", "json"]);
            if code != 0 {
                report.failures.push(format!("marker report {id}: exit {code}: {err}"));
                continue;
            }
            let printed: serde_json::Value = serde_json::from_str(&out).unwrap();
            let rates = compute_marker_rates(&set, &MarkerCatalog::default(), &CohortMap::new()).unwrap();
            for cohort in &rates.cohorts {
                let p = printed["cohorts"].as_array().unwrap().iter().find(|c| c["cohort"] == cohort.cohort.as_str()).unwrap();
                for (marker, rate) in &cohort.rates {
                    let got = p["rates"][marker].as_f64().map(|v| round_half_up(v, 2));
                    if got.as_deref() != Some(round_half_up(*rate, 2).as_str()) {
                        report.failures.push(format!("{id} {marker}: printed {got:?}, in-process {rate}"));
                    }
                    report.compared_values += 1;
                }
            }
        }
    }
    report
}
