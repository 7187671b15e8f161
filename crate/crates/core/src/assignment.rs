//! Deterministic per-rater trial schedules.
//!
//! Every schedulable unit (a stimulus for the binary kinds, an utterance with
//! all its renditions for MUSHRA) is replicated `min_raters_per_system` times.
//! Units sharing an utterance form a group whose replicas are laid out
//! contiguously and dealt round-robin over a seeded permutation of the pool.
//! A group needs at most `pool` consecutive slots, so no rater receives two
//! slots from the same group, and round-robin dealing keeps per-rater counts
//! within one of each other.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{validate_manifest, Stimulus, Study, TestKind, TrialOrdering};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub trial_id: String,
    pub stimulus_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSchedule {
    pub study_id: String,
    pub seed: u64,
    pub raters: BTreeMap<String, Vec<TrialSpec>>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("manifest is invalid ({0} violations)")]
    InvalidManifest(usize),
    #[error("rater pool of {pool} cannot satisfy coverage: minimum feasible pool = {minimum}")]
    PoolTooSmall { pool: usize, minimum: usize },
    #[error("unknown rater `{0}`")]
    UnknownRater(String),
    #[error("malformed schedule document: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextTrial<'a> {
    Trial(&'a TrialSpec),
    Done,
}

pub fn rater_id(index: usize) -> String {
    format!("rater-{:04}", index + 1)
}

struct Unit<'a> {
    stimuli: Vec<&'a Stimulus>,
}

/// Smallest pool for which [`build_trial_schedule`] succeeds.
pub fn minimum_pool(study: &Study, stimuli: &[Stimulus]) -> usize {
    let groups = group_units(study, stimuli);
    let largest = groups.values().map(Vec::len).max().unwrap_or(0);
    largest * study.min_raters_per_system as usize
}

fn group_units<'a>(study: &Study, stimuli: &'a [Stimulus]) -> BTreeMap<String, Vec<Unit<'a>>> {
    let mut sorted: Vec<&Stimulus> = stimuli.iter().collect();
    sorted.sort_by(|a, b| a.stimulus_id.cmp(&b.stimulus_id));

    let mut groups: BTreeMap<String, Vec<Unit>> = BTreeMap::new();
    match study.test_kind {
        TestKind::Mushra => {
            let mut by_utt: BTreeMap<&str, Vec<&Stimulus>> = BTreeMap::new();
            for s in sorted {
                by_utt.entry(&s.utterance_id).or_default().push(s);
            }
            for (utt, stimuli) in by_utt {
                groups.insert(utt.to_string(), vec![Unit { stimuli }]);
            }
        }
        TestKind::Hfr | TestKind::HfrGranular => {
            let per_utterance = study.one_rendition_per_utterance();
            for s in sorted {
                let key = if per_utterance {
                    s.utterance_id.clone()
                } else {
                    s.stimulus_id.clone()
                };
                groups.entry(key).or_default().push(Unit { stimuli: vec![s] });
            }
        }
    }
    groups
}

pub fn build_trial_schedule(
    study: &Study,
    stimuli: &[Stimulus],
    rater_pool_size: usize,
    seed: u64,
) -> Result<TrialSchedule, ScheduleError> {
    let report = validate_manifest(study, stimuli);
    if !report.is_valid() {
        return Err(ScheduleError::InvalidManifest(report.errors().count()));
    }
    let minimum = minimum_pool(study, stimuli).max(1);
    if rater_pool_size < minimum {
        return Err(ScheduleError::PoolTooSmall {
            pool: rater_pool_size,
            minimum,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let replicas = study.min_raters_per_system as usize;

    let mut groups: Vec<Vec<Unit>> = group_units(study, stimuli).into_values().collect();
    groups.shuffle(&mut rng);
    for g in &mut groups {
        g.shuffle(&mut rng);
    }

    let mut raters: Vec<usize> = (0..rater_pool_size).collect();
    raters.shuffle(&mut rng);
    let start = rng.random_range(0..rater_pool_size);

    let mut dealt: Vec<Vec<&Unit>> = vec![Vec::new(); rater_pool_size];
    let mut slot = start;
    for group in &groups {
        for _ in 0..replicas {
            for unit in group {
                dealt[raters[slot % rater_pool_size]].push(unit);
                slot += 1;
            }
        }
    }

    let ordering = study.assignment.ordering;
    let mut schedule = BTreeMap::new();
    for (index, units) in dealt.into_iter().enumerate() {
        let rater = rater_id(index);
        let mut trials: Vec<Vec<&Stimulus>> = units.into_iter().map(|u| u.stimuli.clone()).collect();
        // Units arrive in dealing order; re-sort so the shuffle below is the
        // only source of order.
        trials.sort_by(|a, b| a[0].stimulus_id.cmp(&b[0].stimulus_id));
        let ordered = match (study.test_kind, ordering) {
            (TestKind::Mushra, _) | (_, TrialOrdering::Uniform) => {
                trials.shuffle(&mut rng);
                trials
            }
            (_, TrialOrdering::Stratified) => {
                interleave(trials, |t| t[0].system.as_str(), &mut rng)
            }
        };
        let specs = ordered
            .into_iter()
            .enumerate()
            .map(|(k, mut stims)| {
                if stims.len() > 1 {
                    stims.shuffle(&mut rng);
                }
                TrialSpec {
                    trial_id: format!("{rater}-t{:03}", k + 1),
                    stimulus_ids: stims.iter().map(|s| s.stimulus_id.clone()).collect(),
                }
            })
            .collect();
        schedule.insert(rater, specs);
    }

    Ok(TrialSchedule {
        study_id: study.study_id.clone(),
        seed,
        raters: schedule,
    })
}

/// Seeded shuffle that never places two items with the same key next to
/// each other when such an order exists, and otherwise minimises the number
/// of adjacent repeats.
pub fn interleave<T, R, K>(items: Vec<T>, key: K, rng: &mut R) -> Vec<T>
where
    R: Rng + ?Sized,
    K: Fn(&T) -> &str,
{
    let mut buckets: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for item in items {
        buckets.entry(key(&item).to_string()).or_default().push(item);
    }
    for bucket in buckets.values_mut() {
        bucket.shuffle(rng);
    }

    let mut remaining: usize = buckets.values().map(Vec::len).sum();
    let mut out = Vec::with_capacity(remaining);
    let mut last: Option<String> = None;

    while remaining > 0 {
        let counts: Vec<(&String, usize)> = buckets
            .iter()
            .filter(|(_, b)| !b.is_empty())
            .map(|(k, b)| (k, b.len()))
            .collect();

        let feasible: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(k, _)| last.as_ref() != Some(*k))
            .filter(|(k, _)| feasible_after(&counts, k, remaining))
            .copied()
            .collect();

        let chosen = if !feasible.is_empty() {
            let total: usize = feasible.iter().map(|(_, c)| c).sum();
            let mut pick = rng.random_range(0..total);
            let mut chosen = feasible[0].0;
            for (k, c) in &feasible {
                if pick < *c {
                    chosen = k;
                    break;
                }
                pick -= c;
            }
            chosen.clone()
        } else {
            let others: Vec<&(&String, usize)> = counts
                .iter()
                .filter(|(k, _)| last.as_ref() != Some(*k))
                .collect();
            match others.iter().map(|(_, c)| *c).max() {
                Some(max) => {
                    let top: Vec<&String> = others
                        .iter()
                        .filter(|(_, c)| *c == max)
                        .map(|(k, _)| *k)
                        .collect();
                    top[rng.random_range(0..top.len())].clone()
                }
                None => counts[0].0.clone(),
            }
        };

        let item = buckets
            .get_mut(&chosen)
            .and_then(Vec::pop)
            .expect("chosen bucket is non-empty");
        out.push(item);
        remaining -= 1;
        last = Some(chosen);
    }
    out
}

/// Whether the multiset left after taking one item of `picked` can still be
/// arranged without adjacent repeats, given it must not start with `picked`.
fn feasible_after(counts: &[(&String, usize)], picked: &str, remaining: usize) -> bool {
    let rest = remaining - 1;
    counts.iter().all(|(k, c)| {
        if k.as_str() == picked {
            c - 1 <= rest / 2
        } else {
            *c <= rest.div_ceil(2)
        }
    })
}

impl TrialSchedule {
    pub fn trials(&self, rater_id: &str) -> Result<&[TrialSpec], ScheduleError> {
        self.raters
            .get(rater_id)
            .map(Vec::as_slice)
            .ok_or_else(|| ScheduleError::UnknownRater(rater_id.to_string()))
    }

    pub fn next_unrated<'a>(
        &'a self,
        rater_id: &str,
        completed_trial_ids: &BTreeSet<String>,
    ) -> Result<NextTrial<'a>, ScheduleError> {
        Ok(self
            .trials(rater_id)?
            .iter()
            .find(|t| !completed_trial_ids.contains(&t.trial_id))
            .map_or(NextTrial::Done, NextTrial::Trial))
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("schedule serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        serde_json::from_str(text).map_err(|e| ScheduleError::Malformed(e.to_string()))
    }

    /// Number of distinct raters scheduled per stimulus.
    pub fn coverage(&self) -> BTreeMap<&str, usize> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (rater, trials) in &self.raters {
            for t in trials {
                for s in &t.stimulus_ids {
                    out.entry(s).or_default().insert(rater);
                }
            }
        }
        out.into_iter().map(|(k, v)| (k, v.len())).collect()
    }
}
