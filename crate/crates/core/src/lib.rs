//! Crowdsourced listening-test platform for synthetic speech.
//!
//! The crate administers three kinds of perceptual test (binary human fooling
//! rate, the granular marker variant, and MUSHRA), enforces full-sample
//! playback server side, and computes the published aggregates from an
//! append-only event log.
//!
//! Module map:
//!
//! * [`domain`]: shared types and manifest validation.
//! * [`assignment`]: deterministic per-rater trial schedules.
//! * [`stats`]: fooling rate, confidence intervals, tables, marker rates,
//!   MUSHRA means and timing statistics.
//! * [`session`]: the listener session state machine and its registry.
//! * [`storage`]: the checksummed event log and the results CSV.
//! * [`service`]: the HTTP API.
//! * [`simulate`]: scripted raters for dry runs.
//! * [`report`]: table rendering for the operator CLI.
//! * [`cli`]: the `hfr` command line.

pub mod assignment;
pub mod cli;
pub mod domain;
pub mod report;
pub mod service;
pub mod session;
pub mod simulate;
pub mod stats;
pub mod storage;

pub use domain::{
    HfrResult, Label, Manifest, MarkerCatalog, MarkerDef, Origin, Response, Stimulus, Study,
    TestKind, ValidationReport,
};
