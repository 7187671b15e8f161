//! C ABI for hfr-core.
//!
//! Conventions:
//!
//! * Every fallible function returns an [`HfrStatus`]; on anything other
//!   than `HFR_OK`, [`hfr_last_error_message`] describes the failure.
//! * Strings passed in are NUL-terminated UTF-8. Strings handed out are owned
//!   by the caller and released with [`hfr_string_free`].
//! * [`HfrManifest`] and [`HfrResults`] are opaque handles released with
//!   their `_free` function.
//! * Panics never cross the boundary; they surface as `HFR_PANIC`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::{c_char, size_t};

use hfr_core::assignment::{build_trial_schedule, ScheduleError};
use hfr_core::domain::{validate_manifest, Manifest};
use hfr_core::session::completion_code;
use hfr_core::stats::{compute_ci_with, compute_hfr, CiMethod, CiOptions, Filter, ResponseSet, StatsError};
use hfr_core::storage::{read_csv, ResultRow};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidArgument = 4,
    InvalidManifest = 5,
    Infeasible = 6,
    NoData = 7,
    Panic = 99,
}

/// Point estimate and confidence bounds, all in percent.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HfrEstimate {
    pub estimate_pct: f64,
    pub n: u64,
    pub ci_low_pct: f64,
    pub ci_high_pct: f64,
}

/// Parsed study manifest.
pub struct HfrManifest {
    inner: Manifest,
}

/// Parsed results CSV.
pub struct HfrResults {
    rows: Vec<ResultRow>,
    set: ResponseSet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn fail(status: HfrStatus, message: impl Into<String>) -> HfrStatus {
    set_error(message);
    status
}

fn guard(f: impl FnOnce() -> HfrStatus) -> HfrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == HfrStatus::Ok {
                set_error("");
            }
            status
        }
        Err(_) => fail(HfrStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, HfrStatus> {
    if p.is_null() {
        return Err(fail(HfrStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HfrStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

fn stats_status(e: StatsError) -> HfrStatus {
    let status = match e {
        StatsError::NoData(_) => HfrStatus::NoData,
        _ => HfrStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn hfr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hfr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn ci(
    method: CiMethod,
    estimate_pct: f64,
    n: u64,
    confidence: f64,
    low: *mut f64,
    high: *mut f64,
) -> HfrStatus {
    guard(|| {
        if low.is_null() || high.is_null() {
            return fail(HfrStatus::NullPointer, "output pointer is null");
        }
        match compute_ci_with(estimate_pct, n, CiOptions { method, confidence }) {
            Ok((l, h)) => {
                *low = l;
                *high = h;
                HfrStatus::Ok
            }
            Err(e) => stats_status(e),
        }
    })
}

/// Normal-approximation interval for a percentage estimate over `n`
/// responses, clipped to [0, 100].
///
/// # Safety
/// `low` and `high` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hfr_wald_ci(
    estimate_pct: f64,
    n: u64,
    confidence: f64,
    low: *mut f64,
    high: *mut f64,
) -> HfrStatus {
    ci(CiMethod::Wald, estimate_pct, n, confidence, low, high)
}

/// Wilson score interval; same contract as [`hfr_wald_ci`].
///
/// # Safety
/// `low` and `high` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hfr_wilson_ci(
    estimate_pct: f64,
    n: u64,
    confidence: f64,
    low: *mut f64,
    high: *mut f64,
) -> HfrStatus {
    ci(CiMethod::Wilson, estimate_pct, n, confidence, low, high)
}

/// Parses a manifest document. Parsing does not validate; see
/// [`hfr_manifest_validate`].
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hfr_manifest_parse(json: *const c_char, out: *mut *mut HfrManifest) -> HfrStatus {
    guard(|| {
        if out.is_null() {
            return fail(HfrStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match read_str(json, "json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Manifest::from_json(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(HfrManifest { inner }));
                HfrStatus::Ok
            }
            Err(e) => fail(HfrStatus::ParseError, e.to_string()),
        }
    })
}

/// # Safety
/// `manifest` must come from [`hfr_manifest_parse`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hfr_manifest_free(manifest: *mut HfrManifest) {
    if !manifest.is_null() {
        drop(Box::from_raw(manifest));
    }
}

/// Writes the violation report (one `SEVERITY\tcode\tcontext` line per
/// violation) to `report_out` and whether the manifest has no errors to
/// `valid_out`.
///
/// # Safety
/// `manifest` must be a live handle; both outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hfr_manifest_validate(
    manifest: *const HfrManifest,
    report_out: *mut *mut c_char,
    valid_out: *mut bool,
) -> HfrStatus {
    guard(|| {
        if manifest.is_null() || report_out.is_null() || valid_out.is_null() {
            return fail(HfrStatus::NullPointer, "argument is null");
        }
        let m = &(*manifest).inner;
        let report = validate_manifest(&m.study, &m.stimuli);
        *valid_out = report.is_valid();
        *report_out = into_c_string(report.render());
        HfrStatus::Ok
    })
}

/// Builds the trial schedule and writes it as a JSON document.
///
/// # Safety
/// `manifest` must be a live handle; `json_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hfr_schedule_build(
    manifest: *const HfrManifest,
    pool: size_t,
    seed: u64,
    json_out: *mut *mut c_char,
) -> HfrStatus {
    guard(|| {
        if manifest.is_null() || json_out.is_null() {
            return fail(HfrStatus::NullPointer, "argument is null");
        }
        *json_out = ptr::null_mut();
        let m = &(*manifest).inner;
        match build_trial_schedule(&m.study, &m.stimuli, pool, seed) {
            Ok(s) => {
                *json_out = into_c_string(s.to_json());
                HfrStatus::Ok
            }
            Err(e @ ScheduleError::InvalidManifest(_)) => fail(HfrStatus::InvalidManifest, e.to_string()),
            Err(e @ ScheduleError::PoolTooSmall { .. }) => fail(HfrStatus::Infeasible, e.to_string()),
            Err(e) => fail(HfrStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Parses a results CSV, checking its header.
///
/// # Safety
/// `csv` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hfr_results_from_csv(csv: *const c_char, out: *mut *mut HfrResults) -> HfrStatus {
    guard(|| {
        if out.is_null() {
            return fail(HfrStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match read_str(csv, "csv") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match read_csv(text.as_bytes()) {
            Ok(rows) => {
                let set = ResponseSet::from_rows(&rows, None);
                *out = Box::into_raw(Box::new(HfrResults { rows, set }));
                HfrStatus::Ok
            }
            Err(e) => fail(HfrStatus::ParseError, e.to_string()),
        }
    })
}

/// # Safety
/// `results` must come from [`hfr_results_from_csv`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hfr_results_free(results: *mut HfrResults) {
    if !results.is_null() {
        drop(Box::from_raw(results));
    }
}

/// Number of CSV rows; 0 for a null handle.
///
/// # Safety
/// `results` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hfr_results_len(results: *const HfrResults) -> size_t {
    if results.is_null() {
        0
    } else {
        (*results).rows.len()
    }
}

/// Fooling rate with a Wald interval over admissible rows, optionally
/// restricted to one system (`system` may be null).
///
/// # Safety
/// `results` must be a live handle, `system` null or NUL-terminated, and
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hfr_results_hfr(
    results: *const HfrResults,
    system: *const c_char,
    confidence: f64,
    out: *mut HfrEstimate,
) -> HfrStatus {
    guard(|| {
        if results.is_null() || out.is_null() {
            return fail(HfrStatus::NullPointer, "argument is null");
        }
        let mut filter = Filter::all();
        if !system.is_null() {
            match read_str(system, "system") {
                Ok(s) => filter = filter.system(s),
                Err(s) => return s,
            }
        }
        let opts = CiOptions {
            method: CiMethod::Wald,
            confidence,
        };
        match compute_hfr(&(*results).set, &filter, opts) {
            Ok(r) => {
                *out = HfrEstimate {
                    estimate_pct: r.estimate_pct,
                    n: r.n,
                    ci_low_pct: r.ci_low_pct,
                    ci_high_pct: r.ci_high_pct,
                };
                HfrStatus::Ok
            }
            Err(e) => stats_status(e),
        }
    })
}

/// Eight-character completion code for a rater.
///
/// # Safety
/// `key` must point to `key_len` readable bytes; `study_id` and `rater_id`
/// must be NUL-terminated; `code_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hfr_completion_code(
    key: *const u8,
    key_len: size_t,
    study_id: *const c_char,
    rater_id: *const c_char,
    code_out: *mut *mut c_char,
) -> HfrStatus {
    guard(|| {
        if key.is_null() || code_out.is_null() {
            return fail(HfrStatus::NullPointer, "argument is null");
        }
        if key_len == 0 {
            return fail(HfrStatus::InvalidArgument, "empty key");
        }
        let key = std::slice::from_raw_parts(key, key_len);
        let (study, rater) = match (read_str(study_id, "study_id"), read_str(rater_id, "rater_id")) {
            (Ok(s), Ok(r)) => (s, r),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        *code_out = into_c_string(completion_code(key, study, rater));
        HfrStatus::Ok
    })
}
