//! Results CSV: one row per judged stimulus of an accepted response.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Judgment, Label, Origin, Response, Stimulus, TestKind};

/// Column order of the results CSV.
pub const EXPORT_COLUMNS: [&str; 17] = [
    "study_id",
    "rater_id",
    "session_id",
    "trial_id",
    "test_kind",
    "system",
    "utterance_id",
    "stimulus_id",
    "origin",
    "label",
    "markers",
    "mushra_score",
    "response_time_ms",
    "decision_time_ms",
    "playback_verified",
    "served_at",
    "responded_at",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRow {
    pub study_id: String,
    pub rater_id: String,
    pub session_id: String,
    pub trial_id: String,
    pub test_kind: TestKind,
    pub system: String,
    pub utterance_id: String,
    pub stimulus_id: String,
    pub origin: Origin,
    pub label: Option<Label>,
    /// Semicolon-joined marker ids.
    pub markers: String,
    pub mushra_score: Option<u8>,
    pub response_time_ms: u64,
    pub decision_time_ms: Option<u64>,
    pub playback_verified: bool,
    pub served_at: u64,
    pub responded_at: u64,
}

impl ResultRow {
    pub fn marker_set(&self) -> BTreeSet<String> {
        self.markers
            .split(';')
            .filter(|m| !m.is_empty())
            .map(str::to_string)
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("results CSV column {index}: expected `{expected}`, found `{found}`")]
    ColumnMismatch {
        index: usize,
        expected: &'static str,
        found: String,
    },
    #[error("results CSV is missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("results CSV has unexpected extra column `{0}`")]
    ExtraColumn(String),
    #[error("results CSV row {row}: {message}")]
    Row { row: u64, message: String },
    #[error("response references unknown stimulus `{0}`")]
    UnknownStimulus(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Expands one response into CSV rows.
pub fn rows_for_response(
    response: &Response,
    stimuli: &HashMap<&str, &Stimulus>,
) -> Result<Vec<ResultRow>, ExportError> {
    let row = |stimulus_id: &str| -> Result<ResultRow, ExportError> {
        let s = stimuli
            .get(stimulus_id)
            .ok_or_else(|| ExportError::UnknownStimulus(stimulus_id.to_string()))?;
        Ok(ResultRow {
            study_id: response.study_id.clone(),
            rater_id: response.rater_id.clone(),
            session_id: response.session_id.clone(),
            trial_id: response.trial_id.clone(),
            test_kind: response.judgment.test_kind(),
            system: s.system.clone(),
            utterance_id: s.utterance_id.clone(),
            stimulus_id: s.stimulus_id.clone(),
            origin: s.origin,
            label: response.judgment.label(),
            markers: String::new(),
            mushra_score: None,
            response_time_ms: response.response_time_ms,
            decision_time_ms: response.decision_time_ms,
            playback_verified: response.playback_verified,
            served_at: response.served_at,
            responded_at: response.responded_at,
        })
    };
    match &response.judgment {
        Judgment::Binary { stimulus_id, .. } => Ok(vec![row(stimulus_id)?]),
        Judgment::Granular {
            stimulus_id,
            markers,
            ..
        } => {
            let mut r = row(stimulus_id)?;
            r.markers = markers.iter().cloned().collect::<Vec<_>>().join(";");
            Ok(vec![r])
        }
        Judgment::Mushra { scores } => scores
            .iter()
            .map(|(id, score)| {
                let mut r = row(id)?;
                r.mushra_score = Some(*score);
                Ok(r)
            })
            .collect(),
    }
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<(), ExportError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(EXPORT_COLUMNS)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

/// Reads a results CSV, checking the header column by column.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>, ExportError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    for (index, expected) in EXPORT_COLUMNS.iter().enumerate() {
        match headers.get(index) {
            Some(found) if found == *expected => {}
            Some(found) => {
                return Err(ExportError::ColumnMismatch {
                    index: index + 1,
                    expected,
                    found: found.to_string(),
                })
            }
            None => return Err(ExportError::MissingColumn(expected)),
        }
    }
    if let Some(extra) = headers.get(EXPORT_COLUMNS.len()) {
        return Err(ExportError::ExtraColumn(extra.to_string()));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize().enumerate() {
        let row: ResultRow = record.map_err(|e| ExportError::Row {
            row: i as u64 + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}
