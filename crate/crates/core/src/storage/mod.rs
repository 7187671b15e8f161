//! Event log and results export.

pub mod export;
pub mod log;

pub use export::{read_csv, rows_for_response, to_csv_string, write_csv, ExportError, ResultRow, EXPORT_COLUMNS};
pub use log::{replay_file, EventLog, EventRecord, LogError, LogPayload, Replay, ReplayHalt};
