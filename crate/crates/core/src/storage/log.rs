//! Append-only event log.
//!
//! One record per line: eight lowercase hex digits of the CRC-32 (IEEE) of
//! the JSON body, a single space, the JSON body, `\n`. The body is
//! `{"seq":N,"ts_ms":T,"event":{"kind":K,"payload":{..}}}`. Sequence numbers
//! start at 1 and are dense.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Cursor, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A type that can be stored in the log.
pub trait LogPayload: Serialize + DeserializeOwned {
    fn kind(&self) -> &'static str;
    /// Rejects payloads that are not well-formed for their kind.
    fn validate(&self) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord<E> {
    pub seq: u64,
    pub ts_ms: u64,
    pub event: E,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayHalt {
    /// Last record that verified; 0 if none did.
    pub last_good_seq: u64,
    /// One-based line number of the offending record.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log unavailable: {0}")]
    Io(#[from] io::Error),
    #[error("malformed {kind} event: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error("corrupt record at line {} after sequence {}: {}", .0.line, .0.last_good_seq, .0.reason)]
    Corrupt(ReplayHalt),
    #[error("replay must start at sequence 1 or later")]
    InvalidStart,
}

enum Backend {
    File { file: File, path: PathBuf },
    Memory(Vec<u8>),
}

pub struct EventLog<E> {
    backend: Backend,
    last_seq: u64,
    _payload: PhantomData<fn() -> E>,
}

pub(crate) fn encode_line<E: Serialize>(record: &EventRecord<E>) -> String {
    let body = serde_json::to_string(record).expect("event record serializes");
    format!("{:08x} {body}\n", crc32fast::hash(body.as_bytes()))
}

fn decode_line<E: DeserializeOwned>(line: &[u8]) -> Result<EventRecord<E>, String> {
    let line = line
        .strip_suffix(b"\n")
        .ok_or_else(|| "truncated record (no newline)".to_string())?;
    if line.len() < 10 || line[8] != b' ' {
        return Err("missing checksum prefix".into());
    }
    let checksum = std::str::from_utf8(&line[..8])
        .ok()
        .and_then(|h| u32::from_str_radix(h, 16).ok())
        .ok_or_else(|| "checksum is not hex".to_string())?;
    let body = &line[9..];
    if crc32fast::hash(body) != checksum {
        return Err("checksum mismatch".into());
    }
    serde_json::from_slice(body).map_err(|e| format!("undecodable body: {e}"))
}

impl<E: LogPayload> EventLog<E> {
    pub fn in_memory() -> Self {
        EventLog {
            backend: Backend::Memory(Vec::new()),
            last_seq: 0,
            _payload: PhantomData,
        }
    }

    /// Opens (or creates) a log file for appending and returns the records
    /// already in it. A corrupt final record is cut off; corruption followed
    /// by further records is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<EventRecord<E>>), LogError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;

        let mut reader = BufReader::new(file.try_clone()?);
        reader.seek(SeekFrom::Start(0))?;
        let mut records = Vec::new();
        let mut good_bytes: u64 = 0;
        let mut buf = Vec::new();
        let mut line_no = 0;
        loop {
            buf.clear();
            let read = reader.read_until(b'\n', &mut buf)?;
            if read == 0 {
                break;
            }
            line_no += 1;
            let last_good_seq = records.last().map_or(0, |r: &EventRecord<E>| r.seq);
            match decode_line::<E>(&buf) {
                Ok(rec) if rec.seq == last_good_seq + 1 => {
                    good_bytes += read as u64;
                    records.push(rec);
                }
                outcome => {
                    let reason = match outcome {
                        Ok(rec) => format!("sequence {} follows {last_good_seq}", rec.seq),
                        Err(e) => e,
                    };
                    let mut rest = Vec::new();
                    io::Read::read_to_end(&mut reader, &mut rest)?;
                    if rest.iter().any(|b| !b.is_ascii_whitespace()) {
                        return Err(LogError::Corrupt(ReplayHalt {
                            last_good_seq,
                            line: line_no,
                            reason,
                        }));
                    }
                    tracing::warn!(
                        path = %path.display(),
                        last_good_seq,
                        "truncating corrupt log tail: {reason}"
                    );
                    file.set_len(good_bytes)?;
                    file.sync_all()?;
                    break;
                }
            }
        }
        file.seek(SeekFrom::End(0))?;
        let last_seq = records.last().map_or(0, |r| r.seq);
        Ok((
            EventLog {
                backend: Backend::File { file, path },
                last_seq,
                _payload: PhantomData,
            },
            records,
        ))
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Validates, writes and syncs one record; the sequence number only
    /// advances once the write succeeded.
    pub fn append(&mut self, event: E, ts_ms: u64) -> Result<EventRecord<E>, LogError> {
        event.validate().map_err(|reason| LogError::Malformed {
            kind: event.kind(),
            reason,
        })?;
        let record = EventRecord {
            seq: self.last_seq + 1,
            ts_ms,
            event,
        };
        let line = encode_line(&record);
        match &mut self.backend {
            Backend::File { file, .. } => {
                file.write_all(line.as_bytes())?;
                file.sync_data()?;
            }
            Backend::Memory(buf) => buf.extend_from_slice(line.as_bytes()),
        }
        self.last_seq = record.seq;
        Ok(record)
    }

    /// Streams records with `seq >= from_seq`, stopping at the first record
    /// that fails verification.
    pub fn replay(&self, from_seq: u64) -> Result<Replay<E>, LogError> {
        if from_seq == 0 {
            return Err(LogError::InvalidStart);
        }
        let reader: Box<dyn BufRead> = match &self.backend {
            Backend::File { path, .. } => Box::new(BufReader::new(File::open(path)?)),
            Backend::Memory(buf) => Box::new(Cursor::new(buf.clone())),
        };
        Ok(Replay::new(reader, from_seq))
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.backend {
            Backend::File { path, .. } => Some(path),
            Backend::Memory(_) => None,
        }
    }
}

/// Replays a log file without opening it for writing.
pub fn replay_file<E: LogPayload>(path: impl AsRef<Path>, from_seq: u64) -> Result<Replay<E>, LogError> {
    if from_seq == 0 {
        return Err(LogError::InvalidStart);
    }
    Ok(Replay::new(Box::new(BufReader::new(File::open(path)?)), from_seq))
}

pub struct Replay<E> {
    reader: Box<dyn BufRead>,
    from_seq: u64,
    last_good: u64,
    line: usize,
    done: bool,
    _payload: PhantomData<fn() -> E>,
}

impl<E> Replay<E> {
    fn new(reader: Box<dyn BufRead>, from_seq: u64) -> Self {
        Replay {
            reader,
            from_seq,
            last_good: 0,
            line: 0,
            done: false,
            _payload: PhantomData,
        }
    }

    fn halt(&mut self, reason: String) -> Option<Result<EventRecord<E>, ReplayHalt>> {
        self.done = true;
        Some(Err(ReplayHalt {
            last_good_seq: self.last_good,
            line: self.line,
            reason,
        }))
    }
}

impl<E: DeserializeOwned> Iterator for Replay<E> {
    type Item = Result<EventRecord<E>, ReplayHalt>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.done {
                return None;
            }
            let mut buf = Vec::new();
            match self.reader.read_until(b'\n', &mut buf) {
                Ok(0) => {
                    self.done = true;
                    return None;
                }
                Ok(_) => {}
                Err(e) => return self.halt(format!("read error: {e}")),
            }
            self.line += 1;
            match decode_line::<E>(&buf) {
                Ok(rec) if rec.seq == self.last_good + 1 => {
                    self.last_good = rec.seq;
                    if rec.seq >= self.from_seq {
                        return Some(Ok(rec));
                    }
                }
                Ok(rec) => {
                    return self.halt(format!("sequence {} follows {}", rec.seq, self.last_good))
                }
                Err(reason) => return self.halt(reason),
            }
        }
    }
}
