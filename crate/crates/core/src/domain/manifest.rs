use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Stimulus, Study};

/// A study manifest: the study configuration and its stimulus list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub study: Study,
    pub stimuli: Vec<Stimulus>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        serde_json::from_str(text).map_err(|e| {
            let (line, column) = (e.line(), e.column());
            ManifestError::Parse {
                offset: byte_offset(text, line, column),
                line,
                column,
                message: e.to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn stimulus(&self, stimulus_id: &str) -> Option<&Stimulus> {
        self.stimuli.iter().find(|s| s.stimulus_id == stimulus_id)
    }
}

/// Converts serde_json's one-based line/column position into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let preceding: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (preceding + column.saturating_sub(1)).min(text.len())
}
