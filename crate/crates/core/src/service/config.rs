use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::assignment::{ScheduleError, TrialSchedule};
use crate::domain::{Manifest, ManifestError};
use crate::session::{RegistryError, StudyRuntime, DEFAULT_TOLERANCE_MS};
use crate::storage::LogError;

pub const ENV_PORT: &str = "HFR_PORT";
pub const ENV_DATA_DIR: &str = "HFR_DATA_DIR";
pub const ENV_MAC_KEY: &str = "HFR_MAC_KEY";

/// Name of the event log inside the data directory.
pub const LOG_FILE: &str = "events.log";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{var}={value:?} is not valid: {message}")]
    Env {
        var: &'static str,
        value: String,
        message: String,
    },
    #[error("no MAC key configured (set `mac_key` or {ENV_MAC_KEY})")]
    MissingMacKey,
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("schedule {path}: {source}")]
    Schedule { path: PathBuf, source: ScheduleError },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub manifest: PathBuf,
    pub schedule: PathBuf,
    /// Directory that relative `audio_ref`s resolve against; defaults to
    /// the manifest's directory.
    #[serde(default)]
    pub audio_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub mac_key: Option<String>,
    #[serde(default = "default_tolerance")]
    pub tolerance_ms: u64,
    /// Bearer token for operator endpoints; open when unset.
    #[serde(default)]
    pub operator_token: Option<String>,
    #[serde(default)]
    pub studies: Vec<StudyConfig>,
}

fn default_bind() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_tolerance() -> u64 {
    DEFAULT_TOLERANCE_MS
}

impl ServiceConfig {
    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut config: ServiceConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base.to_path_buf(),
            message: e.to_string(),
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.data_dir);
        for s in &mut config.studies {
            resolve(&mut s.manifest);
            resolve(&mut s.schedule);
            if let Some(root) = &mut s.audio_root {
                resolve(root);
            }
        }
        Ok(config)
    }

    /// Reads the file and applies environment overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut config = Self::from_toml(&text, base)?;
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(port) = lookup(ENV_PORT) {
            self.port = port.parse().map_err(|e: std::num::ParseIntError| ConfigError::Env {
                var: ENV_PORT,
                value: port.clone(),
                message: e.to_string(),
            })?;
        }
        if let Some(dir) = lookup(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(dir);
        }
        if let Some(key) = lookup(ENV_MAC_KEY) {
            self.mac_key = Some(key);
        }
        Ok(())
    }

    pub fn mac_key(&self) -> Result<Vec<u8>, ConfigError> {
        match &self.mac_key {
            Some(k) if !k.is_empty() => Ok(k.as_bytes().to_vec()),
            _ => Err(ConfigError::MissingMacKey),
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.data_dir.join(LOG_FILE)
    }

    /// Loads every configured study with its audio root.
    pub fn load_studies(&self) -> Result<Vec<(StudyRuntime, PathBuf)>, ConfigError> {
        let mut out = Vec::with_capacity(self.studies.len());
        for s in &self.studies {
            let manifest = Manifest::load(&s.manifest)?;
            let text = std::fs::read_to_string(&s.schedule).map_err(|source| ConfigError::Io {
                path: s.schedule.clone(),
                source,
            })?;
            let schedule = TrialSchedule::from_json(&text).map_err(|source| ConfigError::Schedule {
                path: s.schedule.clone(),
                source,
            })?;
            let root = s.audio_root.clone().unwrap_or_else(|| {
                s.manifest.parent().map(Path::to_path_buf).unwrap_or_default()
            });
            out.push((StudyRuntime::new(manifest, schedule)?, root));
        }
        Ok(out)
    }
}
