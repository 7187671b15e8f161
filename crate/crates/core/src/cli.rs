//! The `hfr` operator command line.
//!
//! Exit codes: 0 success, 1 domain violation or infeasible request, 2 I/O or
//! usage error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::assignment::{build_trial_schedule, ScheduleError};
use crate::domain::{Manifest, ManifestError, MarkerCatalog};
use crate::report::{build_report, Format, ReportKind, ReportOptions};
use crate::service::{self, ConfigError, ServiceConfig};
use crate::session::ManualClock;
use crate::simulate::{simulate_study, SimulationOptions};
use crate::stats::{flag_rushed, CiMethod, CiOptions, CohortMap, GroupKey, PostScreening, ResponseSet};
use crate::storage::{read_csv, ExportError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "hfr", version, about = "Listening-test operator tool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a study manifest; prints one violation per line.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Build the per-rater trial schedule.
    Schedule {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pool: usize,
        /// Defaults to the study's `rng_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an aggregate table from a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, value_enum)]
        report: ReportArg,
        #[arg(long)]
        group_rows: Option<GroupKey>,
        #[arg(long)]
        group_cols: Option<GroupKey>,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
        #[arg(long, value_enum, default_value = "wald")]
        ci_method: CiArg,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        /// Drop responses decided faster than this many milliseconds; a
        /// manifest with `exclude_rushed` supplies its own threshold.
        #[arg(long)]
        min_decision_ms: Option<u64>,
        /// Supplies stimulus tags and the marker catalog.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Marker-table cohort assignment, `system=cohort`; repeatable.
        #[arg(long = "cohort", value_parser = parse_cohort)]
        cohorts: Vec<(String, String)>,
        /// Apply MUSHRA reference post-screening.
        #[arg(long)]
        post_screen: bool,
    },
    /// Replay a service's event log and write the results CSV.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        study: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run scripted raters through every configured study.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability of a human label, `system=p`; repeatable.
        #[arg(long = "human-rate", value_parser = parse_rate)]
        human_rates: Vec<(String, f64)>,
        #[arg(long, default_value_t = 1_700_000_000_000)]
        start_ms: u64,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum ReportArg {
    HfrTable,
    MarkerTable,
    MushraTable,
    TimingTable,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Text,
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CiArg {
    Wald,
    Wilson,
}

fn parse_cohort(s: &str) -> Result<(String, String), String> {
    let (system, cohort) = s
        .split_once('=')
        .ok_or_else(|| format!("expected system=cohort, got `{s}`"))?;
    Ok((system.to_string(), cohort.to_string()))
}

fn parse_rate(s: &str) -> Result<(String, f64), String> {
    let (system, p) = s.split_once('=').ok_or_else(|| format!("expected system=p, got `{s}`"))?;
    let p: f64 = p.parse().map_err(|e| format!("{e}"))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(format!("rate {p} outside [0, 1]"));
    }
    Ok((system.to_string(), p))
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn io(message: impl ToString) -> Self {
        Failure {
            code: EXIT_IO,
            message: message.to_string(),
        }
    }

    fn domain(message: impl ToString) -> Self {
        Failure {
            code: EXIT_DOMAIN,
            message: message.to_string(),
        }
    }
}

impl From<ManifestError> for Failure {
    fn from(e: ManifestError) -> Self {
        Failure::io(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Registry(_) | ConfigError::MissingMacKey => Failure::domain(e),
            _ => Failure::io(e),
        }
    }
}

impl From<ExportError> for Failure {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Io(_) => Failure::io(e),
            _ => Failure::domain(e),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
                return EXIT_IO;
            }
            let _ = write!(out, "{text}");
            return EXIT_OK;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "hfr: {}", f.message);
            f.code
        }
    }
}

fn write_output(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<(), Failure> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
            }
            std::fs::write(p, text).map_err(|e| Failure::io(format!("{}: {e}", p.display())))
        }
        None => out.write_all(text.as_bytes()).map_err(Failure::io),
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Command::Validate { manifest } => {
            let m = Manifest::load(&manifest)?;
            let report = crate::domain::validate_manifest(&m.study, &m.stimuli);
            write_output(None, &report.render(), out)?;
            Ok(if report.is_valid() { EXIT_OK } else { EXIT_DOMAIN })
        }
        Command::Schedule {
            manifest,
            pool,
            seed,
            out: path,
        } => {
            let m = Manifest::load(&manifest)?;
            let seed = seed.unwrap_or(m.study.rng_seed);
            let schedule = build_trial_schedule(&m.study, &m.stimuli, pool, seed).map_err(|e| match e {
                ScheduleError::InvalidManifest(_) => {
                    let report = crate::domain::validate_manifest(&m.study, &m.stimuli);
                    Failure::domain(format!("{e}\n{}", report.render().trim_end()))
                }
                other => Failure::domain(other),
            })?;
            write_output(path.as_deref(), &schedule.to_json(), out)?;
            Ok(EXIT_OK)
        }
        Command::Report {
            results,
            report,
            group_rows,
            group_cols,
            format,
            ci_method,
            confidence,
            min_decision_ms,
            manifest,
            cohorts,
            post_screen,
        } => {
            let file = std::fs::File::open(&results).map_err(|e| Failure::io(format!("{}: {e}", results.display())))?;
            let rows = read_csv(std::io::BufReader::new(file))?;
            let mut rushed_threshold = min_decision_ms;
            let (tags, catalog) = match &manifest {
                Some(p) => {
                    let m = Manifest::load(p)?;
                    let tags: HashMap<String, String> = m
                        .stimuli
                        .iter()
                        .filter_map(|s| s.tag.clone().map(|t| (s.stimulus_id.clone(), t)))
                        .collect();
                    if m.study.exclude_rushed && rushed_threshold.is_none() {
                        rushed_threshold = Some(m.study.min_decision_ms);
                    }
                    (Some(tags), m.study.marker_catalog.clone())
                }
                None => (None, None),
            };
            let mut set = ResponseSet::from_rows(&rows, tags.as_ref());
            if let Some(ms) = rushed_threshold {
                let flagged = flag_rushed(&set, ms);
                if !flagged.is_empty() {
                    let _ = writeln!(err, "excluding {} rushed response(s) under {ms} ms", flagged.len());
                }
                set = set.excluding(&flagged);
            }
            let kind = match report {
                ReportArg::HfrTable => ReportKind::HfrTable,
                ReportArg::MarkerTable => ReportKind::MarkerTable,
                ReportArg::MushraTable => ReportKind::MushraTable,
                ReportArg::TimingTable => ReportKind::TimingTable,
            };
            let mut opts = ReportOptions::new(kind);
            if let Some(r) = group_rows {
                opts.rows = r;
            }
            if let Some(c) = group_cols {
                opts.cols = c;
            } else if tags.is_some() {
                opts.cols = GroupKey::Tag;
            }
            opts.ci = CiOptions {
                method: match ci_method {
                    CiArg::Wald => CiMethod::Wald,
                    CiArg::Wilson => CiMethod::Wilson,
                },
                confidence,
            };
            opts.mushra.confidence = confidence;
            if post_screen {
                opts.mushra.post_screening = Some(PostScreening::default());
            }
            opts.catalog = catalog.unwrap_or_else(MarkerCatalog::default);
            opts.cohorts = cohorts
                .into_iter()
                .fold(CohortMap::new(), |m, (system, cohort)| m.assign(system, cohort));
            let built = build_report(&set, &opts).map_err(Failure::domain)?;
            let format = match format {
                FormatArg::Text => Format::Text,
                FormatArg::Json => Format::Json,
                FormatArg::Csv => Format::Csv,
            };
            write_output(None, &built.render(format), out)?;
            Ok(EXIT_OK)
        }
        Command::Export { config, study, out: path } => {
            let config = ServiceConfig::load(&config)?;
            let (registry, halted) = service::replay_registry(&config)?;
            if let Some(seq) = halted {
                let _ = writeln!(err, "warning: event log has a corrupt record after sequence {seq}; exported up to it");
            }
            let csv = registry.export_csv(&study).map_err(Failure::domain)?;
            write_output(path.as_deref(), &csv, out)?;
            Ok(EXIT_OK)
        }
        Command::Simulate {
            config,
            seed,
            human_rates,
            start_ms,
        } => {
            let config = ServiceConfig::load(&config)?;
            let clock = Arc::new(ManualClock::new(start_ms));
            let state = service::open_state(&config, clock.clone())?;
            let mut opts = SimulationOptions {
                seed,
                ..Default::default()
            };
            opts.human_rate.extend(human_rates);
            let ids: Vec<String> = state.registry.studies().map(|s| s.study_id().to_string()).collect();
            for (i, id) in ids.iter().enumerate() {
                let opts = SimulationOptions {
                    seed: seed.wrapping_add(i as u64),
                    ..opts.clone()
                };
                let summary = simulate_study(&state.registry, &clock, id, &opts).map_err(Failure::domain)?;
                let _ = writeln!(out, "{id}: {} sessions, {} responses", summary.sessions, summary.responses);
            }
            Ok(EXIT_OK)
        }
        Command::Serve { config } => {
            let config = ServiceConfig::load(&config)?;
            let runtime = tokio::runtime::Runtime::new().map_err(Failure::io)?;
            runtime.block_on(service::serve(config))?;
            Ok(EXIT_OK)
        }
    }
}
