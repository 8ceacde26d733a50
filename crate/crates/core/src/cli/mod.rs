//! Experiment configuration, built-in presets and the command-line runner.

pub mod config;
pub mod presets;
pub mod runner;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::engine::SimError;
use crate::metrics::{self, RunLabel, RunMetrics};

pub use config::{Arm, ConfigError, RunConfig};
pub use runner::{execute, plan, PlannedRun};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ssdsim", version, about = "Simulate an SSD array under unsynchronized garbage collection")]
pub struct Args {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in preset, applied before --config.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for runs.csv, samples.csv and summary.txt.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// `key=value`, applied in order after the preset and file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub list_presets: bool,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("writing {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("run {run} ({label}): {source}")]
    Sim { run: usize, label: String, source: SimError },
    #[error("run {run} ({label}): {detail}")]
    Violation { run: usize, label: String, detail: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Csv { .. } => EXIT_CONFIG,
            CliError::Sim {
                source: SimError::Config(_),
                ..
            } => EXIT_CONFIG,
            CliError::Sim { .. } | CliError::Violation { .. } => EXIT_VIOLATION,
        }
    }
}

/// Preset, then file, then `--seed`, then overrides.
pub fn load(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(name) = &args.preset {
        let text = presets::preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?;
        cfg.apply_text(text)?;
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

/// Runs every planned simulation and writes the outputs.
pub fn run(args: &Args) -> Result<Vec<(RunLabel, RunMetrics)>, CliError> {
    let cfg = load(args)?;
    let runs = plan(&cfg)?;
    let threads = args.threads.unwrap_or_else(runner::default_threads);
    let mut rows = Vec::with_capacity(runs.len());
    let mut failure = None;
    for (run, result) in runs.iter().zip(execute(&runs, threads)) {
        match result {
            Ok(m) => rows.push((run.label.clone(), m)),
            Err(source) => {
                failure.get_or_insert(CliError::Sim {
                    run: run.label.run,
                    label: run.label.label.clone(),
                    source,
                });
            }
        }
    }
    write_outputs(&args.out, &rows, cfg.samples_csv)?;
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some((l, m)) = rows
        .iter()
        .find(|(_, m)| m.invariant_violations > 0 || m.shadow_divergences > 0)
    {
        let detail = match &m.first_violation {
            Some(v) => format!("{} invariant violations, first: {v}", m.invariant_violations),
            None => format!("{} shadow store divergences", m.shadow_divergences),
        };
        return Err(CliError::Violation {
            run: l.run,
            label: l.label.clone(),
            detail,
        });
    }
    Ok(rows)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

pub fn write_outputs(dir: &Path, rows: &[(RunLabel, RunMetrics)], samples: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.into(),
        source,
    })?;
    let csv_err = |path: PathBuf| move |source| CliError::Csv { path, source };
    let path = dir.join("runs.csv");
    metrics::write_csv(create(&path)?, rows).map_err(csv_err(path))?;
    if samples {
        let path = dir.join("samples.csv");
        metrics::write_samples_csv(create(&path)?, rows).map_err(csv_err(path))?;
    }
    let path = dir.join("summary.txt");
    let mut w = create(&path)?;
    let io_err = |source| CliError::Io {
        path: path.clone(),
        source,
    };
    for (l, m) in rows {
        writeln!(w, "{}", metrics::summary(l, m)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with(args: Args) -> i32 {
    if args.list_presets {
        for (name, text) in presets::PRESETS {
            let about = text
                .lines()
                .find_map(|l| l.strip_prefix("# "))
                .unwrap_or("");
            println!("{name:<22} {about}");
        }
        return EXIT_OK;
    }
    match run(&args) {
        Ok(rows) => {
            for (l, m) in &rows {
                println!("{}", metrics::summary(l, m));
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
