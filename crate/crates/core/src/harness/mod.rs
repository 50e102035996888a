//! Experiment configuration, command runners and output files.

mod commands;
mod config;
mod records;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use commands::{
    cmd_lowdeg_scan, cmd_mi_scan, cmd_root_accuracy, cmd_simulate, cmd_sq_run, cmd_tree_reconstruct, CommandOutput,
    MI_ZERO_TOL,
};
pub use config::{parse_assignment, parse_chain, parse_value, ExperimentConfig};
pub use records::{write_records, RecordContext, ResultRecord};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    MiScan,
    LowdegScan,
    RootAccuracy,
    TreeReconstruct,
    SqRun,
    Simulate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::MiScan => "mi-scan",
            Command::LowdegScan => "lowdeg-scan",
            Command::RootAccuracy => "root-accuracy",
            Command::TreeReconstruct => "tree-reconstruct",
            Command::SqRun => "sq-run",
            Command::Simulate => "simulate",
        }
    }

    pub fn execute(self, cfg: &ExperimentConfig) -> Result<CommandOutput> {
        match self {
            Command::MiScan => cmd_mi_scan(cfg),
            Command::LowdegScan => cmd_lowdeg_scan(cfg),
            Command::RootAccuracy => cmd_root_accuracy(cfg),
            Command::TreeReconstruct => cmd_tree_reconstruct(cfg),
            Command::SqRun => cmd_sq_run(cfg),
            Command::Simulate => cmd_simulate(cfg),
        }
    }
}

/// `<path>.<suffix>`, e.g. `data.jsonl.secret.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs a command and writes its outputs: records as CSV to `cfg.out` (or
/// `stdout`), reports to `<out>.reports.jsonl`, wall time to
/// `<out>.timing.json`.
pub fn run<W: Write>(command: Command, cfg: &ExperimentConfig, stdout: W) -> Result<CommandOutput> {
    let start = Instant::now();
    let output = command.execute(cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    if command == Command::Simulate {
        return Ok(output);
    }
    match &cfg.out {
        Some(path) => {
            write_records(&output.records, std::fs::File::create(path)?)?;
            if !output.reports.is_empty() {
                let mut f = std::io::BufWriter::new(std::fs::File::create(sidecar(path, "reports.jsonl"))?);
                for line in &output.reports {
                    writeln!(f, "{line}")?;
                }
                f.flush()?;
            }
            let timing = serde_json::json!({ "command": command.name(), "wall_seconds": elapsed });
            std::fs::write(sidecar(path, "timing.json"), format!("{timing}\n"))?;
        }
        None => write_records(&output.records, stdout)?,
    }
    Ok(output)
}

/// Process exit status for an error: 2 configuration, 3 size cap, 4
/// grouping failure, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::SizeOverflow { .. } => 3,
        Error::GroupingFailure { .. } => 4,
        Error::Invalid(_)
        | Error::Domain(_)
        | Error::NonStochastic { .. }
        | Error::NegativeEntry { .. }
        | Error::Json(_)
        | Error::NotErgodic
        | Error::DegenerateChannel
        | Error::SingularChannel
        | Error::Range(_) => 2,
        Error::Io(_) | Error::Csv(_) => 1,
    }
}
