//! Experiment driver for aligned network diagonalization: configuration,
//! mode dispatch and report files.

pub mod config;
pub mod experiments;
pub mod report;

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use config::{Diagnostic, ExperimentConfig};
use report::{ExperimentReport, Provenance};

/// Why a run stopped. Each kind maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("invalid configuration:\n{}", list(.0))]
    Validation(Vec<Diagnostic>),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    #[error("I/O failure: {0}")]
    Io(String),
    #[error("computation failed: {0}")]
    Compute(String),
}

fn list(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) | Failure::Parse(_) => 2,
            Failure::Budget(_) => 3,
            Failure::Io(_) => 4,
            Failure::Compute(_) => 1,
        }
    }
}

impl From<netdiag_core::Error> for Failure {
    fn from(e: netdiag_core::Error) -> Self {
        match e {
            netdiag_core::Error::BudgetExceeded { .. } | netdiag_core::Error::SizeCap { .. } => {
                Failure::Budget(e.to_string())
            }
            other => Failure::Compute(other.to_string()),
        }
    }
}

/// Validates, then runs the configured mode on a pool of `cfg.jobs` threads.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport, Failure> {
    let diags = cfg.validate();
    if !diags.is_empty() {
        return Err(Failure::Validation(diags));
    }
    let mode = cfg.mode.expect("validated");
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Failure::Compute(e.to_string()))?;
    let (table, summary) = pool.install(|| experiments::run_mode(mode, cfg))?;
    let provenance = Provenance {
        config: cfg.clone(),
        artifact: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    Ok(ExperimentReport::new(mode.name(), table, summary, provenance))
}
