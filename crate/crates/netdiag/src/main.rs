use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use netdiag::config::{DistSpec, ExperimentConfig, Format, Mode};
use netdiag::Failure;

/// Batch experiments for aligned network diagonalization on K×K×K two-hop
/// relay networks.
///
/// Settings come from the defaults, then the `--config` file, then flags.
/// Exit codes: 0 success, 2 invalid configuration, 3 enumeration budget
/// exceeded, 4 I/O failure, 1 any other failure.
#[derive(Debug, Parser)]
#[command(name = "netdiag", version)]
struct Cli {
    /// Mode to run; same as `--mode`.
    #[arg(value_enum)]
    mode_arg: Option<Mode>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of source/relay/destination triples.
    #[arg(long)]
    k: Option<usize>,
    /// Direction-set order.
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated transmit powers, e.g. `1e2,1e4,1e6`.
    #[arg(long, value_delimiter = ',')]
    p_grid: Option<Vec<f64>>,
    /// Noise variance.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Trials, blocks or channel uses per grid point, depending on the mode.
    #[arg(long)]
    trials: Option<u64>,
    /// Draws behind the time-varying calibration.
    #[arg(long)]
    calibration_trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gain distribution: `normal` or `uniform:LOW:HIGH`.
    #[arg(long)]
    dist: Option<DistSpec>,
    /// Report path; stdout when absent. CSV reports get a `.meta.json` sidecar.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Largest K in the baseline table.
    #[arg(long)]
    k_max: Option<u64>,
    /// Antennas per source, comma-separated.
    #[arg(long, value_delimiter = ',')]
    src_antennas: Option<Vec<u32>>,
    /// Antennas per destination, comma-separated.
    #[arg(long, value_delimiter = ',')]
    dst_antennas: Option<Vec<u32>>,
    /// Antennas per relay, comma-separated.
    #[arg(long, value_delimiter = ',')]
    relay_antennas: Option<Vec<u32>>,
    /// Middle-layer widths for `multihop`, comma-separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<u64>>,
    /// Validate the configuration and exit without running.
    #[arg(long)]
    check: bool,
}

impl Cli {
    fn merged(self) -> Result<(ExperimentConfig, bool), Failure> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let (Some(a), Some(b)) = (self.mode_arg, self.mode) {
            if a != b {
                return Err(Failure::Parse(format!(
                    "mode given twice: `{}` and `{}`",
                    a.name(),
                    b.name()
                )));
            }
        }
        macro_rules! set {
            ($($field:ident <- $value:expr),* $(,)?) => {
                $(if let Some(v) = $value { c.$field = v; })*
            };
        }
        if let Some(m) = self.mode_arg.or(self.mode) {
            c.mode = Some(m);
        }
        if let Some(out) = self.out {
            c.out = Some(out);
        }
        set!(
            k <- self.k,
            n <- self.n,
            epsilon <- self.epsilon,
            p_grid <- self.p_grid,
            sigma2 <- self.sigma2,
            trials <- self.trials,
            calibration_trials <- self.calibration_trials,
            seed <- self.seed,
            dist <- self.dist,
            format <- self.format,
            jobs <- self.jobs,
            k_max <- self.k_max,
            source_antennas <- self.src_antennas,
            destination_antennas <- self.dst_antennas,
            relay_antennas <- self.relay_antennas,
            layers <- self.layers,
        );
        Ok((c, self.check))
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let (cfg, check_only) = cli.merged()?;
    if check_only {
        let diags = cfg.validate();
        if !diags.is_empty() {
            return Err(Failure::Validation(diags));
        }
        eprintln!("configuration ok");
        return Ok(());
    }
    let report = netdiag::run(&cfg)?;
    for path in report.write(cfg.out.as_deref(), cfg.format)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("netdiag: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
