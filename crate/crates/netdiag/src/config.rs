//! Experiment configuration: a flat JSON document plus flag overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use netdiag_core::GainDistribution;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Largest `K` any mode accepts.
pub const MAX_K: usize = 4;
/// Largest `N` any mode accepts.
pub const MAX_N: u32 = 3;
/// Largest time-varying block length `(N+1)^(K²)`.
pub const MAX_BLOCK_LEN: u128 = 512;
/// Largest `--k-max` for the baseline table.
pub const MAX_BASELINE_K: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Diagonalize,
    SimulateTv,
    SimulateConst,
    DofSweep,
    Baselines,
    MimoRegion,
    Multihop,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Diagonalize => "diagonalize",
            Mode::SimulateTv => "simulate-tv",
            Mode::SimulateConst => "simulate-const",
            Mode::DofSweep => "dof-sweep",
            Mode::Baselines => "baselines",
            Mode::MimoRegion => "mimo-region",
            Mode::Multihop => "multihop",
        }
    }

    /// Modes that run the time-varying scheme and so build `(N+1)^(K²)` blocks.
    pub fn is_time_varying(self) -> bool {
        matches!(self, Mode::Diagonalize | Mode::SimulateTv | Mode::DofSweep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Gain distribution as written on the command line: `uniform:LOW:HIGH` or
/// `normal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistSpec(pub GainDistribution);

impl Default for DistSpec {
    fn default() -> Self {
        DistSpec(GainDistribution::default())
    }
}

impl fmt::Display for DistSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            GainDistribution::StandardNormal => f.write_str("normal"),
            GainDistribution::Uniform { low, high } => write!(f, "uniform:{low}:{high}"),
        }
    }
}

impl FromStr for DistSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["normal"] | ["standard-normal"] => Ok(DistSpec(GainDistribution::StandardNormal)),
            ["uniform", low, high] => {
                let low: f64 = low.parse().map_err(|_| format!("bad lower endpoint `{low}`"))?;
                let high: f64 = high.parse().map_err(|_| format!("bad upper endpoint `{high}`"))?;
                Ok(DistSpec(GainDistribution::Uniform { low, high }))
            }
            _ => Err(format!("unknown distribution `{s}`; expected `normal` or `uniform:LOW:HIGH`")),
        }
    }
}

impl Serialize for DistSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DistSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every knob of one run. Unknown keys in a config file are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub k: usize,
    pub n: u32,
    pub epsilon: f64,
    pub p_grid: Vec<f64>,
    pub sigma2: f64,
    pub trials: u64,
    /// Monte Carlo draws behind the time-varying thresholds and scalings.
    pub calibration_trials: usize,
    pub seed: u64,
    pub dist: DistSpec,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub jobs: usize,
    /// Rows of the baseline table.
    pub k_max: u64,
    /// Antennas per source, destination and relay for `mimo-region`.
    pub source_antennas: Vec<u32>,
    pub destination_antennas: Vec<u32>,
    pub relay_antennas: Vec<u32>,
    /// Middle-layer widths for `multihop`; random profiles when empty.
    pub layers: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: None,
            k: 2,
            n: 1,
            epsilon: 0.01,
            p_grid: vec![1e2, 1e4, 1e6, 1e8],
            sigma2: 1.0,
            trials: 100,
            calibration_trials: 1000,
            seed: 0,
            dist: DistSpec::default(),
            out: None,
            format: Format::Csv,
            jobs: 1,
            k_max: 10,
            source_antennas: vec![1, 2],
            destination_antennas: vec![2, 1],
            relay_antennas: vec![2],
            layers: Vec::new(),
        }
    }
}

/// One envelope violation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Parse(format!("{}: {e}", path.display())))
    }

    /// Lists every envelope violation. Performs no computation beyond
    /// envelope arithmetic.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut bad = |field: &'static str, message: String| out.push(Diagnostic { field, message });
        let Some(mode) = self.mode else {
            bad("mode", "no mode given".into());
            return out;
        };
        let uses_kn = !matches!(mode, Mode::Baselines | Mode::MimoRegion | Mode::Multihop);
        if uses_kn {
            if self.k == 0 || self.k > MAX_K {
                bad("k", format!("{} outside 1..={MAX_K}", self.k));
            }
            if self.n == 0 || self.n > MAX_N {
                bad("n", format!("{} outside 1..={MAX_N}", self.n));
            }
            if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
                bad("epsilon", format!("{} outside (0, 1)", self.epsilon));
            }
            if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
                bad("sigma2", format!("{} must be non-negative and finite", self.sigma2));
            }
            if let Err(e) = self.dist.0.validate() {
                bad("dist", e.to_string());
            }
        }
        if mode.is_time_varying() && self.k >= 1 && self.n >= 1 {
            let d = u128::from(self.n + 1).checked_pow((self.k * self.k) as u32);
            match d {
                Some(d) if d <= MAX_BLOCK_LEN => {}
                _ => bad(
                    "k",
                    format!(
                        "block length ({}+1)^{} exceeds the time-varying envelope of {MAX_BLOCK_LEN}",
                        self.n,
                        self.k * self.k
                    ),
                ),
            }
            if self.calibration_trials < 1000 {
                bad("calibration_trials", "at least 1000 calibration draws are needed".into());
            }
        }
        if matches!(mode, Mode::SimulateTv | Mode::SimulateConst | Mode::DofSweep) {
            if self.p_grid.is_empty() {
                bad("p_grid", "empty".into());
            }
            let floor = if mode == Mode::SimulateConst { 1.0 } else { 1.0 - f64::EPSILON };
            if let Some(p) = self.p_grid.iter().find(|p| !(**p > floor && p.is_finite())) {
                bad("p_grid", format!("power {p} must be finite and at least 1 (above 1 for simulate-const)"));
            }
            if self.p_grid.windows(2).any(|w| !(w[0] < w[1])) {
                bad("p_grid", "powers must be strictly increasing".into());
            }
        }
        if mode == Mode::DofSweep && self.p_grid.len() < 4 {
            bad("p_grid", "slope estimation needs at least four powers".into());
        }
        if self.trials == 0 {
            bad("trials", "must be at least 1".into());
        }
        if self.jobs == 0 {
            bad("jobs", "must be at least 1".into());
        }
        if mode == Mode::Baselines && (self.k_max == 0 || self.k_max > MAX_BASELINE_K) {
            bad("k_max", format!("{} outside 1..={MAX_BASELINE_K}", self.k_max));
        }
        if mode == Mode::MimoRegion {
            if let Err(e) = netdiag_core::dof::MimoProfile::new(
                self.source_antennas.clone(),
                self.destination_antennas.clone(),
                self.relay_antennas.clone(),
            ) {
                bad("source_antennas", e.to_string());
            }
        }
        if mode == Mode::Multihop {
            if self.k == 0 {
                bad("k", "must be at least 1".into());
            }
            if self.layers.contains(&0) {
                bad("layers", "every layer needs at least one node".into());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_mode(mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            mode: Some(mode),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_pass_for_every_mode() {
        for mode in [
            Mode::Diagonalize,
            Mode::SimulateTv,
            Mode::SimulateConst,
            Mode::DofSweep,
            Mode::Baselines,
            Mode::MimoRegion,
            Mode::Multihop,
        ] {
            assert_eq!(with_mode(mode).validate(), vec![], "{mode:?}");
        }
    }

    #[test]
    fn k5_time_varying_exceeds_envelope() {
        let c = ExperimentConfig {
            k: 5,
            ..with_mode(Mode::SimulateTv)
        };
        let diags = c.validate();
        assert!(diags.iter().any(|d| d.field == "k" && d.message.contains("outside")));
        assert!(diags.iter().any(|d| d.field == "k" && d.message.contains("envelope")));
    }

    #[test]
    fn k3_n1_fits_but_k3_n2_does_not() {
        let ok = ExperimentConfig {
            k: 3,
            n: 1,
            ..with_mode(Mode::Diagonalize)
        };
        assert!(ok.validate().is_empty());
        let too_big = ExperimentConfig { n: 2, ..ok };
        assert_eq!(too_big.validate().len(), 1);
    }

    #[test]
    fn every_violation_is_listed() {
        let c = ExperimentConfig {
            epsilon: 1.5,
            sigma2: -1.0,
            trials: 0,
            jobs: 0,
            ..with_mode(Mode::SimulateConst)
        };
        let fields: Vec<_> = c.validate().iter().map(|d| d.field).collect();
        assert_eq!(fields, ["epsilon", "sigma2", "trials", "jobs"]);
    }

    #[test]
    fn dist_spec_round_trips() {
        for s in ["normal", "uniform:0.5:2"] {
            let d: DistSpec = s.parse().unwrap();
            assert_eq!(d.to_string(), s);
        }
        assert!("uniform:1".parse::<DistSpec>().is_err());
        assert!("cauchy".parse::<DistSpec>().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"mode": "baselines", "kk": 3}"#).is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"mode": "simulate-tv", "dist": "normal"}"#).unwrap();
        assert_eq!(c.mode, Some(Mode::SimulateTv));
        assert_eq!(c.dist.0, GainDistribution::StandardNormal);
        assert_eq!(c.k, 2);
    }
}
