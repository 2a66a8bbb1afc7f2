//! Degrees-of-freedom formulas, slope estimation, the MIMO region and the
//! multi-hop reduction.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_rational::Ratio;

use crate::linalg::{self, Matrix};
use crate::math;
use crate::stats::Z95;
use crate::{Error, Result};

pub type Rational = Ratio<u64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SchemeFormula {
    /// Time sharing between pairs.
    Tdma,
    /// Relays decode-and-forward over two K-user interference channels.
    InterferenceChannel,
    /// Relays treat each hop as a K×K X channel.
    XChannel,
    /// Aligned interference neutralization.
    Neutralization,
    /// Aligned network diagonalization.
    And,
}

impl SchemeFormula {
    pub const ALL: [SchemeFormula; 5] = [
        SchemeFormula::Tdma,
        SchemeFormula::InterferenceChannel,
        SchemeFormula::XChannel,
        SchemeFormula::Neutralization,
        SchemeFormula::And,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeFormula::Tdma => "tdma",
            SchemeFormula::InterferenceChannel => "interference-channel",
            SchemeFormula::XChannel => "x-channel",
            SchemeFormula::Neutralization => "neutralization",
            SchemeFormula::And => "and",
        }
    }

    /// Sum degrees of freedom on the K×K×K network, `K >= 1`.
    pub fn evaluate(self, k: u64) -> Rational {
        match self {
            SchemeFormula::Tdma => Rational::from_integer(1),
            // A single pair sees no interference.
            SchemeFormula::InterferenceChannel if k == 1 => Rational::from_integer(1),
            SchemeFormula::InterferenceChannel => Rational::new(k, 2),
            SchemeFormula::XChannel => Rational::new(k * k, 2 * k - 1),
            SchemeFormula::Neutralization => Rational::from_integer(neutralization_streams(k)),
            SchemeFormula::And => Rational::from_integer(k),
        }
    }
}

impl fmt::Display for SchemeFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeFormula::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownScheme(s.to_string()))
    }
}

/// `max { N : N(N-1) + 1 <= K }`.
pub fn neutralization_streams(k: u64) -> u64 {
    let mut n = 1;
    while (n + 1) * n + 1 <= k {
        n += 1;
    }
    n
}

/// Evaluates a formula by name.
pub fn dof_formula(scheme: &str, k: u64) -> Result<Rational> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    Ok(scheme.parse::<SchemeFormula>()?.evaluate(k))
}

pub fn rational_to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Sum DoF of time-varying diagonalization with erasure budget `ε`:
/// `K (1 - 3ε) (N / (N+1))^{K²}`.
pub fn tv_sum_dof(k: usize, n: u32, epsilon: f64) -> f64 {
    let ratio = f64::from(n) / f64::from(n + 1);
    k as f64 * (1.0 - 3.0 * epsilon) * math::powi(ratio, (k * k) as u32)
}

/// Per-pair DoF of the constant-channel scheme: `(1-ε) N^{K²} / ((N+1)^{K²} + ε)`.
pub fn constant_pair_dof(k: usize, n: u32, epsilon: f64) -> f64 {
    let kk = (k * k) as u32;
    (1.0 - epsilon) * math::powi(f64::from(n), kk) / (math::powi(f64::from(n + 1), kk) + epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SlopeEstimate {
    pub slope: f64,
    pub intercept: f64,
    /// 95% normal-approximation half-width; `None` with fewer than three
    /// fitted points.
    pub half_width: Option<f64>,
    pub points_used: usize,
}

/// Fraction of the (sorted) grid used for the fit, counted from the top.
pub const DEFAULT_UPPER_FRACTION: f64 = 0.5;

/// Least-squares slope of rate against `½ log2 P` on the upper part of the
/// grid. Needs at least four points spanning four decades.
pub fn estimate_dof_slope(samples: &[(f64, f64)]) -> Result<SlopeEstimate> {
    estimate_dof_slope_with(samples, DEFAULT_UPPER_FRACTION)
}

pub fn estimate_dof_slope_with(samples: &[(f64, f64)], upper_fraction: f64) -> Result<SlopeEstimate> {
    if samples.len() < 4 {
        return Err(Error::InsufficientGrid(alloc::format!(
            "{} points, at least 4 required",
            samples.len()
        )));
    }
    if samples.iter().any(|(p, r)| !(*p > 0.0) || !r.is_finite()) {
        return Err(Error::InsufficientGrid("powers must be positive and rates finite".into()));
    }
    let mut pts: Vec<(f64, f64)> = samples.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let span = libm::log10(pts[pts.len() - 1].0) - libm::log10(pts[0].0);
    if span < 4.0 - 1e-9 {
        return Err(Error::InsufficientGrid(alloc::format!(
            "grid spans {span:.2} decades, at least 4 required"
        )));
    }
    let keep = (math::ceil(pts.len() as f64 * upper_fraction) as usize).clamp(2, pts.len());
    let fit = &pts[pts.len() - keep..];
    let xs: Vec<f64> = fit.iter().map(|(p, _)| 0.5 * math::log2(*p)).collect();
    let ys: Vec<f64> = fit.iter().map(|(_, r)| *r).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let half_width = (xs.len() >= 3).then(|| {
        let sse: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let e = y - intercept - slope * x;
                e * e
            })
            .sum();
        Z95 * math::sqrt(sse / (n - 2.0) / sxx)
    });
    Ok(SlopeEstimate {
        slope,
        intercept,
        half_width,
        points_used: xs.len(),
    })
}

/// Antenna counts of a two-hop MIMO network with `K` pairs and `A` relays.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MimoProfile {
    pub source_antennas: Vec<u32>,
    pub destination_antennas: Vec<u32>,
    pub relay_antennas: Vec<u32>,
}

impl MimoProfile {
    pub fn new(source_antennas: Vec<u32>, destination_antennas: Vec<u32>, relay_antennas: Vec<u32>) -> Result<Self> {
        let p = MimoProfile {
            source_antennas,
            destination_antennas,
            relay_antennas,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_antennas.is_empty() {
            return Err(Error::param("source_antennas", "at least one pair required"));
        }
        if self.source_antennas.len() != self.destination_antennas.len() {
            return Err(Error::DimensionMismatch {
                expected: self.source_antennas.len(),
                found: self.destination_antennas.len(),
            });
        }
        if self.relay_antennas.is_empty() {
            return Err(Error::param("relay_antennas", "at least one relay required"));
        }
        let all = self
            .source_antennas
            .iter()
            .chain(&self.destination_antennas)
            .chain(&self.relay_antennas);
        if all.clone().any(|&m| m == 0) {
            return Err(Error::param("antennas", "every node needs at least one antenna"));
        }
        Ok(())
    }

    pub fn pairs(&self) -> usize {
        self.source_antennas.len()
    }

    pub fn total_relay_antennas(&self) -> u64 {
        self.relay_antennas.iter().map(|&m| u64::from(m)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum RegionViolation {
    /// `d_i > min(M_{S_i}, M_{D_i})`.
    PairLimit { pair: usize, value: f64, limit: u32 },
    /// `sum_i d_i > total relay antennas`.
    RelayLimit { sum: f64, limit: u64 },
    /// Negative or non-finite entry.
    InvalidEntry { pair: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegionCheck {
    pub contained: bool,
    pub violations: Vec<RegionViolation>,
}

/// Membership in `{ d : d_i <= min(M_{S_i}, M_{D_i}), sum d_i <= M_relays }`.
pub fn mimo_region_contains(profile: &MimoProfile, d: &[f64]) -> Result<RegionCheck> {
    profile.validate()?;
    if d.len() != profile.pairs() {
        return Err(Error::DimensionMismatch {
            expected: profile.pairs(),
            found: d.len(),
        });
    }
    let mut violations = Vec::new();
    for (i, &di) in d.iter().enumerate() {
        if !di.is_finite() || di < 0.0 {
            violations.push(RegionViolation::InvalidEntry { pair: i, value: di });
            continue;
        }
        let limit = profile.source_antennas[i].min(profile.destination_antennas[i]);
        if di > f64::from(limit) {
            violations.push(RegionViolation::PairLimit { pair: i, value: di, limit });
        }
    }
    let sum: f64 = d.iter().sum();
    let limit = profile.total_relay_antennas();
    if sum > limit as f64 {
        violations.push(RegionViolation::RelayLimit { sum, limit });
    }
    Ok(RegionCheck {
        contained: violations.is_empty(),
        violations,
    })
}

/// Where a virtual single-antenna node comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AntennaRef {
    pub node: usize,
    pub antenna: u32,
}

/// A balanced `K'×K'×K'` single-antenna network obtained from a MIMO
/// profile by discarding antennas.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Reduction {
    pub k_prime: usize,
    /// Virtual source `v` is antenna `sources[v]`; destination `v` pairs with it.
    pub sources: Vec<AntennaRef>,
    pub destinations: Vec<AntennaRef>,
    pub relays: Vec<AntennaRef>,
    pub source_discards: Vec<u32>,
    pub destination_discards: Vec<u32>,
    pub relay_discards: Vec<u32>,
}

impl Reduction {
    pub fn is_balanced(&self) -> bool {
        self.sources.len() == self.k_prime
            && self.destinations.len() == self.k_prime
            && self.relays.len() == self.k_prime
    }
}

/// Keeps `d_i` antennas at source and destination `i` and `sum d_i` relay
/// antennas, discarding from the highest-indexed antennas first.
pub fn mimo_reduction(profile: &MimoProfile, d: &[u32]) -> Result<Reduction> {
    let df: Vec<f64> = d.iter().map(|&x| f64::from(x)).collect();
    if !mimo_region_contains(profile, &df)?.contained {
        return Err(Error::OutsideRegion);
    }
    let k_prime: usize = d.iter().map(|&x| x as usize).sum();
    let mut sources = Vec::with_capacity(k_prime);
    let mut destinations = Vec::with_capacity(k_prime);
    for (i, &di) in d.iter().enumerate() {
        for a in 0..di {
            sources.push(AntennaRef { node: i, antenna: a });
            destinations.push(AntennaRef { node: i, antenna: a });
        }
    }
    let mut relays = Vec::with_capacity(k_prime);
    let mut relay_discards = Vec::with_capacity(profile.relay_antennas.len());
    let mut remaining = k_prime as u64;
    for (r, &m) in profile.relay_antennas.iter().enumerate() {
        let keep = remaining.min(u64::from(m)) as u32;
        for a in 0..keep {
            relays.push(AntennaRef { node: r, antenna: a });
        }
        relay_discards.push(m - keep);
        remaining -= u64::from(keep);
    }
    Ok(Reduction {
        k_prime,
        sources,
        destinations,
        relays,
        source_discards: profile.source_antennas.iter().zip(d).map(|(m, di)| m - di).collect(),
        destination_discards: profile
            .destination_antennas
            .iter()
            .zip(d)
            .map(|(m, di)| m - di)
            .collect(),
        relay_discards,
    })
}

/// Sum DoF of a `K × A_2 × … × A_{J-1} × K` layered network: the narrowest
/// layer, counting the source and destination layers.
pub fn multihop_dof(middle_layers: &[u64], k: u64) -> u64 {
    middle_layers.iter().copied().fold(k, u64::min)
}

/// Centralized relay map: the relay applies `H_{V,D}^{-1} H_{S,V}^{-1}` to its
/// noiseless receive vector `H_{S,V} x`. Returns what the destinations hear.
pub fn mimo_relay_diagonalization(first_hop: &Matrix, second_hop: &Matrix, inputs: &[f64]) -> Result<Vec<f64>> {
    let hsv_inv = linalg::invert(first_hop)?;
    let hvd_inv = linalg::invert(second_hop)?;
    let relay_map = hvd_inv.mul(&hsv_inv)?;
    let received = first_hop.mul_vec(inputs)?;
    let transmitted = relay_map.mul_vec(&received)?;
    second_hop.mul_vec(&transmitted)
}

/// One row of the baseline comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub k: u64,
    pub values: [(SchemeFormula, Rational); 5],
}

pub fn baseline_table(k_max: u64) -> Vec<BaselineRow> {
    (1..=k_max)
        .map(|k| BaselineRow {
            k,
            values: SchemeFormula::ALL.map(|f| (f, f.evaluate(k))),
        })
        .collect()
}

pub fn format_rational(r: Rational) -> String {
    if *r.denom() == 1 {
        alloc::format!("{}", r.numer())
    } else {
        alloc::format!("{}/{}", r.numer(), r.denom())
    }
}
