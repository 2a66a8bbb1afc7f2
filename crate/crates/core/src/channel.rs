//! Channel gain processes for both hops.
//!
//! Gains are stored as dense `[t][receiver][transmitter]` arrays, so
//! `hop_matrix(hop, t)[(j, i)]` is the gain from transmitter `i` to receiver
//! `j`. Each `(hop, i, j)` process draws from its own ChaCha stream keyed by the
//! master seed, which makes longer realizations extend shorter ones.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum GainDistribution {
    StandardNormal,
    Uniform { low: f64, high: f64 },
}

impl Default for GainDistribution {
    /// Uniform on `[0.5, 2.0]`, which keeps monomial direction matrices
    /// usable at moderate block lengths.
    fn default() -> Self {
        GainDistribution::Uniform {
            low: 0.5,
            high: 2.0,
        }
    }
}

impl GainDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GainDistribution::StandardNormal => Ok(()),
            GainDistribution::Uniform { low, high } => {
                if !low.is_finite() || !high.is_finite() {
                    Err(Error::InvalidDistribution(format!(
                        "non-finite interval [{low}, {high}]"
                    )))
                } else if low > high {
                    Err(Error::InvalidDistribution(format!(
                        "reversed interval [{low}, {high}]"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            GainDistribution::StandardNormal => 0.0,
            GainDistribution::Uniform { low, high } => 0.5 * (low + high),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            GainDistribution::StandardNormal => 1.0,
            GainDistribution::Uniform { low, high } => (high - low) * (high - low) / 12.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            GainDistribution::StandardNormal => rng.sample(StandardNormal),
            GainDistribution::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Hop {
    /// Sources to relays.
    First,
    /// Relays to destinations.
    Second,
}

impl Hop {
    fn stream_tag(self) -> u64 {
        match self {
            Hop::First => 0,
            Hop::Second => 1,
        }
    }
}

fn stream_id(hop: Hop, i: usize, j: usize) -> u64 {
    (hop.stream_tag() << 48) | ((i as u64) << 24) | j as u64
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChannelRealization {
    k: usize,
    t_total: usize,
    first_hop: Vec<f64>,
    second_hop: Vec<f64>,
    constant: bool,
    seed: Option<u64>,
    distribution: Option<GainDistribution>,
}

impl ChannelRealization {
    /// Builds a realization from flat `[t][j][i]` arrays.
    pub fn from_arrays(
        k: usize,
        t_total: usize,
        first_hop: Vec<f64>,
        second_hop: Vec<f64>,
        constant: bool,
    ) -> Result<Self> {
        let real = ChannelRealization {
            k,
            t_total,
            first_hop,
            second_hop,
            constant,
            seed: None,
            distribution: None,
        };
        real.validate()?;
        Ok(real)
    }

    /// Checks shape, finiteness and constancy.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("k", "must be at least 1"));
        }
        if self.t_total == 0 {
            return Err(Error::param("t_total", "must be at least 1"));
        }
        let len = self.t_total * self.k * self.k;
        for arr in [&self.first_hop, &self.second_hop] {
            if arr.len() != len {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    found: arr.len(),
                });
            }
            if !arr.iter().all(|g| g.is_finite()) {
                return Err(Error::param("gains", "all gains must be finite"));
            }
            if self.constant {
                let kk = self.k * self.k;
                let (head, tail) = arr.split_at(kk);
                if tail.chunks(kk).any(|c| c != head) {
                    return Err(Error::param(
                        "constant",
                        "constant realization varies over time",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn distribution(&self) -> Option<GainDistribution> {
        self.distribution
    }

    /// Raw `[t][j][i]` storage of one hop.
    pub fn raw(&self, hop: Hop) -> &[f64] {
        match hop {
            Hop::First => &self.first_hop,
            Hop::Second => &self.second_hop,
        }
    }

    /// Gain from transmitter `i` to receiver `j` at time `t`.
    pub fn gain(&self, hop: Hop, t: usize, i: usize, j: usize) -> f64 {
        let kk = self.k * self.k;
        self.raw(hop)[t * kk + j * self.k + i]
    }

    /// The `K×K` matrix with entry `(j, i)` equal to the gain from
    /// transmitter `i` to receiver `j` at time `t`.
    pub fn hop_matrix(&self, hop: Hop, t: usize) -> Result<Matrix> {
        if t >= self.t_total {
            return Err(Error::TimeOutOfRange {
                t,
                len: self.t_total,
            });
        }
        let kk = self.k * self.k;
        Matrix::from_vec(self.k, self.k, self.raw(hop)[t * kk..(t + 1) * kk].to_vec())
    }

    /// Hop matrices for `len` consecutive steps starting at `start`.
    pub fn hop_block(&self, hop: Hop, start: usize, len: usize) -> Result<Vec<Matrix>> {
        if start + len > self.t_total {
            return Err(Error::ChannelTooShort {
                required: start + len,
                available: self.t_total,
            });
        }
        (start..start + len).map(|t| self.hop_matrix(hop, t)).collect()
    }
}

fn check_sizes(k: usize, t_total: usize, dist: &GainDistribution) -> Result<()> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if t_total == 0 {
        return Err(Error::param("t_total", "must be at least 1"));
    }
    dist.validate()
}

/// Draws all `2·K²·T_total` gains i.i.d. from `dist`.
pub fn sample_time_varying(
    k: usize,
    t_total: usize,
    dist: GainDistribution,
    seed: u64,
) -> Result<ChannelRealization> {
    check_sizes(k, t_total, &dist)?;
    let kk = k * k;
    let mut first_hop = alloc::vec![0.0; t_total * kk];
    let mut second_hop = alloc::vec![0.0; t_total * kk];
    for (hop, arr) in [(Hop::First, &mut first_hop), (Hop::Second, &mut second_hop)] {
        for i in 0..k {
            for j in 0..k {
                let mut r = rng::stream(seed, stream_id(hop, i, j));
                for t in 0..t_total {
                    arr[t * kk + j * k + i] = dist.sample(&mut r);
                }
            }
        }
    }
    Ok(ChannelRealization {
        k,
        t_total,
        first_hop,
        second_hop,
        constant: false,
        seed: Some(seed),
        distribution: Some(dist),
    })
}

/// One draw per `(hop, i, j)`, replicated over `t_total` steps.
///
/// The drawn values coincide with step 0 of [`sample_time_varying`] under
/// the same seed.
pub fn sample_constant(
    k: usize,
    t_total: usize,
    dist: GainDistribution,
    seed: u64,
) -> Result<ChannelRealization> {
    check_sizes(k, t_total, &dist)?;
    let one = sample_time_varying(k, 1, dist, seed)?;
    let kk = k * k;
    let replicate = |v: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(t_total * kk);
        for _ in 0..t_total {
            out.extend_from_slice(&v[..kk]);
        }
        out
    };
    Ok(ChannelRealization {
        k,
        t_total,
        first_hop: replicate(&one.first_hop),
        second_hop: replicate(&one.second_hop),
        constant: true,
        seed: Some(seed),
        distribution: Some(dist),
    })
}

/// Noiseless receive: `y_j = sum_i H[j][i] x_i`.
pub fn propagate(h: &Matrix, x: &[f64]) -> Vec<f64> {
    h.mul_vec(x).expect("hop matrix and signal vector disagree on K")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{is_numerically_singular, Lu};
    use crate::stats;

    #[test]
    fn degenerate_interval_gives_constant_gain() {
        let real = sample_time_varying(2, 1, GainDistribution::Uniform { low: 1.0, high: 1.0 }, 17)
            .unwrap();
        assert!(real.raw(Hop::First).iter().all(|g| *g == 1.0));
        assert!(real.raw(Hop::Second).iter().all(|g| *g == 1.0));
    }

    #[test]
    fn reversed_interval_rejected() {
        let bad = GainDistribution::Uniform { low: 2.0, high: 1.0 };
        assert!(matches!(
            sample_time_varying(2, 3, bad, 0),
            Err(Error::InvalidDistribution(_))
        ));
        assert!(sample_constant(2, 3, bad, 0).is_err());
        let nan = GainDistribution::Uniform { low: f64::NAN, high: 1.0 };
        assert!(nan.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_time_varying(2, 32, GainDistribution::StandardNormal, 7).unwrap();
        let b = sample_time_varying(2, 32, GainDistribution::StandardNormal, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_time_varying(2, 32, GainDistribution::StandardNormal, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn longer_realizations_extend_shorter_ones() {
        let short = sample_time_varying(3, 10, GainDistribution::default(), 11).unwrap();
        let long = sample_time_varying(3, 50, GainDistribution::default(), 11).unwrap();
        for hop in [Hop::First, Hop::Second] {
            assert_eq!(short.raw(hop), &long.raw(hop)[..short.raw(hop).len()]);
        }
    }

    #[test]
    fn standard_normal_variance_near_one() {
        let real = sample_time_varying(3, 10_000, GainDistribution::StandardNormal, 1).unwrap();
        for hop in [Hop::First, Hop::Second] {
            for i in 0..3 {
                for j in 0..3 {
                    let xs: Vec<f64> = (0..10_000).map(|t| real.gain(hop, t, i, j)).collect();
                    let v = stats::variance(&xs);
                    assert!((0.9..=1.1).contains(&v), "variance {v} at {hop:?} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn uniform_variance_matches_analytic() {
        let dist = GainDistribution::default();
        let real = sample_time_varying(1, 100_000, dist, 3).unwrap();
        let v = stats::variance(real.raw(Hop::First));
        assert!((v / dist.variance() - 1.0).abs() < 0.1);
    }

    #[test]
    fn distinct_processes_are_uncorrelated() {
        let real = sample_time_varying(2, 10_000, GainDistribution::StandardNormal, 5).unwrap();
        let series = |hop, i, j| -> Vec<f64> { (0..10_000).map(|t| real.gain(hop, t, i, j)).collect() };
        let a = series(Hop::First, 0, 0);
        for (hop, i, j) in [(Hop::First, 0, 1), (Hop::First, 1, 0), (Hop::Second, 0, 0)] {
            let r = stats::correlation(&a, &series(hop, i, j));
            assert!(r.abs() < 0.05, "correlation {r}");
        }
    }

    #[test]
    fn constant_realization_is_constant() {
        let one = sample_constant(1, 5, GainDistribution::Uniform { low: 2.0, high: 2.0 }, 9).unwrap();
        assert_eq!(one.hop_matrix(Hop::First, 3).unwrap(), Matrix::from_rows(&[[2.0]]).unwrap());
        assert_eq!(one.hop_matrix(Hop::Second, 0).unwrap()[(0, 0)], 2.0);

        let real = sample_constant(2, 6, GainDistribution::StandardNormal, 3).unwrap();
        assert!(real.is_constant());
        let h0 = real.hop_matrix(Hop::First, 0).unwrap();
        for t in 1..6 {
            assert_eq!(h0, real.hop_matrix(Hop::First, t).unwrap());
        }
    }

    #[test]
    fn constant_second_hop_invertible_over_seeds() {
        for seed in 0..100 {
            let real = sample_constant(2, 1, GainDistribution::StandardNormal, seed).unwrap();
            let h = real.hop_matrix(Hop::Second, 0).unwrap();
            let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
            assert!(det.abs() > 0.0);
            assert!(!is_numerically_singular(&h, &Lu::factor(&h).unwrap()));
        }
    }

    #[test]
    fn hop_matrix_round_trip_and_bounds() {
        // t = 0: first hop [[1, 2], [3, 4]]; t = 1: [[5, 6], [7, 8]]
        let first: Vec<f64> = (1..=8).map(f64::from).collect();
        let second: Vec<f64> = (11..=18).map(f64::from).collect();
        let real = ChannelRealization::from_arrays(2, 2, first, second, false).unwrap();
        assert_eq!(
            real.hop_matrix(Hop::First, 1).unwrap(),
            Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap()
        );
        // gain from transmitter 1 to receiver 0 at t = 0 sits at row 0, col 1
        assert_eq!(real.gain(Hop::Second, 0, 1, 0), 12.0);
        assert!(matches!(
            real.hop_matrix(Hop::First, 2),
            Err(Error::TimeOutOfRange { t: 2, len: 2 })
        ));

        let drawn = sample_time_varying(2, 4, GainDistribution::default(), 3).unwrap();
        let h = drawn.hop_matrix(Hop::Second, 2).unwrap();
        for j in 0..2 {
            for i in 0..2 {
                assert_eq!(h[(j, i)], drawn.raw(Hop::Second)[2 * 4 + j * 2 + i]);
            }
        }
    }

    #[test]
    fn from_arrays_rejects_inconsistent_constant() {
        let first = alloc::vec![1.0, 2.0];
        let second = alloc::vec![1.0, 1.0];
        assert!(ChannelRealization::from_arrays(1, 2, first, second, true).is_err());
        assert!(ChannelRealization::from_arrays(1, 1, alloc::vec![f64::NAN], alloc::vec![1.0], false).is_err());
    }
}
