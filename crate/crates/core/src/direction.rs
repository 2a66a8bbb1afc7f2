//! Exponent sets, monomial transmit directions and their relay replacements.
//!
//! An [`ExponentVector`] holds one exponent per link `(i, j)` (transmitter
//! `i`, receiver `j`), flattened as `i * K + j`. Direction sets enumerate
//! `{0, .., N-1}^{K²}` lexicographically on that flattening, first entry most
//! significant. Every matrix column and symbol map in the crate uses this
//! ordering.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::AddAssign;

use crate::channel::{sample_time_varying, GainDistribution, Hop};
use crate::linalg::{self, Lu, Matrix};
use crate::math;
use crate::{rng, Error, Result};

/// Default cap on `N^{K²}`.
pub const DEFAULT_SET_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExponentVector {
    k: usize,
    entries: Vec<u32>,
}

impl ExponentVector {
    pub fn zeros(k: usize) -> Self {
        ExponentVector {
            k,
            entries: vec![0; k * k],
        }
    }

    pub fn from_entries(k: usize, entries: Vec<u32>) -> Result<Self> {
        if entries.len() != k * k {
            return Err(Error::DimensionMismatch {
                expected: k * k,
                found: entries.len(),
            });
        }
        Ok(ExponentVector { k, entries })
    }

    /// Unit vector at link `(i, j)`.
    pub fn unit(k: usize, i: usize, j: usize) -> Self {
        ExponentVector::zeros(k).shift(i, j)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    /// Exponent of the gain from transmitter `i` to receiver `j`.
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.entries[i * self.k + j]
    }

    /// `self` with entry `(i, j)` incremented.
    pub fn shift(&self, i: usize, j: usize) -> Self {
        let mut out = self.clone();
        out.entries[i * self.k + j] += 1;
        out
    }

    /// `self` with entry `(i, j)` decremented, or `None` if it is zero.
    pub fn unshift(&self, i: usize, j: usize) -> Option<Self> {
        let p = i * self.k + j;
        if self.entries[p] == 0 {
            return None;
        }
        let mut out = self.clone();
        out.entries[p] -= 1;
        Some(out)
    }

    pub fn degree(&self) -> u64 {
        self.entries.iter().map(|&e| u64::from(e)).sum()
    }

    pub fn max_entry(&self) -> u32 {
        self.entries.iter().copied().max().unwrap_or(0)
    }
}

/// `{0, .., order-1}^{K²}` in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionSet {
    k: usize,
    order: u32,
    members: Vec<ExponentVector>,
}

impl DirectionSet {
    pub fn enumerate(k: usize, order: u32) -> Result<Self> {
        DirectionSet::enumerate_capped(k, order, DEFAULT_SET_CAP)
    }

    pub fn enumerate_capped(k: usize, order: u32, cap: u128) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("k", "must be at least 1"));
        }
        if order == 0 {
            return Err(Error::param("n", "must be at least 1"));
        }
        let size = set_size(k, order).ok_or(Error::SizeCap {
            size: u128::MAX,
            cap,
        })?;
        if size > cap {
            return Err(Error::SizeCap { size, cap });
        }
        let kk = k * k;
        let mut members = Vec::with_capacity(size as usize);
        let mut cur = vec![0u32; kk];
        for _ in 0..size {
            members.push(ExponentVector {
                k,
                entries: cur.clone(),
            });
            for p in (0..kk).rev() {
                cur[p] += 1;
                if cur[p] < order {
                    break;
                }
                cur[p] = 0;
            }
        }
        Ok(DirectionSet { k, order, members })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[ExponentVector] {
        &self.members
    }

    pub fn member(&self, idx: usize) -> &ExponentVector {
        &self.members[idx]
    }

    pub fn iter(&self) -> core::slice::Iter<'_, ExponentVector> {
        self.members.iter()
    }

    pub fn contains(&self, s: &ExponentVector) -> bool {
        s.k == self.k && s.entries.iter().all(|&e| e < self.order)
    }

    /// Position of `s` in the lexicographic enumeration.
    pub fn index_of(&self, s: &ExponentVector) -> Option<usize> {
        if !self.contains(s) {
            return None;
        }
        Some(
            s.entries
                .iter()
                .fold(0usize, |acc, &e| acc * self.order as usize + e as usize),
        )
    }
}

/// `order^{K²}`, or `None` on overflow.
pub fn set_size(k: usize, order: u32) -> Option<u128> {
    let kk = u32::try_from(k.checked_mul(k)?).ok()?;
    u128::from(order).checked_pow(kk)
}

/// `prod_{i,j} gains[(j, i)]^{s_ij}`, with `0^0 = 1`.
///
/// Large gains or high total degree switch to log-domain accumulation.
pub fn eval_direction(s: &ExponentVector, gains: &Matrix) -> f64 {
    let k = s.k;
    debug_assert_eq!(gains.rows(), k);
    let big = s.degree() > 64
        || (0..k).any(|i| (0..k).any(|j| s.get(i, j) > 0 && math::abs(gains[(j, i)]) > 10.0));
    if !big {
        let mut acc = 1.0;
        for i in 0..k {
            for j in 0..k {
                let e = s.get(i, j);
                if e > 0 {
                    acc *= math::powi(gains[(j, i)], e);
                }
            }
        }
        return acc;
    }
    let mut log_mag = 0.0;
    let mut negative = false;
    for i in 0..k {
        for j in 0..k {
            let e = s.get(i, j);
            if e == 0 {
                continue;
            }
            let g = gains[(j, i)];
            if g == 0.0 {
                return 0.0;
            }
            log_mag += f64::from(e) * math::ln(math::abs(g));
            if g < 0.0 && e % 2 == 1 {
                negative = !negative;
            }
        }
    }
    let mag = math::exp(log_mag);
    if negative {
        -mag
    } else {
        mag
    }
}

/// The relay-side coefficient matrix `B = H_{V,D}^{-1}`.
///
/// `b_ij`, the coefficient that replaces the first-hop gain from source `i`
/// to relay `j`, sits at `B[(j, i)]`: the same layout as the hop matrices.
pub fn relay_coefficients(second_hop: &Matrix) -> Result<Matrix> {
    linalg::invert(second_hop)
}

/// `prod_{i,j} b_ij^{s_ij}` for `b = relay_coefficients(H_{V,D})`.
pub fn eval_tilde_direction(s: &ExponentVector, b: &Matrix) -> f64 {
    eval_direction(s, b)
}

/// Alignment bookkeeping at relay `j`: `u_{j,s} = sum_i c_{i, s - e_ij}` over
/// `s` in `Δ_{N+1}`, where terms whose index leaves `Δ_N` are zero.
///
/// `c[i]` holds source `i`'s symbols indexed by position in `delta_n`.
pub fn compute_u<T>(delta_n: &DirectionSet, delta_n1: &DirectionSet, c: &[Vec<T>], j: usize) -> Vec<T>
where
    T: Copy + Default + AddAssign,
{
    let k = delta_n.k();
    debug_assert_eq!(delta_n1.order(), delta_n.order() + 1);
    delta_n1
        .iter()
        .map(|s| {
            let mut acc = T::default();
            for (i, ci) in c.iter().enumerate().take(k) {
                if let Some(prev) = s.unshift(i, j) {
                    if let Some(idx) = delta_n.index_of(&prev) {
                        acc += ci[idx];
                    }
                }
            }
            acc
        })
        .collect()
}

/// Indices into `delta_n1` that relay `j` can receive energy on: the shifts
/// `s + e_ij` for `s` in `Δ_N` and every source `i`. Sorted, duplicate-free.
pub fn relay_support(delta_n: &DirectionSet, delta_n1: &DirectionSet, j: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = delta_n
        .iter()
        .flat_map(|s| (0..delta_n.k()).map(move |i| s.shift(i, j)))
        .filter_map(|s| delta_n1.index_of(&s))
        .collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Direction values, one row per time step, one column per set member.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionMatrix {
    matrix: Matrix,
}

impl DirectionMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn is_square(&self) -> bool {
        self.matrix.is_square()
    }
}

/// Entry `(r, c)` is `eval_direction(member c, gains[r])`. With
/// `square = true` the row count must equal the set size.
pub fn build_direction_matrix(
    directions: &DirectionSet,
    gains: &[Matrix],
    square: bool,
) -> Result<DirectionMatrix> {
    build_with(directions, gains, square, eval_direction)
}

/// Same as [`build_direction_matrix`] but each row holds relay directions
/// evaluated on `relay_coefficients(second_hop[r])`.
pub fn build_tilde_matrix(
    directions: &DirectionSet,
    second_hop: &[Matrix],
    square: bool,
) -> Result<DirectionMatrix> {
    let bs = second_hop
        .iter()
        .map(relay_coefficients)
        .collect::<Result<Vec<_>>>()?;
    build_with(directions, &bs, square, eval_tilde_direction)
}

fn build_with(
    directions: &DirectionSet,
    rows: &[Matrix],
    square: bool,
    f: fn(&ExponentVector, &Matrix) -> f64,
) -> Result<DirectionMatrix> {
    if square && rows.len() != directions.len() {
        return Err(Error::DimensionMismatch {
            expected: directions.len(),
            found: rows.len(),
        });
    }
    for g in rows {
        if g.rows() != directions.k() || g.cols() != directions.k() {
            return Err(Error::DimensionMismatch {
                expected: directions.k(),
                found: g.rows(),
            });
        }
    }
    let cols = directions.len();
    let mut m = Matrix::zeros(rows.len(), cols);
    for (r, g) in rows.iter().enumerate() {
        let row = m.row_mut(r);
        for (c, s) in directions.iter().enumerate() {
            row[c] = f(s, g);
        }
    }
    Ok(DirectionMatrix { matrix: m })
}

/// Outcome of repeated determinant checks on random direction matrices.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IndependenceReport {
    pub trials: usize,
    /// Smallest `|det|` seen (may underflow to 0 for large matrices).
    pub min_abs_det: f64,
    /// Smallest `ln |det|`.
    pub min_ln_abs_det: f64,
    /// Smallest `ln(|det| / prod ||col||)`.
    pub min_ln_hadamard_ratio: f64,
    /// Smallest reciprocal 1-norm condition number after equilibration.
    pub min_rcond: f64,
    /// Draws flagged singular by [`linalg::is_numerically_singular`].
    pub failures: usize,
}

/// Determinant statistics for one square matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeterminantCheck {
    pub ln_abs_det: f64,
    pub ln_hadamard_ratio: f64,
    pub rcond: f64,
    pub singular: bool,
}

pub fn determinant_check(m: &Matrix) -> Result<DeterminantCheck> {
    let lu = Lu::factor(m)?;
    Ok(DeterminantCheck {
        ln_abs_det: lu.ln_abs_det(),
        ln_hadamard_ratio: linalg::ln_hadamard_ratio(m, &lu),
        rcond: {
            let e = linalg::equilibrate(m);
            linalg::reciprocal_condition(&e, &Lu::factor(&e)?)
        },
        singular: linalg::is_numerically_singular(m, &lu),
    })
}

fn summarize(checks: &[DeterminantCheck]) -> IndependenceReport {
    let min_ln = checks
        .iter()
        .map(|c| c.ln_abs_det)
        .fold(f64::INFINITY, f64::min);
    IndependenceReport {
        trials: checks.len(),
        min_abs_det: math::exp(min_ln),
        min_ln_abs_det: min_ln,
        min_ln_hadamard_ratio: checks
            .iter()
            .map(|c| c.ln_hadamard_ratio)
            .fold(f64::INFINITY, f64::min),
        min_rcond: checks.iter().map(|c| c.rcond).fold(f64::INFINITY, f64::min),
        failures: checks.iter().filter(|c| c.singular).count(),
    }
}

fn random_block(k: usize, len: usize, dist: GainDistribution, seed: u64, hop: Hop) -> Result<Vec<Matrix>> {
    sample_time_varying(k, len, dist, seed)?.hop_block(hop, 0, len)
}

/// Lemma-style check: over `trials` independent draws of `|directions|`
/// first-hop matrices, how often is the monomial matrix singular?
pub fn check_monomial_independence(
    directions: &DirectionSet,
    trials: usize,
    dist: GainDistribution,
    seed: u64,
) -> Result<IndependenceReport> {
    let n = directions.len();
    let checks = (0..trials)
        .map(|t| {
            let gains = random_block(directions.k(), n, dist, rng::derive_seed(seed, &[t as u64]), Hop::First)?;
            determinant_check(build_direction_matrix(directions, &gains, true)?.matrix())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&checks))
}

/// As [`check_monomial_independence`], with relay directions evaluated on
/// independently drawn second-hop matrices. Draws whose second-hop matrix is
/// itself singular are redrawn.
pub fn check_tilde_independence(
    directions: &DirectionSet,
    trials: usize,
    dist: GainDistribution,
    seed: u64,
) -> Result<IndependenceReport> {
    let n = directions.len();
    let k = directions.k();
    let checks = (0..trials)
        .map(|t| {
            let mut attempt = 0u64;
            loop {
                let s = rng::derive_seed(seed, &[t as u64, attempt]);
                let hs = random_block(k, n, dist, s, Hop::Second)?;
                match build_tilde_matrix(directions, &hs, true) {
                    Ok(m) => return determinant_check(m.matrix()),
                    Err(Error::Singular) if attempt < 16 => attempt += 1,
                    Err(e) => return Err(e),
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&checks))
}
