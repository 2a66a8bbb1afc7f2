//! Aligned network diagonalization over time-varying channels.
//!
//! Each source sends `L = N^{K²}` streams along the monomial directions of
//! `Δ_N`, one symbol per stream per block of `d = (N+1)^{K²}` steps. Relays
//! invert the `d×d` direction matrix `T[m]` to recover the aligned
//! coefficients `u_{j,s}`, then re-modulate them on directions built from
//! `H_{V,D}^{-1}` during the next block. The destinations invert the `L×L`
//! matrix `T̃[m]` on the first `L` usable steps.
//!
//! Determinant thresholds are kept as natural logs; `f64::NEG_INFINITY`
//! disables a threshold.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::{propagate, sample_time_varying, ChannelRealization, GainDistribution, Hop};
use crate::direction::{build_direction_matrix, eval_tilde_direction, relay_coefficients, DirectionSet};
use crate::linalg::{self, solve_refined, Lu, Matrix};
use crate::{math, rng, stats, Error, Result};

/// Solves whose relative residual exceeds this count as numerical erasures.
pub const RESIDUAL_LIMIT: f64 = 1e-6;

/// Default number of Monte Carlo draws behind the thresholds.
pub const DEFAULT_CALIBRATION_TRIALS: usize = 5000;

/// Fraction of the power budget the normalizations aim for.
pub const POWER_MARGIN: f64 = 0.9;

const REFINEMENT_ROUNDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TvParams {
    pub k: usize,
    pub n: u32,
    pub epsilon: f64,
    pub power: f64,
    pub sigma2: f64,
}

impl TvParams {
    pub fn new(k: usize, n: u32) -> Self {
        TvParams {
            k,
            n,
            epsilon: 0.01,
            power: 1.0,
            sigma2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("k", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::param("n", "must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::param("epsilon", "must lie in (0, 1)"));
        }
        if !(self.power > 0.0) || !self.power.is_finite() {
            return Err(Error::param("power", "must be positive and finite"));
        }
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err(Error::param("sigma2", "must be non-negative and finite"));
        }
        Ok(())
    }
}

/// All parameters of one time-varying scheme instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeInstanceTv {
    params: TvParams,
    l: usize,
    d: usize,
    gamma: f64,
    gamma_prime: f64,
    ln_delta: f64,
    ln_delta_prime: f64,
    ln_delta_dblprime: f64,
    /// Relays stay silent when their per-block load exceeds this.
    load_limit: f64,
    delta_n: DirectionSet,
    delta_n1: DirectionSet,
    /// Position of each `Δ_N` member inside `Δ_{N+1}`.
    embed: Vec<usize>,
    /// Smallest power the relay normalization is valid for.
    reference_power: f64,
}

impl SchemeInstanceTv {
    /// An uncalibrated instance: unit normalizations, thresholds disabled.
    /// Suitable for noiseless structural checks.
    pub fn new(params: TvParams) -> Result<Self> {
        params.validate()?;
        let delta_n = DirectionSet::enumerate(params.k, params.n)?;
        let delta_n1 = DirectionSet::enumerate(params.k, params.n + 1)?;
        let embed = delta_n
            .iter()
            .map(|s| delta_n1.index_of(s).expect("Δ_N is contained in Δ_{N+1}"))
            .collect();
        Ok(SchemeInstanceTv {
            l: delta_n.len(),
            d: delta_n1.len(),
            params,
            gamma: 1.0,
            gamma_prime: 1.0,
            ln_delta: f64::NEG_INFINITY,
            ln_delta_prime: f64::NEG_INFINITY,
            ln_delta_dblprime: f64::NEG_INFINITY,
            load_limit: f64::INFINITY,
            delta_n,
            delta_n1,
            embed,
            reference_power: 0.0,
        })
    }

    pub fn params(&self) -> &TvParams {
        &self.params
    }

    pub fn k(&self) -> usize {
        self.params.k
    }

    pub fn n(&self) -> u32 {
        self.params.n
    }

    /// Streams per source, `N^{K²}`.
    pub fn l(&self) -> usize {
        self.l
    }

    /// Block length, `(N+1)^{K²}`.
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn epsilon(&self) -> f64 {
        self.params.epsilon
    }

    pub fn power(&self) -> f64 {
        self.params.power
    }

    pub fn sigma2(&self) -> f64 {
        self.params.sigma2
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn gamma_prime(&self) -> f64 {
        self.gamma_prime
    }

    pub fn ln_delta(&self) -> f64 {
        self.ln_delta
    }

    pub fn ln_delta_prime(&self) -> f64 {
        self.ln_delta_prime
    }

    pub fn ln_delta_dblprime(&self) -> f64 {
        self.ln_delta_dblprime
    }

    /// `δ`, the relay direction-matrix threshold, in linear scale.
    pub fn delta(&self) -> f64 {
        math::exp(self.ln_delta)
    }

    pub fn delta_prime(&self) -> f64 {
        math::exp(self.ln_delta_prime)
    }

    pub fn delta_dblprime(&self) -> f64 {
        math::exp(self.ln_delta_dblprime)
    }

    pub fn delta_n(&self) -> &DirectionSet {
        &self.delta_n
    }

    pub fn delta_n1(&self) -> &DirectionSet {
        &self.delta_n1
    }

    /// Smallest power at which the calibrated relay normalization keeps
    /// the relays within budget; zero for uncalibrated instances.
    pub fn reference_power(&self) -> f64 {
        self.reference_power
    }

    /// Same instance at another transmit power. Normalizations and
    /// thresholds do not depend on `P`.
    pub fn with_power(&self, power: f64) -> Result<Self> {
        if power < self.reference_power {
            return Err(Error::param("power", "below the calibration reference power"));
        }
        let mut out = self.clone();
        out.params.power = power;
        out.params.validate()?;
        Ok(out)
    }

    pub fn with_sigma2(&self, sigma2: f64) -> Result<Self> {
        let mut out = self.clone();
        out.params.sigma2 = sigma2;
        out.params.validate()?;
        Ok(out)
    }

    /// Overrides the normalizations.
    pub fn with_normalization(mut self, gamma: f64, gamma_prime: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma_prime > 0.0) || !gamma.is_finite() || !gamma_prime.is_finite() {
            return Err(Error::param("gamma", "normalizations must be positive and finite"));
        }
        self.gamma = gamma;
        self.gamma_prime = gamma_prime;
        Ok(self)
    }

    /// Overrides the thresholds (natural logs of δ, δ′, δ″).
    pub fn with_ln_thresholds(mut self, ln_delta: f64, ln_delta_prime: f64, ln_delta_dblprime: f64) -> Self {
        self.ln_delta = ln_delta;
        self.ln_delta_prime = ln_delta_prime;
        self.ln_delta_dblprime = ln_delta_dblprime;
        self
    }

    /// Sets the relay load limit; `INFINITY` disables it.
    ///
    /// The load of a block is the relays' mean transmit power per unit `γ′²`
    /// at the reference power: relayed signal plus relayed noise.
    pub fn with_load_limit(mut self, limit: f64) -> Self {
        self.load_limit = limit;
        self
    }

    pub fn load_limit(&self) -> f64 {
        self.load_limit
    }

    fn check_block(&self, hop: &[Matrix]) -> Result<()> {
        if hop.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: hop.len(),
            });
        }
        if let Some(m) = hop.iter().find(|m| m.rows() != self.k() || m.cols() != self.k()) {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                found: m.rows(),
            });
        }
        Ok(())
    }

    fn check_signals(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.k() || x.cols() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.k() * self.d,
                found: x.rows() * x.cols(),
            });
        }
        Ok(())
    }
}

/// Calibration statistics kept alongside a calibrated instance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationSummary {
    pub trials: usize,
    /// `sum_{s in Δ_N} Ê[T_s²]`.
    pub source_direction_energy: f64,
    /// `Ê[1{step usable} sum_{s in Δ_{N+1}} T̃_s²]`.
    pub relay_direction_energy: f64,
    /// `Ê[||T^{-T} t̃||²]` over usable steps of non-silent blocks.
    pub relay_noise_gain: f64,
    /// Mean relay transmit power per unit `γ′²` at the calibration power.
    pub mean_relay_load: f64,
    /// Upper `ε/2`-quantile of the per-block relay load; `γ′` is set from it.
    pub relay_load_limit: f64,
    /// Per-step probability that `|det H_{V,D}| > δ′` is targeted at this value.
    pub usable_step_probability: f64,
    /// Trials where fewer than `L` usable steps were found.
    pub deficit_trials: usize,
}

/// Monte Carlo calibration of `γ`, `γ′`, `δ`, `δ′` and `δ″`.
///
/// `δ` and `δ″` are the `ε`-quantiles of `|det T[m]|` and `|det T̃[m]|`.
/// `δ′` is set so a block has fewer than `L` usable second-hop steps with
/// probability at most `ε/2`. The relay load limit is the upper
/// `ε/2`-quantile of the per-block relay load, and `γ′` puts that load at the
/// power budget at the calibration power `params.power`. Relays stay silent
/// on blocks above the limit, so every transmitted block is within budget at
/// that power and at every larger one.
pub fn calibrate(
    params: TvParams,
    dist: GainDistribution,
    trials: usize,
    seed: u64,
) -> Result<(SchemeInstanceTv, CalibrationSummary)> {
    params.validate()?;
    dist.validate()?;
    if trials < 1000 {
        return Err(Error::param("trials", "calibration needs at least 1000 trials"));
    }
    if params.power < 1.0 {
        return Err(Error::param("power", "calibration assumes P >= 1"));
    }
    let base = SchemeInstanceTv::new(params)?;
    let (k, d, l) = (base.k(), base.d(), base.l());
    let draw = |t: usize| sample_time_varying(k, d, dist, rng::derive_seed(seed, &[t as u64]));

    // Pass 1: relay direction matrices, source direction energy, second-hop determinants.
    let mut ln_det_t = Vec::with_capacity(trials);
    let mut ln_det_h = Vec::with_capacity(trials * d);
    let mut source_energy = 0.0;
    for t in 0..trials {
        let real = draw(t)?;
        let first = real.hop_block(Hop::First, 0, d)?;
        let tm = build_direction_matrix(&base.delta_n1, &first, true)?.into_matrix();
        for r in 0..d {
            source_energy += base.embed.iter().map(|&c| tm[(r, c)] * tm[(r, c)]).sum::<f64>();
        }
        ln_det_t.push(Lu::factor(&tm)?.ln_abs_det());
        for h in real.hop_block(Hop::Second, 0, d)? {
            ln_det_h.push(Lu::factor(&h)?.ln_abs_det());
        }
    }
    let source_energy = source_energy / (trials * d) as f64;
    let ln_delta = stats::lower_tail_threshold(&ln_det_t, params.epsilon)
        .ok_or_else(|| Error::Degenerate("direction-matrix determinant quantile is zero".into()))?;
    let p_usable = stats::min_success_probability(l as u64, d as u64, params.epsilon / 2.0);
    let ln_delta_prime = stats::lower_tail_threshold(&ln_det_h, 1.0 - p_usable)
        .ok_or_else(|| Error::Degenerate("second-hop determinant quantile is zero".into()))?;
    let gamma = math::sqrt(POWER_MARGIN / source_energy);

    // Pass 2: relay directions, relay noise gain and destination matrices.
    let probe = base.clone().with_ln_thresholds(ln_delta, ln_delta_prime, f64::NEG_INFINITY);
    let noise_weight = params.sigma2 / (gamma * gamma * params.power);
    let mut relay_energy = 0.0;
    let mut noise_gain = 0.0;
    let mut neg_loads = Vec::with_capacity(trials);
    let mut ln_det_tilde = Vec::with_capacity(trials);
    let mut deficit_trials = 0;
    for (t, &ln_t) in ln_det_t.iter().enumerate() {
        let real = draw(t)?;
        let second = real.hop_block(Hop::Second, 0, d)?;
        let plan = SecondHopPlan::new(&probe, &second);
        relay_energy += plan.direction_energy();
        let mut load = 0.0;
        if ln_t > ln_delta {
            let first = real.hop_block(Hop::First, 0, d)?;
            let tm = build_direction_matrix(&base.delta_n1, &first, true)?.into_matrix();
            let lu = Lu::factor(&tm)?;
            let gain = plan.noise_gain(&lu);
            noise_gain += gain;
            load = (k as f64 * plan.direction_energy() + noise_weight * gain) / d as f64;
        }
        neg_loads.push(-load);
        match DestinationPlan::new(&probe, &plan) {
            Ok(dest) => ln_det_tilde.push(dest.ln_det),
            Err(_) => deficit_trials += 1,
        }
    }
    let relay_energy = relay_energy / (trials * d) as f64;
    let noise_gain = noise_gain / (trials * d) as f64;
    let ln_delta_dblprime = stats::lower_tail_threshold(&ln_det_tilde, params.epsilon)
        .ok_or_else(|| Error::Degenerate("destination determinant quantile is zero".into()))?;
    let mean_load = k as f64 * relay_energy + noise_weight * noise_gain;
    let load_limit = -stats::lower_tail_threshold(&neg_loads, params.epsilon / 2.0)
        .ok_or_else(|| Error::Degenerate("relay load is unbounded".into()))?;
    if !(load_limit > 0.0 && load_limit.is_finite()) {
        return Err(Error::Degenerate("relay load quantile is zero".into()));
    }
    let gamma_prime = math::sqrt(POWER_MARGIN / load_limit);

    let mut inst = base
        .with_normalization(gamma, gamma_prime)?
        .with_ln_thresholds(ln_delta, ln_delta_prime, ln_delta_dblprime)
        .with_load_limit(load_limit);
    inst.reference_power = params.power;
    let summary = CalibrationSummary {
        trials,
        source_direction_energy: source_energy,
        relay_direction_energy: relay_energy,
        relay_noise_gain: noise_gain,
        mean_relay_load: mean_load,
        relay_load_limit: load_limit,
        usable_step_probability: p_usable,
        deficit_trials,
    };
    Ok((inst, summary))
}

/// Symbols `c_{i,s}[m]` for one block: row `i`, column = index in `Δ_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceBlock {
    symbols: Matrix,
}

impl SourceBlock {
    pub fn new(symbols: Matrix) -> Result<Self> {
        if !symbols.is_finite() {
            return Err(Error::param("symbols", "must be finite"));
        }
        Ok(SourceBlock { symbols })
    }

    pub fn zeros(inst: &SchemeInstanceTv) -> Self {
        SourceBlock {
            symbols: Matrix::zeros(inst.k(), inst.l()),
        }
    }

    /// `N(0, P)` symbols.
    pub fn gaussian<R: Rng + ?Sized>(inst: &SchemeInstanceTv, rng: &mut R) -> Self {
        let sd = math::sqrt(inst.power());
        let mut symbols = Matrix::zeros(inst.k(), inst.l());
        for i in 0..inst.k() {
            for x in symbols.row_mut(i) {
                *x = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        SourceBlock { symbols }
    }

    pub fn symbols(&self) -> &Matrix {
        &self.symbols
    }
}

/// `X_{S_i}[t] = γ sum_{s in Δ_N} T_s[t] c_{i,s}` for the `d` steps of a block.
pub fn encode_sources(inst: &SchemeInstanceTv, block: &SourceBlock, first_hop: &[Matrix]) -> Result<Matrix> {
    inst.check_block(first_hop)?;
    let c = block.symbols();
    if c.rows() != inst.k() || c.cols() != inst.l() {
        return Err(Error::DimensionMismatch {
            expected: inst.k() * inst.l(),
            found: c.rows() * c.cols(),
        });
    }
    let dirs = build_direction_matrix(&inst.delta_n, first_hop, false)?.into_matrix();
    let mut x = c.mul(&dirs.transpose())?;
    x.scale(inst.gamma);
    Ok(x)
}

/// One hop over a block: column `t` of the result is `H[t] x[:, t] + noise[:, t]`.
pub fn transmit(hop: &[Matrix], x: &Matrix, noise: Option<&Matrix>) -> Result<Matrix> {
    if hop.len() != x.cols() {
        return Err(Error::DimensionMismatch {
            expected: x.cols(),
            found: hop.len(),
        });
    }
    let mut y = Matrix::zeros(x.rows(), x.cols());
    for (t, h) in hop.iter().enumerate() {
        let yt = propagate(h, &x.column(t));
        for (j, v) in yt.into_iter().enumerate() {
            y[(j, t)] = v + noise.map_or(0.0, |z| z[(j, t)]);
        }
    }
    Ok(y)
}

#[derive(Debug, Clone)]
struct StepPlan {
    silent: bool,
    /// `T̃_s[t]` for `s` in `Δ_{N+1}`; empty when silent.
    tilde_row: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SecondHopPlan {
    steps: Vec<StepPlan>,
}

impl SecondHopPlan {
    fn new(inst: &SchemeInstanceTv, second_hop: &[Matrix]) -> Self {
        let steps = second_hop
            .iter()
            .map(|h| {
                let lu = Lu::factor(h).expect("hop matrices are square");
                let ln_det = lu.ln_abs_det();
                let singular = linalg::is_numerically_singular(h, &lu);
                if singular || ln_det <= inst.ln_delta_prime {
                    return StepPlan {
                        silent: true,
                        tilde_row: Vec::new(),
                    };
                }
                let b = lu.inverse();
                StepPlan {
                    silent: false,
                    tilde_row: inst.delta_n1.iter().map(|s| eval_tilde_direction(s, &b)).collect(),
                }
            })
            .collect();
        SecondHopPlan { steps }
    }

    /// `sum ||t̃||²` over usable steps.
    fn direction_energy(&self) -> f64 {
        self.steps
            .iter()
            .filter(|s| !s.silent)
            .map(|s| s.tilde_row.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// `sum ||T^-T t̃||²` over usable steps.
    fn noise_gain(&self, relay_lu: &Lu) -> f64 {
        self.steps
            .iter()
            .filter(|s| !s.silent)
            .map(|s| relay_lu.solve_transpose(&s.tilde_row).iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    fn low_det_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.silent).count()
    }
}

struct RelayPlan {
    t: Matrix,
    lu: Lu,
    ln_det: f64,
    silent_block: bool,
}

impl RelayPlan {
    fn new(inst: &SchemeInstanceTv, first_hop: &[Matrix], second: &SecondHopPlan) -> Result<Self> {
        let t = build_direction_matrix(&inst.delta_n1, first_hop, true)?.into_matrix();
        let lu = Lu::factor(&t)?;
        let ln_det = lu.ln_abs_det();
        let silent_block = lu.has_zero_pivot()
            || ln_det <= inst.ln_delta
            || (inst.load_limit < f64::INFINITY && !(relay_load(inst, &lu, second) <= inst.load_limit));
        Ok(RelayPlan {
            t,
            lu,
            ln_det,
            silent_block,
        })
    }
}

/// Relay transmit power per unit `γ′²` at the reference power.
fn relay_load(inst: &SchemeInstanceTv, lu: &Lu, second: &SecondHopPlan) -> f64 {
    let g = inst.gamma;
    let noise_weight = inst.sigma2() / (g * g * inst.reference_power);
    (inst.k() as f64 * second.direction_energy() + noise_weight * second.noise_gain(lu)) / inst.d() as f64
}

/// Why a destination output an erasure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Erasure {
    /// `|det T[m]| <= δ` or relay load above its limit: relays stayed silent
    /// for the block.
    RelayDirections,
    /// Fewer than `L` steps with `|det H_{V,D}[t]| > δ′`.
    SecondHopDeficit,
    /// `|det T̃[m]| <= δ″`.
    DestinationDirections,
    /// A solve left a relative residual above [`RESIDUAL_LIMIT`].
    Numerical,
}

impl Erasure {
    /// The three threshold events of the erasure protocol.
    pub fn is_protocol(self) -> bool {
        !matches!(self, Erasure::Numerical)
    }
}

/// Relay transmit signals for the next block.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayOutput {
    /// `K×d`, row `j` is relay `j`.
    pub transmit: Matrix,
    /// Estimated aligned coefficients, row `j` over `Δ_{N+1}`; `None` when silent.
    pub u_hat: Option<Matrix>,
    pub silent_block: bool,
    pub silent_steps: Vec<bool>,
    pub ln_abs_det_t: f64,
    pub residual: f64,
}

impl RelayOutput {
    pub fn status(&self) -> RelayStatus {
        RelayStatus {
            silent_block: self.silent_block,
            numerical_failure: self.residual > RESIDUAL_LIMIT,
        }
    }
}

/// What the destinations learn about the relays' previous block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RelayStatus {
    pub silent_block: bool,
    pub numerical_failure: bool,
}

fn relay_apply(
    inst: &SchemeInstanceTv,
    relay: &RelayPlan,
    second: &SecondHopPlan,
    received: &Matrix,
) -> RelayOutput {
    let (k, d) = (inst.k(), inst.d());
    let silent_steps: Vec<bool> = second.steps.iter().map(|s| s.silent).collect();
    let mut transmit = Matrix::zeros(k, d);
    if relay.silent_block {
        return RelayOutput {
            transmit,
            u_hat: None,
            silent_block: true,
            silent_steps,
            ln_abs_det_t: relay.ln_det,
            residual: 0.0,
        };
    }
    let mut u_hat = Matrix::zeros(k, d);
    let mut residual: f64 = 0.0;
    for j in 0..k {
        let (u, res) = solve_refined(&relay.t, &relay.lu, received.row(j), REFINEMENT_ROUNDS);
        residual = residual.max(res);
        for (dst, v) in u_hat.row_mut(j).iter_mut().zip(u) {
            *dst = v / inst.gamma;
        }
    }
    for (t, step) in second.steps.iter().enumerate() {
        if step.silent {
            continue;
        }
        for j in 0..k {
            let acc: f64 = step.tilde_row.iter().zip(u_hat.row(j)).map(|(a, b)| a * b).sum();
            transmit[(j, t)] = inst.gamma_prime * acc;
        }
    }
    RelayOutput {
        transmit,
        u_hat: Some(u_hat),
        silent_block: false,
        silent_steps,
        ln_abs_det_t: relay.ln_det,
        residual,
    }
}

/// Relay operation for one block.
///
/// `received` is `K×d` (row `j` is relay `j`), `first_hop` the `d` first-hop
/// matrices of the block just received, `second_hop_next` the `d` second-hop
/// matrices of the block the relays transmit in.
pub fn relay_process(
    inst: &SchemeInstanceTv,
    received: &Matrix,
    first_hop: &[Matrix],
    second_hop_next: &[Matrix],
) -> Result<RelayOutput> {
    inst.check_block(first_hop)?;
    inst.check_block(second_hop_next)?;
    inst.check_signals(received)?;
    let second = SecondHopPlan::new(inst, second_hop_next);
    let relay = RelayPlan::new(inst, first_hop, &second)?;
    Ok(relay_apply(inst, &relay, &second, received))
}

struct DestinationPlan {
    selected: Vec<usize>,
    tm: Matrix,
    lu: Lu,
    ln_det: f64,
}

impl DestinationPlan {
    /// Fails with the erasure cause when the block cannot be decoded.
    fn new(inst: &SchemeInstanceTv, second: &SecondHopPlan) -> core::result::Result<Self, (Erasure, f64)> {
        let l = inst.l();
        let selected: Vec<usize> = second
            .steps
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.silent)
            .map(|(t, _)| t)
            .take(l)
            .collect();
        if selected.len() < l {
            return Err((Erasure::SecondHopDeficit, f64::NAN));
        }
        let mut tm = Matrix::zeros(l, l);
        for (r, &t) in selected.iter().enumerate() {
            let row = &second.steps[t].tilde_row;
            for (c, &idx) in inst.embed.iter().enumerate() {
                tm[(r, c)] = row[idx];
            }
        }
        let lu = Lu::factor(&tm).expect("square by construction");
        let ln_det = lu.ln_abs_det();
        if lu.has_zero_pivot() || ln_det <= inst.ln_delta_dblprime {
            return Err((Erasure::DestinationDirections, ln_det));
        }
        Ok(DestinationPlan {
            selected,
            tm,
            lu,
            ln_det,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockDiagnostics {
    pub ln_abs_det_t: f64,
    /// `NaN` when the destinations never formed `T̃[m]`.
    pub ln_abs_det_tilde: f64,
    /// Steps with `|det H_{V,D}[t]| <= δ′`.
    pub low_det_steps: usize,
    /// Largest relative residual over relay and destination solves.
    pub residual: f64,
}

/// Destination output for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutcome {
    /// `ĉ_{j,s}`: row `j` is destination `j`, columns over `Δ_N`.
    pub estimates: Option<Matrix>,
    pub erasure: Option<Erasure>,
    pub diagnostics: BlockDiagnostics,
}

impl BlockOutcome {
    pub fn is_erased(&self) -> bool {
        self.erasure.is_some()
    }
}

fn destination_apply(
    inst: &SchemeInstanceTv,
    relay: RelayStatus,
    ln_det_t: f64,
    second: &SecondHopPlan,
    received: &Matrix,
) -> BlockOutcome {
    let mut diagnostics = BlockDiagnostics {
        ln_abs_det_t: ln_det_t,
        ln_abs_det_tilde: f64::NAN,
        low_det_steps: second.low_det_steps(),
        residual: 0.0,
    };
    let erased = |erasure, diagnostics| BlockOutcome {
        estimates: None,
        erasure: Some(erasure),
        diagnostics,
    };
    let plan = DestinationPlan::new(inst, second);
    if let Ok(p) = &plan {
        diagnostics.ln_abs_det_tilde = p.ln_det;
    } else if let Err((_, ln)) = &plan {
        diagnostics.ln_abs_det_tilde = *ln;
    }
    if relay.silent_block {
        return erased(Erasure::RelayDirections, diagnostics);
    }
    let plan = match plan {
        Ok(p) => p,
        Err((cause, _)) => return erased(cause, diagnostics),
    };
    let l = inst.l();
    let mut estimates = Matrix::zeros(inst.k(), l);
    let mut residual: f64 = 0.0;
    for j in 0..inst.k() {
        let y: Vec<f64> = plan.selected.iter().map(|&t| received[(j, t)]).collect();
        let (c, res) = solve_refined(&plan.tm, &plan.lu, &y, REFINEMENT_ROUNDS);
        residual = residual.max(res);
        for (dst, v) in estimates.row_mut(j).iter_mut().zip(c) {
            *dst = v / inst.gamma_prime;
        }
    }
    diagnostics.residual = residual;
    if relay.numerical_failure || residual > RESIDUAL_LIMIT {
        return erased(Erasure::Numerical, diagnostics);
    }
    BlockOutcome {
        estimates: Some(estimates),
        erasure: None,
        diagnostics,
    }
}

/// Destination operation for one block.
///
/// `received` is `K×d` (row `j` is destination `j`) over the relays'
/// transmission block, `second_hop_next` the matching second-hop matrices and
/// `relay` the relays' block-level status.
pub fn destination_decode(
    inst: &SchemeInstanceTv,
    received: &Matrix,
    second_hop_next: &[Matrix],
    relay: RelayStatus,
) -> Result<BlockOutcome> {
    inst.check_block(second_hop_next)?;
    inst.check_signals(received)?;
    let second = SecondHopPlan::new(inst, second_hop_next);
    Ok(destination_apply(inst, relay, f64::NAN, &second, received))
}

/// The noiseless end-to-end linear map of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndMap {
    /// `KL×KL`, rows and columns stacked source-major (`i * L + s`).
    /// All zeros when erased.
    pub matrix: Matrix,
    pub erasure: Option<Erasure>,
    pub diagnostics: BlockDiagnostics,
}

impl EndToEndMap {
    /// Largest off-diagonal magnitude.
    pub fn max_off_diagonal(&self) -> f64 {
        let n = self.matrix.rows();
        let mut m: f64 = 0.0;
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    m = m.max(math::abs(self.matrix[(r, c)]));
                }
            }
        }
        m
    }

    /// Largest `|diag - 1|`.
    pub fn max_diagonal_deviation(&self) -> f64 {
        (0..self.matrix.rows()).fold(0.0, |m: f64, r| m.max(math::abs(self.matrix[(r, r)] - 1.0)))
    }

    /// `max |M - I|` entrywise.
    pub fn identity_deviation(&self) -> f64 {
        self.matrix.max_abs_diff(&Matrix::identity(self.matrix.rows()))
    }
}

/// Pushes each stacked unit symbol vector through encode, first hop, relay,
/// second hop and decode without noise.
pub fn end_to_end_map(inst: &SchemeInstanceTv, first_hop: &[Matrix], second_hop_next: &[Matrix]) -> Result<EndToEndMap> {
    inst.check_block(first_hop)?;
    inst.check_block(second_hop_next)?;
    let (k, l) = (inst.k(), inst.l());
    let second = SecondHopPlan::new(inst, second_hop_next);
    let relay = RelayPlan::new(inst, first_hop, &second)?;
    let mut matrix = Matrix::zeros(k * l, k * l);
    let mut diagnostics = None;
    for col in 0..k * l {
        let mut c = Matrix::zeros(k, l);
        c[(col / l, col % l)] = 1.0;
        let x = encode_sources(inst, &SourceBlock { symbols: c }, first_hop)?;
        let y_v = transmit(first_hop, &x, None)?;
        let out = relay_apply(inst, &relay, &second, &y_v);
        let y_d = transmit(second_hop_next, &out.transmit, None)?;
        let outcome = destination_apply(inst, out.status(), relay.ln_det, &second, &y_d);
        if let Some(cause) = outcome.erasure {
            return Ok(EndToEndMap {
                matrix: Matrix::zeros(k * l, k * l),
                erasure: Some(cause),
                diagnostics: outcome.diagnostics,
            });
        }
        let est = outcome.estimates.expect("non-erased outcome has estimates");
        for j in 0..k {
            for s in 0..l {
                matrix[(j * l + s, col)] = est[(j, s)];
            }
        }
        let diag = diagnostics.get_or_insert(outcome.diagnostics);
        diag.residual = diag.residual.max(outcome.diagnostics.residual);
    }
    Ok(EndToEndMap {
        matrix,
        erasure: None,
        diagnostics: diagnostics.expect("at least one stream"),
    })
}

/// Effective noise of the parallel channels created by one block.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveNoise {
    /// Covariance of the stacked estimate errors (`KL×KL`). Never depends on `P`.
    pub covariance: Matrix,
    /// Relay-noise part of `covariance`.
    pub relay_part: Matrix,
    /// Destination-noise part of `covariance`.
    pub destination_part: Matrix,
    epsilon: f64,
    d: usize,
    l: usize,
}

impl EffectiveNoise {
    pub fn variances(&self) -> Vec<f64> {
        (0..self.covariance.rows()).map(|r| self.covariance[(r, r)]).collect()
    }

    /// `½ log2(1 + P / var)` per stream, in bits per channel use.
    pub fn stream_rates(&self, power: f64) -> Vec<f64> {
        self.variances()
            .into_iter()
            .map(|v| 0.5 * math::log2(1.0 + power / v))
            .collect()
    }

    /// `(1 - 3ε) sum_s rate_s / d` per pair, in bits per time step.
    pub fn pair_rates(&self, power: f64) -> Vec<f64> {
        let rates = self.stream_rates(power);
        rates
            .chunks(self.l)
            .map(|c| (1.0 - 3.0 * self.epsilon) * c.iter().sum::<f64>() / self.d as f64)
            .collect()
    }

    pub fn sum_rate(&self, power: f64) -> f64 {
        self.pair_rates(power).iter().sum()
    }
}

fn effective_noise_from_plans(
    inst: &SchemeInstanceTv,
    relay: &RelayPlan,
    second: &SecondHopPlan,
    dest: &DestinationPlan,
    second_hop_next: &[Matrix],
) -> EffectiveNoise {
    let (k, l, d) = (inst.k(), inst.l(), inst.d());
    // R T^{-1}, rows over the selected steps.
    let rw: Vec<Vec<f64>> = dest
        .selected
        .iter()
        .map(|&t| relay.lu.solve_transpose(&second.steps[t].tilde_row))
        .collect();
    // Relay noise z_j (length d) reaches destination k's estimate through
    // γ^{-1} T̃^{-1} diag(H[t_l][(k, j)]) R T^{-1}.
    let mut m_relay = Matrix::zeros(k * l, k * d);
    for dk in 0..k {
        for rj in 0..k {
            for col in 0..d {
                let v: Vec<f64> = dest
                    .selected
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| second_hop_next[t][(dk, rj)] * rw[r][col])
                    .collect();
                let x = dest.lu.solve(&v);
                for s in 0..l {
                    m_relay[(dk * l + s, rj * d + col)] = x[s] / inst.gamma;
                }
            }
        }
    }
    let sigma2 = inst.sigma2();
    let mut relay_part = m_relay.mul(&m_relay.transpose()).expect("conformable");
    relay_part.scale(sigma2);
    let tinv = dest.lu.inverse();
    let tt = tinv.mul(&tinv.transpose()).expect("conformable");
    let mut destination_part = Matrix::zeros(k * l, k * l);
    let scale = sigma2 / (inst.gamma_prime * inst.gamma_prime);
    for blk in 0..k {
        for r in 0..l {
            for c in 0..l {
                destination_part[(blk * l + r, blk * l + c)] = scale * tt[(r, c)];
            }
        }
    }
    let mut covariance = relay_part.clone();
    for r in 0..k * l {
        for c in 0..k * l {
            covariance[(r, c)] += destination_part[(r, c)];
        }
    }
    EffectiveNoise {
        covariance,
        relay_part,
        destination_part,
        epsilon: inst.epsilon(),
        d,
        l,
    }
}

/// Covariance of `ĉ - c` for one non-erased block. Relay noise is carried
/// through `T[m]^{-1}`, the relay re-modulation, the second hop and
/// `T̃[m]^{-1}`; destination noise only through `T̃[m]^{-1}`.
pub fn effective_noise_and_rate(
    inst: &SchemeInstanceTv,
    first_hop: &[Matrix],
    second_hop_next: &[Matrix],
) -> Result<EffectiveNoise> {
    inst.check_block(first_hop)?;
    inst.check_block(second_hop_next)?;
    let second = SecondHopPlan::new(inst, second_hop_next);
    let relay = RelayPlan::new(inst, first_hop, &second)?;
    if relay.silent_block {
        return Err(Error::ErasedBlock);
    }
    let dest = DestinationPlan::new(inst, &second).map_err(|_| Error::ErasedBlock)?;
    Ok(effective_noise_from_plans(inst, &relay, &second, &dest, second_hop_next))
}

/// Per-block record from [`simulate_blocks`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockRecord {
    pub block: usize,
    pub erasure: Option<Erasure>,
    pub diagnostics: BlockDiagnostics,
    /// Mean squared symbol error; `None` when erased.
    pub mse: Option<f64>,
    /// Sum of per-pair rates at the instance power; `None` when erased.
    pub sum_rate: Option<f64>,
    /// Mean `X²` over sources and steps of the block.
    pub source_power: f64,
    /// Mean `X²` over relays and steps of the forwarding block.
    pub relay_power: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TvSimulation {
    pub blocks: Vec<BlockRecord>,
    /// Fraction of blocks erased by a threshold event.
    pub erasure_rate: f64,
    /// Fraction of blocks erased for numerical reasons.
    pub numerical_erasure_rate: f64,
    pub mean_mse: f64,
    pub mean_sum_rate: f64,
    pub mean_source_power: f64,
    pub mean_relay_power: f64,
    pub min_ln_abs_det_t: f64,
    pub min_ln_abs_det_tilde: f64,
}

const STREAM_SYMBOLS: u64 = 1;
const STREAM_RELAY_NOISE: u64 = 2;
const STREAM_DEST_NOISE: u64 = 3;

fn gaussian_matrix(rows: usize, cols: usize, var: f64, seed: u64, stream: u64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    if var == 0.0 {
        return m;
    }
    let sd = math::sqrt(var);
    let mut r = rng::stream(seed, stream);
    for i in 0..rows {
        for x in m.row_mut(i) {
            *x = sd * r.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

fn mean_square(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum::<f64>() / m.as_slice().len() as f64
}

/// Runs `n_blocks` pipelined blocks: sources send block `m` over steps
/// `[md, (m+1)d)` while relays forward it over `[(m+1)d, (m+2)d)`.
pub fn simulate_blocks(
    inst: &SchemeInstanceTv,
    channel: &ChannelRealization,
    n_blocks: usize,
    seed: u64,
) -> Result<TvSimulation> {
    let d = inst.d();
    let required = (n_blocks + 1) * d;
    if channel.t_total() < required {
        return Err(Error::ChannelTooShort {
            required,
            available: channel.t_total(),
        });
    }
    if channel.k() != inst.k() {
        return Err(Error::DimensionMismatch {
            expected: inst.k(),
            found: channel.k(),
        });
    }
    let k = inst.k();
    let mut blocks = Vec::with_capacity(n_blocks);
    for m in 0..n_blocks {
        let block_seed = rng::derive_seed(seed, &[m as u64]);
        let first = channel.hop_block(Hop::First, m * d, d)?;
        let second = channel.hop_block(Hop::Second, (m + 1) * d, d)?;
        let mut sym_rng = rng::stream(block_seed, STREAM_SYMBOLS);
        let c = SourceBlock::gaussian(inst, &mut sym_rng);
        let x_s = encode_sources(inst, &c, &first)?;
        let z_v = gaussian_matrix(k, d, inst.sigma2(), block_seed, STREAM_RELAY_NOISE);
        let y_v = transmit(&first, &x_s, Some(&z_v))?;
        let plan = SecondHopPlan::new(inst, &second);
        let relay = RelayPlan::new(inst, &first, &plan)?;
        let out = relay_apply(inst, &relay, &plan, &y_v);
        let z_d = gaussian_matrix(k, d, inst.sigma2(), block_seed, STREAM_DEST_NOISE);
        let y_d = transmit(&second, &out.transmit, Some(&z_d))?;
        let outcome = destination_apply(inst, out.status(), relay.ln_det, &plan, &y_d);
        let (mse, sum_rate) = match &outcome.estimates {
            Some(est) => {
                let mut err = est.clone();
                for i in 0..k {
                    for (e, c) in err.row_mut(i).iter_mut().zip(c.symbols().row(i)) {
                        *e -= c;
                    }
                }
                let dest = DestinationPlan::new(inst, &plan).map_err(|_| Error::ErasedBlock)?;
                let noise = effective_noise_from_plans(inst, &relay, &plan, &dest, &second);
                (Some(mean_square(&err)), Some(noise.sum_rate(inst.power())))
            }
            None => (None, None),
        };
        blocks.push(BlockRecord {
            block: m,
            erasure: outcome.erasure,
            diagnostics: outcome.diagnostics,
            mse,
            sum_rate,
            source_power: mean_square(&x_s),
            relay_power: mean_square(&out.transmit),
        });
    }
    Ok(summarize_blocks(blocks))
}

/// Aggregates block records; used by [`simulate_blocks`] and to recompute
/// summaries from stored records.
pub fn summarize_blocks(blocks: Vec<BlockRecord>) -> TvSimulation {
    let n = blocks.len().max(1) as f64;
    let protocol = blocks
        .iter()
        .filter(|b| b.erasure.is_some_and(Erasure::is_protocol))
        .count();
    let numerical = blocks.iter().filter(|b| b.erasure == Some(Erasure::Numerical)).count();
    let mses: Vec<f64> = blocks.iter().filter_map(|b| b.mse).collect();
    let rates: Vec<f64> = blocks.iter().filter_map(|b| b.sum_rate).collect();
    let sp: Vec<f64> = blocks.iter().map(|b| b.source_power).collect();
    let rp: Vec<f64> = blocks.iter().map(|b| b.relay_power).collect();
    let min_of = |f: fn(&BlockRecord) -> f64| {
        blocks
            .iter()
            .map(f)
            .filter(|x| !x.is_nan())
            .fold(f64::INFINITY, f64::min)
    };
    TvSimulation {
        erasure_rate: protocol as f64 / n,
        numerical_erasure_rate: numerical as f64 / n,
        mean_mse: stats::mean(&mses),
        mean_sum_rate: stats::mean(&rates),
        mean_source_power: stats::mean(&sp),
        mean_relay_power: stats::mean(&rp),
        min_ln_abs_det_t: min_of(|b| b.diagnostics.ln_abs_det_t),
        min_ln_abs_det_tilde: min_of(|b| b.diagnostics.ln_abs_det_tilde),
        blocks,
    }
}

/// Draws a fresh time-varying channel long enough for `n_blocks` blocks.
pub fn sample_block_channel(
    inst: &SchemeInstanceTv,
    n_blocks: usize,
    dist: GainDistribution,
    seed: u64,
) -> Result<ChannelRealization> {
    sample_time_varying(inst.k(), (n_blocks + 1) * inst.d(), dist, seed)
}

/// First-hop block `m` and the second-hop block the relays forward it in.
pub fn block_pair(
    inst: &SchemeInstanceTv,
    channel: &ChannelRealization,
    m: usize,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let d = inst.d();
    Ok((
        channel.hop_block(Hop::First, m * d, d)?,
        channel.hop_block(Hop::Second, (m + 1) * d, d)?,
    ))
}

/// Aligned relay form `X_{V_j} = γ′ sum_{s ∈ Δ_{N+1}} T̃_s u_{j,s}` for one
/// step; `u[j]` is indexed like `Δ_{N+1}`.
pub fn relay_transmit_aligned(inst: &SchemeInstanceTv, u: &[Vec<f64>], second_hop: &Matrix) -> Result<Vec<f64>> {
    let b = relay_coefficients(second_hop)?;
    let tilde: Vec<f64> = inst.delta_n1.iter().map(|s| eval_tilde_direction(s, &b)).collect();
    Ok(u.iter()
        .map(|uj| inst.gamma_prime * tilde.iter().zip(uj).map(|(a, b)| a * b).sum::<f64>())
        .collect())
}

/// Factored relay form:
/// `X_{V_j}[t] = γ′ sum_{s in Δ_N} T̃_s[t] sum_i b_ij[t] c_{i,s}`.
pub fn relay_transmit_factored(
    inst: &SchemeInstanceTv,
    block: &SourceBlock,
    second_hop: &Matrix,
) -> Result<Vec<f64>> {
    let b = relay_coefficients(second_hop)?;
    let k = inst.k();
    let c = block.symbols();
    Ok((0..k)
        .map(|j| {
            inst.gamma_prime
                * inst
                    .delta_n
                    .iter()
                    .enumerate()
                    .map(|(idx, s)| eval_tilde_direction(s, &b) * (0..k).map(|i| b[(j, i)] * c[(i, idx)]).sum::<f64>())
                    .sum::<f64>()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direction::compute_u;

    fn block(inst: &SchemeInstanceTv, seed: u64) -> (Vec<Matrix>, Vec<Matrix>) {
        let ch = sample_block_channel(inst, 1, GainDistribution::default(), seed).unwrap();
        block_pair(inst, &ch, 0).unwrap()
    }

    fn inst(k: usize, n: u32) -> SchemeInstanceTv {
        SchemeInstanceTv::new(TvParams::new(k, n)).unwrap()
    }

    #[test]
    fn block_arithmetic() {
        let i = inst(2, 2);
        assert_eq!(i.d(), 81);
        assert_eq!(i.l(), 16);
        let i = inst(1, 1);
        assert_eq!((i.d(), i.l()), (2, 1));
        assert!(SchemeInstanceTv::new(TvParams { epsilon: 0.0, ..TvParams::new(1, 1) }).is_err());
        assert!(SchemeInstanceTv::new(TvParams { epsilon: 1.5, ..TvParams::new(1, 1) }).is_err());
    }

    #[test]
    fn zero_block_encodes_to_zero() {
        let i = inst(2, 1);
        let (first, _) = block(&i, 1);
        let x = encode_sources(&i, &SourceBlock::zeros(&i), &first).unwrap();
        assert!(x.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_unit_symbol_encodes_to_gamma() {
        let i = inst(1, 1).with_normalization(0.8, 1.0).unwrap();
        let (first, _) = block(&i, 2);
        let c = SourceBlock::new(Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        let x = encode_sources(&i, &c, &first).unwrap();
        assert_eq!(x.as_slice(), &[0.8, 0.8]);
    }

    #[test]
    fn noiseless_scalar_relay_recovers_u() {
        let i = inst(1, 1);
        let (first, second) = block(&i, 3);
        let c = SourceBlock::new(Matrix::from_rows(&[[1.7]]).unwrap()).unwrap();
        let x = encode_sources(&i, &c, &first).unwrap();
        let y = transmit(&first, &x, None).unwrap();
        let out = relay_process(&i, &y, &first, &second).unwrap();
        let u = out.u_hat.unwrap();
        // Δ_2 = {0, 1}; the single source lands entirely on exponent 1.
        assert!(u[(0, 0)].abs() < 1e-14);
        assert!((u[(0, 1)] - 1.7).abs() < 1e-14);
    }

    #[test]
    fn relay_silent_above_load_limit() {
        let mut i = inst(2, 1).with_load_limit(1e-9);
        i.reference_power = 1.0;
        let (first, second) = block(&i, 5);
        let c = SourceBlock::zeros(&i);
        let x = encode_sources(&i, &c, &first).unwrap();
        let y = transmit(&first, &x, None).unwrap();
        let out = relay_process(&i, &y, &first, &second).unwrap();
        assert!(out.silent_block);
        let open = i.with_load_limit(f64::INFINITY);
        assert!(!relay_process(&open, &y, &first, &second).unwrap().silent_block);
    }

    #[test]
    fn calibrated_load_limit_bounds_every_transmitting_block() {
        let params = TvParams {
            epsilon: 0.05,
            power: 10.0,
            ..TvParams::new(2, 1)
        };
        let (i, summary) = calibrate(params, GainDistribution::default(), 1000, 8).unwrap();
        assert_eq!(i.load_limit(), summary.relay_load_limit);
        let g2 = i.gamma_prime() * i.gamma_prime();
        assert!((g2 * summary.relay_load_limit - POWER_MARGIN).abs() < 1e-12);
        let ch = sample_block_channel(&i, 60, GainDistribution::default(), 9).unwrap();
        for m in 0..60 {
            let (first, second) = block_pair(&i, &ch, m).unwrap();
            let plan = SecondHopPlan::new(&i, &second);
            let relay = RelayPlan::new(&i, &first, &plan).unwrap();
            if !relay.silent_block {
                assert!(relay_load(&i, &relay.lu, &plan) <= i.load_limit());
            }
        }
    }

    #[test]
    fn relay_silent_below_threshold() {
        let i = inst(1, 1).with_ln_thresholds(1e6, f64::NEG_INFINITY, f64::NEG_INFINITY);
        let (first, second) = block(&i, 4);
        let y = Matrix::from_rows(&[[0.3, 0.9]]).unwrap();
        let out = relay_process(&i, &y, &first, &second).unwrap();
        assert!(out.silent_block);
        assert!(out.transmit.as_slice().iter().all(|v| *v == 0.0));
        let outcome = destination_decode(&i, &out.transmit, &second, out.status()).unwrap();
        assert_eq!(outcome.erasure, Some(Erasure::RelayDirections));
    }

    #[test]
    fn relay_forms_agree() {
        // Aligned form on exact u vs the factored form from the source symbols.
        let i = inst(2, 1).with_normalization(1.3, 0.7).unwrap();
        for seed in 0..10 {
            let (_, second) = block(&i, 100 + seed);
            let mut r = rng::stream(seed, 7);
            let c = SourceBlock::gaussian(&i, &mut r);
            let cs = vec![c.symbols().row(0).to_vec(), c.symbols().row(1).to_vec()];
            let u: Vec<Vec<f64>> = (0..2).map(|j| compute_u(i.delta_n(), i.delta_n1(), &cs, j)).collect();
            for h in &second {
                let aligned = relay_transmit_aligned(&i, &u, h).unwrap();
                let factored = relay_transmit_factored(&i, &c, h).unwrap();
                for (a, f) in aligned.iter().zip(&factored) {
                    assert!((a - f).abs() <= 1e-10 * f.abs(), "{a} vs {f}");
                }
            }
        }
    }

    #[test]
    fn noiseless_relay_output_matches_factored_form() {
        // The thresholds keep T[m]^{-1} and the T̃ entries bounded; without
        // them a near-singular step amplifies the solve error of û.
        let (i, _) = calibrate(TvParams::new(2, 1), GainDistribution::default(), 1000, 3).unwrap();
        let mut checked = 0;
        for seed in 0..20 {
            let (first, second) = block(&i, 100 + seed);
            let mut r = rng::stream(seed, 7);
            let c = SourceBlock::gaussian(&i, &mut r);
            let x = encode_sources(&i, &c, &first).unwrap();
            let y = transmit(&first, &x, None).unwrap();
            let out = relay_process(&i, &y, &first, &second).unwrap();
            if out.silent_block {
                continue;
            }
            for (t, h) in second.iter().enumerate() {
                if out.silent_steps[t] {
                    continue;
                }
                let factored = relay_transmit_factored(&i, &c, h).unwrap();
                for j in 0..2 {
                    let a = out.transmit[(j, t)];
                    assert!((a - factored[j]).abs() <= 1e-10 * factored[j].abs(), "{a} vs {}", factored[j]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn relay_estimates_match_compute_u() {
        let i = inst(2, 1);
        let (first, second) = block(&i, 8);
        let c = SourceBlock::new(Matrix::from_rows(&[[0.6], [-1.1]]).unwrap()).unwrap();
        let x = encode_sources(&i, &c, &first).unwrap();
        let y = transmit(&first, &x, None).unwrap();
        let out = relay_process(&i, &y, &first, &second).unwrap();
        let u_hat = out.u_hat.unwrap();
        let cs = vec![c.symbols().row(0).to_vec(), c.symbols().row(1).to_vec()];
        for j in 0..2 {
            let u = compute_u(i.delta_n(), i.delta_n1(), &cs, j);
            for (a, b) in u_hat.row(j).iter().zip(&u) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_pipeline_recovers_symbols() {
        let i = inst(2, 1);
        let (first, second) = block(&i, 9);
        let c = SourceBlock::new(Matrix::from_rows(&[[2.5], [-0.4]]).unwrap()).unwrap();
        let x = encode_sources(&i, &c, &first).unwrap();
        let y = transmit(&first, &x, None).unwrap();
        let out = relay_process(&i, &y, &first, &second).unwrap();
        let yd = transmit(&second, &out.transmit, None).unwrap();
        let outcome = destination_decode(&i, &yd, &second, out.status()).unwrap();
        let est = outcome.estimates.unwrap();
        assert!((est[(0, 0)] - 2.5).abs() <= 1e-9 * 2.5);
        assert!((est[(1, 0)] + 0.4).abs() <= 1e-9 * 2.5);
    }

    #[test]
    fn too_many_low_determinant_steps_erase() {
        // K = 1, N = 1: d = 2, L = 1. Make both second-hop steps fall below δ′.
        let i = inst(1, 1).with_ln_thresholds(f64::NEG_INFINITY, math::ln(10.0), f64::NEG_INFINITY);
        let first = vec![Matrix::from_rows(&[[0.7]]).unwrap(), Matrix::from_rows(&[[1.4]]).unwrap()];
        let second = vec![Matrix::from_rows(&[[2.0]]).unwrap(), Matrix::from_rows(&[[3.0]]).unwrap()];
        let y = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let out = relay_process(&i, &y, &first, &second).unwrap();
        assert_eq!(out.silent_steps, vec![true, true]);
        let outcome = destination_decode(&i, &out.transmit, &second, out.status()).unwrap();
        assert_eq!(outcome.erasure, Some(Erasure::SecondHopDeficit));
        assert_eq!(outcome.diagnostics.low_det_steps, 2);
        // One usable step (d - L = 1 low) is still decodable.
        let second = vec![Matrix::from_rows(&[[20.0]]).unwrap(), Matrix::from_rows(&[[3.0]]).unwrap()];
        let out = relay_process(&i, &y, &first, &second).unwrap();
        let yd = transmit(&second, &out.transmit, None).unwrap();
        let outcome = destination_decode(&i, &yd, &second, out.status()).unwrap();
        assert!(outcome.erasure.is_none());
    }

    #[test]
    fn scalar_end_to_end_is_one() {
        let i = inst(1, 1);
        let (first, second) = block(&i, 10);
        let e2e = end_to_end_map(&i, &first, &second).unwrap();
        assert!(e2e.erasure.is_none());
        assert!((e2e.matrix[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn two_user_end_to_end_is_identity() {
        let i = inst(2, 1);
        for seed in 0..5 {
            let (first, second) = block(&i, 20 + seed);
            let e2e = end_to_end_map(&i, &first, &second).unwrap();
            assert!(e2e.erasure.is_none());
            assert!(e2e.max_off_diagonal() <= 1e-8, "{}", e2e.max_off_diagonal());
            assert!(e2e.max_diagonal_deviation() <= 1e-8);
        }
    }

    #[test]
    fn zero_noise_has_zero_effective_variance() {
        let i = inst(2, 1).with_sigma2(0.0).unwrap();
        let (first, second) = block(&i, 11);
        let noise = effective_noise_and_rate(&i, &first, &second).unwrap();
        assert!(noise.variances().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_effective_variance_matches_hand_chain() {
        // K = 1, N = 1. With gains a0, a1 on the first hop, T = [[1, a0], [1, a1]]
        // and the source sits on exponent 1 (u = c on column 1). On a usable
        // second-hop step t1 with gain h, T̃ = [1, 1/h], the destination
        // estimate is y / (γ′ T̃_0) with T̃_0 = 1:
        //   ĉ - c = (1/γ) (1/h) [T^{-1} z_V]_1 * h  (through the second hop)
        //         + (1/γ) [T^{-1} z_V]_0 * h        (the zero-exponent column)
        //         + z_D / γ′.
        let (gamma, gamma_p, sigma2) = (0.7, 0.4, 0.3);
        let i = inst(1, 1)
            .with_normalization(gamma, gamma_p)
            .unwrap()
            .with_sigma2(sigma2)
            .unwrap();
        let (a0, a1, h) = (0.8, 1.9, 1.3);
        let first = vec![Matrix::from_rows(&[[a0]]).unwrap(), Matrix::from_rows(&[[a1]]).unwrap()];
        let second = vec![Matrix::from_rows(&[[h]]).unwrap(), Matrix::from_rows(&[[1.1]]).unwrap()];
        // T^{-1} = 1/(a1 - a0) [[a1, -a0], [-1, 1]]
        let det = a1 - a0;
        let row0 = [a1 / det, -a0 / det];
        let row1 = [-1.0 / det, 1.0 / det];
        // relay output at t1: γ′ (û_0 + û_1 / h); times h at the destination.
        let w: Vec<f64> = (0..2).map(|c| h * row0[c] + row1[c]).collect();
        let relay_gain_sq = w.iter().map(|x| x * x).sum::<f64>();
        let expected = sigma2 * (relay_gain_sq / (gamma * gamma) + 1.0 / (gamma_p * gamma_p));
        let noise = effective_noise_and_rate(&i, &first, &second).unwrap();
        let got = noise.variances()[0];
        assert!((got - expected).abs() < 1e-12 * expected, "{got} vs {expected}");
    }

    #[test]
    fn effective_noise_ignores_power() {
        let i = inst(2, 1).with_normalization(0.5, 0.3).unwrap();
        let (first, second) = block(&i, 12);
        let a = effective_noise_and_rate(&i.with_power(1.0).unwrap(), &first, &second).unwrap();
        let b = effective_noise_and_rate(&i.with_power(1e6).unwrap(), &first, &second).unwrap();
        assert_eq!(a.covariance, b.covariance);
    }

    #[test]
    fn effective_noise_matches_unit_noise_propagation() {
        // Independent route: push unit noise vectors through the real pipeline.
        let i = inst(2, 1).with_normalization(0.9, 0.6).unwrap().with_sigma2(1.0).unwrap();
        let (first, second) = block(&i, 13);
        let noise = effective_noise_and_rate(&i, &first, &second).unwrap();
        let (k, d, l) = (i.k(), i.d(), i.l());
        let zero = Matrix::zeros(k, d);
        let mut cov = Matrix::zeros(k * l, k * l);
        for hop in 0..2 {
            for j in 0..k {
                for t in 0..d {
                    let mut z = Matrix::zeros(k, d);
                    z[(j, t)] = 1.0;
                    let (zv, zd) = if hop == 0 { (&z, &zero) } else { (&zero, &z) };
                    let y = transmit(&first, &Matrix::zeros(k, d), Some(zv)).unwrap();
                    let out = relay_process(&i, &y, &first, &second).unwrap();
                    let yd = transmit(&second, &out.transmit, Some(zd)).unwrap();
                    let est = destination_decode(&i, &yd, &second, out.status()).unwrap().estimates.unwrap();
                    let v: Vec<f64> = est.as_slice().to_vec();
                    for r in 0..k * l {
                        for c in 0..k * l {
                            cov[(r, c)] += v[r] * v[c];
                        }
                    }
                }
            }
        }
        let scale = noise.covariance.max_abs();
        assert!(noise.covariance.max_abs_diff(&cov) <= 1e-9 * scale);
    }

    #[test]
    fn simulation_is_deterministic_and_noiseless_exact() {
        let i = inst(2, 1).with_sigma2(0.0).unwrap();
        let ch = sample_block_channel(&i, 6, GainDistribution::default(), 5).unwrap();
        let a = simulate_blocks(&i, &ch, 6, 77).unwrap();
        let b = simulate_blocks(&i, &ch, 6, 77).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        for blk in &a.blocks {
            if blk.erasure.is_none() {
                assert!(blk.mse.unwrap() < 1e-16);
            }
        }
        assert!(matches!(
            simulate_blocks(&i, &ch, 7, 1),
            Err(Error::ChannelTooShort { .. })
        ));
    }

    #[test]
    fn calibration_rejects_bad_inputs() {
        let p = TvParams::new(1, 1);
        assert!(calibrate(p, GainDistribution::default(), 10, 1).is_err());
        let p0 = TvParams { epsilon: 0.0, ..p };
        assert!(calibrate(p0, GainDistribution::default(), 2000, 1).is_err());
        let degenerate = GainDistribution::Uniform { low: 1.0, high: 1.0 };
        assert!(matches!(calibrate(p, degenerate, 1000, 1), Err(Error::Degenerate(_))));
    }
}
