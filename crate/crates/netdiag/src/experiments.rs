//! One runner per mode. Each returns its table and a summary derived from
//! the table's records.

use netdiag_core::constant::{pair_rate_bits, sample_accepted_instance, sweep_point, ConstParams, ErrorSweep};
use netdiag_core::dof::{
    baseline_table, estimate_dof_slope, format_rational, mimo_reduction, mimo_region_contains, multihop_dof,
    rational_to_f64, tv_sum_dof, MimoProfile, SchemeFormula,
};
use netdiag_core::tv::{
    block_pair, calibrate, effective_noise_and_rate, end_to_end_map, sample_block_channel, simulate_blocks,
    CalibrationSummary, Erasure, SchemeInstanceTv, TvParams,
};
use netdiag_core::{rng, stats, GainDistribution};
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{ExperimentConfig, Mode};
use crate::report::{Cell, Table};
use crate::Failure;

/// Attempts before a constant-channel run gives up on finding an accepted draw.
const MAX_CONSTANT_DRAWS: usize = 100;

/// Seed path labels, one per independent random stream of a run.
mod label {
    pub const CALIBRATION: u64 = 1;
    pub const CHANNEL: u64 = 2;
    pub const SIMULATION: u64 = 3;
    pub const SYMBOLS: u64 = 4;
    pub const TUPLES: u64 = 5;
    pub const LAYERS: u64 = 6;
}

pub type Outcome = (Table, Map<String, Value>);

pub fn run_mode(mode: Mode, cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    match mode {
        Mode::Diagonalize => diagonalize(cfg),
        Mode::SimulateTv => simulate_tv(cfg),
        Mode::SimulateConst => simulate_const(cfg),
        Mode::DofSweep => dof_sweep(cfg),
        Mode::Baselines => baselines(cfg),
        Mode::MimoRegion => mimo_region(cfg),
        Mode::Multihop => multihop(cfg),
    }
}

fn seed(cfg: &ExperimentConfig, path: &[u64]) -> u64 {
    rng::derive_seed(cfg.seed, path)
}

fn dist(cfg: &ExperimentConfig) -> GainDistribution {
    cfg.dist.0
}

fn erasure_name(e: Option<Erasure>) -> Cell {
    match e {
        None => Cell::Null,
        Some(Erasure::RelayDirections) => "relay-directions".into(),
        Some(Erasure::SecondHopDeficit) => "second-hop-deficit".into(),
        Some(Erasure::DestinationDirections) => "destination-directions".into(),
        Some(Erasure::Numerical) => "numerical".into(),
    }
}

fn calibrated(cfg: &ExperimentConfig, power: f64) -> Result<(SchemeInstanceTv, CalibrationSummary), Failure> {
    let params = TvParams {
        k: cfg.k,
        n: cfg.n,
        epsilon: cfg.epsilon,
        power,
        sigma2: cfg.sigma2,
    };
    Ok(calibrate(params, dist(cfg), cfg.calibration_trials, seed(cfg, &[label::CALIBRATION]))?)
}

fn instance_summary(inst: &SchemeInstanceTv, cal: &CalibrationSummary) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("block_length".into(), json!(inst.d()));
    m.insert("streams_per_pair".into(), json!(inst.l()));
    m.insert("gamma".into(), json!(inst.gamma()));
    m.insert("gamma_prime".into(), json!(inst.gamma_prime()));
    m.insert("ln_delta".into(), json!(inst.ln_delta()));
    m.insert("ln_delta_prime".into(), json!(inst.ln_delta_prime()));
    m.insert("ln_delta_dblprime".into(), json!(inst.ln_delta_dblprime()));
    m.insert("reference_power".into(), json!(inst.reference_power()));
    m.insert("calibration".into(), serde_json::to_value(cal).unwrap_or(Value::Null));
    m
}

fn diagonalize(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    // Noiseless: the power only sets the reference the scalings are fixed at.
    let (inst, cal) = calibrated(cfg, cfg.p_grid.first().copied().unwrap_or(1.0).max(1.0))?;
    let rows = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let ch = sample_block_channel(&inst, 1, dist(cfg), seed(cfg, &[label::CHANNEL, trial]))?;
            let (first, second) = block_pair(&inst, &ch, 0)?;
            let map = end_to_end_map(&inst, &first, &second)?;
            let erased = map.erasure.is_some();
            let value = |x: f64| if erased { Cell::Null } else { Cell::float(x) };
            Ok(vec![
                trial.into(),
                erased.into(),
                erasure_name(map.erasure),
                value(map.max_off_diagonal()),
                value(map.max_diagonal_deviation()),
                value(map.identity_deviation()),
                Cell::float(map.diagnostics.ln_abs_det_t),
                Cell::float(map.diagnostics.ln_abs_det_tilde),
            ])
        })
        .collect::<Result<Vec<_>, netdiag_core::Error>>()?;
    let mut table = Table::new(
        &[
            "trial",
            "erased",
            "erasure",
            "max_off_diagonal",
            "max_diagonal_deviation",
            "max_identity_deviation",
            "ln_abs_det_relay_matrix",
            "ln_abs_det_destination_matrix",
        ],
        None,
        &["erased", "max_off_diagonal", "max_identity_deviation"],
    );
    rows.into_iter().for_each(|r| table.push(r));
    let mut summary = instance_summary(&inst, &cal);
    let worst = |name: &str| {
        table
            .column(name)
            .unwrap()
            .iter()
            .filter_map(|c| c.as_f64())
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
    };
    summary.insert("max_off_diagonal".into(), json!(worst("max_off_diagonal")));
    summary.insert("max_identity_deviation".into(), json!(worst("max_identity_deviation")));
    Ok((table, summary))
}

fn simulate_tv(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let (template, cal) = calibrated(cfg, cfg.p_grid[0])?;
    let blocks = cfg.trials as usize;
    let ch = sample_block_channel(&template, blocks, dist(cfg), seed(cfg, &[label::CHANNEL]))?;
    let sims = cfg
        .p_grid
        .par_iter()
        .map(|&p| {
            let inst = template.with_power(p)?;
            simulate_blocks(&inst, &ch, blocks, seed(cfg, &[label::SIMULATION])).map(|s| (p, s))
        })
        .collect::<Result<Vec<_>, netdiag_core::Error>>()?;
    let mut table = Table::new(
        &[
            "power",
            "block",
            "erased",
            "erasure",
            "mse",
            "sum_rate_bits_per_step",
            "source_power_over_p",
            "relay_power_over_p",
            "ln_abs_det_relay_matrix",
            "ln_abs_det_destination_matrix",
        ],
        Some("power"),
        &[
            "erased",
            "mse",
            "sum_rate_bits_per_step",
            "source_power_over_p",
            "relay_power_over_p",
        ],
    );
    for (p, sim) in &sims {
        for b in &sim.blocks {
            table.push(vec![
                Cell::Float(*p),
                b.block.into(),
                b.erasure.is_some().into(),
                erasure_name(b.erasure),
                Cell::opt(b.mse),
                Cell::opt(b.sum_rate),
                Cell::float(b.source_power / p),
                Cell::float(b.relay_power / p),
                Cell::float(b.diagnostics.ln_abs_det_t),
                Cell::float(b.diagnostics.ln_abs_det_tilde),
            ]);
        }
    }
    Ok((table, instance_summary(&template, &cal)))
}

fn simulate_const(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let params = ConstParams {
        k: cfg.k,
        n: cfg.n,
        epsilon: cfg.epsilon,
        power: cfg.p_grid[0],
        sigma2: cfg.sigma2,
    };
    let draw = sample_accepted_instance(params, dist(cfg), seed(cfg, &[label::CHANNEL]), MAX_CONSTANT_DRAWS)?;
    let points = cfg
        .p_grid
        .par_iter()
        .enumerate()
        .map(|(idx, &p)| {
            let inst = draw.instance.with_power(p)?;
            let point = sweep_point(&inst, cfg.trials, seed(cfg, &[label::SYMBOLS, idx as u64]))?;
            Ok((point, pair_rate_bits(&inst)))
        })
        .collect::<Result<Vec<_>, netdiag_core::Error>>()?;
    let mut table = Table::new(
        &[
            "power",
            "q",
            "trials",
            "relay_errors",
            "destination_errors",
            "end_to_end_errors",
            "symbol_error_rate",
            "wilson_low",
            "wilson_high",
            "min_relay_distance",
            "destination_distance",
            "pair_rate_bits_per_use",
        ],
        None,
        &["symbol_error_rate"],
    );
    for (pt, rate) in &points {
        let (lo, hi) = pt.end_to_end_interval();
        table.push(vec![
            Cell::Float(pt.power),
            pt.q.into(),
            pt.trials.into(),
            pt.relay_errors.into(),
            pt.destination_errors.into(),
            pt.end_to_end_errors.into(),
            Cell::float(pt.end_to_end_rate()),
            Cell::float(lo),
            Cell::float(hi),
            Cell::float(pt.distances.min_relay()),
            Cell::float(pt.distances.destination),
            Cell::float(*rate),
        ]);
    }
    let sweep = ErrorSweep {
        points: points.into_iter().map(|(p, _)| p).collect(),
    };
    let mut summary = Map::new();
    summary.insert("accepted_draw_seed".into(), json!(draw.seed));
    summary.insert("rejected_draws".into(), json!(draw.rejections));
    summary.insert("block_dimension".into(), json!(draw.instance.d()));
    summary.insert("streams_per_pair".into(), json!(draw.instance.l()));
    summary.insert("non_increasing".into(), json!(sweep.is_non_increasing()));
    Ok((table, summary))
}

fn dof_sweep(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let (inst, cal) = calibrated(cfg, cfg.p_grid[0])?;
    let blocks = cfg.trials as usize;
    let ch = sample_block_channel(&inst, blocks, dist(cfg), seed(cfg, &[label::CHANNEL]))?;
    let noises = (0..blocks)
        .into_par_iter()
        .map(|m| {
            let (first, second) = block_pair(&inst, &ch, m)?;
            match effective_noise_and_rate(&inst, &first, &second) {
                Ok(z) => Ok(Some(z)),
                Err(netdiag_core::Error::ErasedBlock) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>, netdiag_core::Error>>()?;
    let mut table = Table::new(
        &["power", "block", "erased", "sum_rate_bits_per_step"],
        Some("power"),
        &["sum_rate_bits_per_step"],
    );
    for &p in &cfg.p_grid {
        for (m, z) in noises.iter().enumerate() {
            table.push(vec![
                Cell::Float(p),
                m.into(),
                z.is_none().into(),
                z.as_ref().map_or(Cell::Null, |z| Cell::float(z.sum_rate(p))),
            ]);
        }
    }
    let mut summary = instance_summary(&inst, &cal);
    let means: Vec<(f64, f64)> = cfg
        .p_grid
        .iter()
        .map(|&p| {
            let xs: Vec<f64> = noises.iter().flatten().map(|z| z.sum_rate(p)).collect();
            (p, stats::mean(&xs))
        })
        .collect();
    summary.insert("decoded_blocks".into(), json!(noises.iter().flatten().count()));
    summary.insert("target_slope".into(), json!(tv_sum_dof(cfg.k, cfg.n, cfg.epsilon)));
    match estimate_dof_slope(&means) {
        Ok(est) => {
            summary.insert("slope".into(), json!(est.slope));
            summary.insert("slope_half_width".into(), json!(est.half_width));
            summary.insert("slope_points".into(), json!(est.points_used));
        }
        Err(e) => {
            summary.insert("slope".into(), Value::Null);
            summary.insert("slope_error".into(), json!(e.to_string()));
        }
    }
    Ok((table, summary))
}

fn column_stem(f: SchemeFormula) -> String {
    f.name().replace('-', "_")
}

fn baselines(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let mut columns = vec!["k".to_string()];
    for f in SchemeFormula::ALL {
        columns.push(format!("{}_sum_dof", column_stem(f)));
    }
    for f in SchemeFormula::ALL {
        columns.push(format!("{}_exact", column_stem(f)));
    }
    let names: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut table = Table::new(&names, None, &[]);
    let mut neutralization_wins = Vec::new();
    for row in baseline_table(cfg.k_max) {
        let mut cells: Vec<Cell> = vec![row.k.into()];
        cells.extend(row.values.iter().map(|(_, r)| Cell::float(rational_to_f64(*r))));
        cells.extend(row.values.iter().map(|(_, r)| Cell::Text(format_rational(*r))));
        table.push(cells);
        let value = |f: SchemeFormula| row.values.iter().find(|(g, _)| *g == f).map(|(_, r)| *r).unwrap();
        let n = value(SchemeFormula::Neutralization);
        if n > value(SchemeFormula::InterferenceChannel) && n > value(SchemeFormula::XChannel) {
            neutralization_wins.push(row.k);
        }
    }
    let mut summary = Map::new();
    summary.insert("neutralization_beats_decoupled_at".into(), json!(neutralization_wins));
    Ok((table, summary))
}

fn mimo_region(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let profile = MimoProfile::new(
        cfg.source_antennas.clone(),
        cfg.destination_antennas.clone(),
        cfg.relay_antennas.clone(),
    )?;
    let limits: Vec<u32> = (0..profile.pairs())
        .map(|i| profile.source_antennas[i].min(profile.destination_antennas[i]))
        .collect();
    let rows = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut r = rng::stream(seed(cfg, &[label::TUPLES, trial]), 0);
            // Half the tuples are integral so they can be reduced.
            let integral = r.random_bool(0.5);
            let tuple: Vec<f64> = limits
                .iter()
                .map(|&lim| {
                    if integral {
                        f64::from(r.random_range(0..=lim + 1))
                    } else {
                        r.random_range(0.0..=f64::from(lim) + 1.0)
                    }
                })
                .collect();
            let check = mimo_region_contains(&profile, &tuple)?;
            let reduction = if integral && check.contained {
                let d: Vec<u32> = tuple.iter().map(|&x| x as u32).collect();
                Some(mimo_reduction(&profile, &d)?)
            } else {
                None
            };
            let violations: Vec<String> = check
                .violations
                .iter()
                .map(|v| serde_json::to_value(v).ok().and_then(|v| v["kind"].as_str().map(str::to_string)).unwrap_or_default())
                .collect();
            Ok(vec![
                trial.into(),
                Cell::Text(tuple.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")),
                check.contained.into(),
                Cell::Text(violations.join(";")),
                reduction.as_ref().map_or(Cell::Null, |r| r.k_prime.into()),
                reduction.as_ref().map_or(Cell::Null, |r| r.is_balanced().into()),
            ])
        })
        .collect::<Result<Vec<_>, netdiag_core::Error>>()?;
    let mut table = Table::new(
        &["trial", "tuple", "contained", "violations", "reduced_pairs", "balanced"],
        None,
        &["contained"],
    );
    rows.into_iter().for_each(|r| table.push(r));
    let mut summary = Map::new();
    summary.insert("profile".into(), serde_json::to_value(&profile).unwrap_or(Value::Null));
    Ok((table, summary))
}

fn multihop(cfg: &ExperimentConfig) -> Result<Outcome, Failure> {
    let k = cfg.k as u64;
    let profiles: Vec<Vec<u64>> = if cfg.layers.is_empty() {
        (0..cfg.trials)
            .map(|trial| {
                let mut r = rng::stream(seed(cfg, &[label::LAYERS, trial]), 0);
                let depth = r.random_range(1..=4);
                (0..depth).map(|_| r.random_range(1..=2 * k)).collect()
            })
            .collect()
    } else {
        vec![cfg.layers.clone()]
    };
    let mut table = Table::new(&["trial", "k", "middle_layers", "sum_dof"], None, &["sum_dof"]);
    for (trial, layers) in profiles.iter().enumerate() {
        table.push(vec![
            trial.into(),
            k.into(),
            Cell::Text(layers.iter().map(u64::to_string).collect::<Vec<_>>().join(";")),
            multihop_dof(layers, k).into(),
        ]);
    }
    Ok((table, Map::new()))
}
