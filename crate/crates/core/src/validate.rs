//! Monte Carlo cross-validation: the pathwise driver-integral estimate of
//! the mean-deviation objective must reproduce the constructed value
//! function, and no instantaneous policy deviation may improve it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::drivers::Driver;
use crate::equilibrium::{self, EquilibriumSolution};
use crate::error::{Error, Result};
use crate::market::{
    cell_dynamics, gbm_step, gbm_step_with, merge_grids, sample_cell_jumps, CellDynamics,
    MarketModel, Policy,
};

/// Outcome of the objective-identity validation.
///
/// `objective = mean - gamma * deviation` holds identically by construction;
/// targets are the policy-exact coefficients `x0 b(0)`, `x0 d(0)` and
/// `V(0, x0) = x0 (b(0) - gamma d(0))`. Runtime is kept out of the
/// serialized report so artifacts stay byte-identical across runs.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub n_paths: usize,
    pub seed: u64,
    pub mean: f64,
    pub mean_se: f64,
    pub deviation: f64,
    pub deviation_se: f64,
    pub objective: f64,
    pub objective_se: f64,
    pub target_mean: f64,
    pub target_deviation: f64,
    pub target_value: f64,
    pub z_mean: f64,
    pub z_deviation: f64,
    pub z_objective: f64,
    pub pass_mean: bool,
    pub pass_deviation: bool,
    pub pass_objective: bool,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.pass_mean && self.pass_deviation && self.pass_objective
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn z_and_pass(estimate: f64, target: f64, se: f64) -> (f64, bool) {
    let diff = estimate - target;
    let slack = 3.0 * se + 1e-12 * target.abs().max(1.0);
    let z = if se > 0.0 { diff / se } else { 0.0 };
    (z, diff.abs() <= slack)
}

/// Time integral `int_{s0}^{s1} E[X_s / X_{s0}] b(s) ds` over one jump-free
/// segment inside a constant-allocation cell, with `b(s)` the policy growth
/// factor. The conditional-mean substitution keeps the estimator unbiased;
/// the raw time integral of a GBM path has no closed form.
fn segment_weight(cell: &CellDynamics, b_cell_end: f64, s0: f64, s1: f64) -> f64 {
    let tau = s1 - s0;
    if tau <= 0.0 {
        return 0.0;
    }
    let b_s0 = b_cell_end * (cell.mu_total * (cell.end - s0)).exp();
    // delta = drift between jumps minus total drift = -compensator drift
    let delta = cell.mu_between_jumps - cell.mu_total;
    let iota = if delta == 0.0 {
        tau
    } else {
        (delta * tau).exp_m1() / delta
    };
    b_s0 * iota
}

/// Estimates `E[X_T]`, the deviation `D_0(X_T)` via the pathwise linear-h
/// reduction `int_0^T X_{s-} b(s) ghat(pi(s)) ds`, and the objective
/// `J = E[X_T] - gamma D_0`, with standard errors and z-scores against the
/// policy-exact targets. The policy must be deterministic (piecewise
/// constant), which is what `Policy` encodes.
pub fn estimate_objective(
    model: &MarketModel,
    driver: &Driver,
    gamma: f64,
    policy: &Policy,
    x0: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be finite and > 0, got {gamma}"
        )));
    }
    if !(x0.is_finite() && x0 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "initial wealth must be > 0, got {x0}"
        )));
    }
    if n_paths < 2 {
        return Err(Error::InvalidParameter("need at least two paths".into()));
    }
    if !driver.is_positively_homogeneous() {
        return Err(Error::InvalidParameter(
            "the pathwise reduction needs a positively homogeneous driver".into(),
        ));
    }
    let started = std::time::Instant::now();

    let (b0, d0) = equilibrium::policy_coefficients(model, driver, policy, 0.0)?;
    let grid = policy.grid().to_vec();
    let cells = cell_dynamics(model, policy, &grid);
    let mut ghat_cell = Vec::with_capacity(cells.len());
    for cell in &cells {
        ghat_cell.push(equilibrium::ghat(model, driver, &cell.allocation)?);
    }
    // growth factor at each cell end
    let mut b_end = vec![1.0; cells.len()];
    let mut acc = 0.0_f64;
    for i in (0..cells.len()).rev() {
        b_end[i] = acc.exp();
        acc += cells[i].mu_total * (cells[i].end - cells[i].start);
    }

    let per_path: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut x = x0;
            let mut dev = 0.0;
            for (i, cell) in cells.iter().enumerate() {
                let events = sample_cell_jumps(model.measure(), cell.start, cell.end, &mut rng);
                let mut now = cell.start;
                for (time, atom) in events {
                    dev += x * ghat_cell[i] * segment_weight(cell, b_end[i], now, time);
                    x = gbm_step(x, cell, time - now, &mut rng);
                    x *= cell.jump_factors[atom];
                    now = time;
                }
                dev += x * ghat_cell[i] * segment_weight(cell, b_end[i], now, cell.end);
                x = gbm_step(x, cell, cell.end - now, &mut rng);
            }
            (x, dev)
        })
        .collect();

    let terminal: Vec<f64> = per_path.iter().map(|(x, _)| *x).collect();
    let deviations: Vec<f64> = per_path.iter().map(|(_, d)| *d).collect();
    let objectives: Vec<f64> = per_path.iter().map(|(x, d)| x - gamma * d).collect();

    let (mean, mean_se) = mean_and_se(&terminal);
    let (deviation, deviation_se) = mean_and_se(&deviations);
    let (objective, objective_se) = mean_and_se(&objectives);

    let target_mean = x0 * b0;
    let target_deviation = x0 * d0;
    let target_value = x0 * (b0 - gamma * d0);
    let (z_mean, pass_mean) = z_and_pass(mean, target_mean, mean_se);
    let (z_deviation, pass_deviation) = z_and_pass(deviation, target_deviation, deviation_se);
    let (z_objective, pass_objective) = z_and_pass(objective, target_value, objective_se);

    Ok(ValidationReport {
        n_paths,
        seed,
        mean,
        mean_se,
        deviation,
        deviation_se,
        objective,
        objective_se,
        target_mean,
        target_deviation,
        target_value,
        z_mean,
        z_deviation,
        z_objective,
        pass_mean,
        pass_deviation,
        pass_objective,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Result of one perturbation comparison `J_t^{pi*} - J_t^{pi(h)}`.
/// A pass means the difference is not significantly negative; this is a
/// necessary-condition check at finite h, not a verification of the
/// limiting inequality.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    pub t: f64,
    pub h_step: f64,
    pub alt_head: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub diff_mean: f64,
    pub diff_se: f64,
    pub diff_over_h: f64,
    pub pass: bool,
}

/// Compares the equilibrium policy against the perturbed policy that plays
/// `alt_head` on [t, t + h) and the equilibrium afterwards, by
/// common-random-number Monte Carlo from state (t, 1): both wealth paths
/// share jump times, jump marks and normal variates. J is linear in wealth,
/// so unit initial wealth is without loss.
pub fn perturbation_test(
    model: &MarketModel,
    driver: &Driver,
    gamma: f64,
    solution: &EquilibriumSolution,
    t: f64,
    h_step: f64,
    alt_head: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PerturbationReport> {
    let horizon = solution.horizon();
    if !(h_step > 0.0 && t >= 0.0 && t + h_step <= horizon + 1e-12) {
        return Err(Error::OutOfRange(format!(
            "need 0 <= t and t + h <= {horizon}, got t = {t}, h = {h_step}"
        )));
    }
    if n_paths < 2 {
        return Err(Error::InvalidParameter("need at least two paths".into()));
    }
    let base = equilibrium::equilibrium_policy(model, driver, solution)?;
    if alt_head.len() != base.n_assets() {
        return Err(Error::DimensionMismatch(format!(
            "alternative head has {} entries, model has {}",
            alt_head.len(),
            base.n_assets()
        )));
    }
    if !crate::market::is_admissible(alt_head) {
        return Err(Error::InadmissibleAllocation(format!("{alt_head:?}")));
    }

    // shared grid: equilibrium breakpoints plus the perturbation window
    let points = merge_grids(base.grid(), &[t, t + h_step]);
    let base_alloc: Vec<Vec<f64>> = points
        .windows(2)
        .map(|w| base.allocation_at(w[0]).to_vec())
        .collect();
    let pert_alloc: Vec<Vec<f64>> = points
        .windows(2)
        .map(|w| {
            if w[0] >= t && w[1] <= t + h_step {
                alt_head.to_vec()
            } else {
                base.allocation_at(w[0]).to_vec()
            }
        })
        .collect();
    let base_policy = Policy::new(points.clone(), base_alloc)?;
    let pert_policy = Policy::new(points.clone(), pert_alloc)?;

    // restrict to cells in [t, T]
    let cells_base: Vec<CellDynamics> = cell_dynamics(model, &base_policy, &points)
        .into_iter()
        .filter(|c| c.end > t)
        .collect();
    let cells_pert: Vec<CellDynamics> = cell_dynamics(model, &pert_policy, &points)
        .into_iter()
        .filter(|c| c.end > t)
        .collect();

    let prep = |cells: &[CellDynamics]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut ghat = Vec::with_capacity(cells.len());
        for cell in cells {
            ghat.push(equilibrium::ghat(model, driver, &cell.allocation)?);
        }
        let mut b_end = vec![1.0; cells.len()];
        let mut acc = 0.0_f64;
        for i in (0..cells.len()).rev() {
            b_end[i] = acc.exp();
            acc += cells[i].mu_total * (cells[i].end - cells[i].start.max(t));
        }
        Ok((ghat, b_end))
    };
    let (ghat_a, b_end_a) = prep(&cells_base)?;
    let (ghat_b, b_end_b) = prep(&cells_pert)?;

    let diffs: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let (mut x_a, mut x_b) = (1.0_f64, 1.0_f64);
            let (mut dev_a, mut dev_b) = (0.0_f64, 0.0_f64);
            for (i, (ca, cb)) in cells_base.iter().zip(&cells_pert).enumerate() {
                let start = ca.start.max(t);
                let events = sample_cell_jumps(model.measure(), start, ca.end, &mut rng);
                let mut now = start;
                for (time, atom) in events {
                    dev_a += x_a * ghat_a[i] * segment_weight(ca, b_end_a[i], now, time);
                    dev_b += x_b * ghat_b[i] * segment_weight(cb, b_end_b[i], now, time);
                    let z: f64 = rng.sample(StandardNormal);
                    x_a = gbm_step_with(x_a, ca, time - now, z);
                    x_b = gbm_step_with(x_b, cb, time - now, z);
                    x_a *= ca.jump_factors[atom];
                    x_b *= cb.jump_factors[atom];
                    now = time;
                }
                dev_a += x_a * ghat_a[i] * segment_weight(ca, b_end_a[i], now, ca.end);
                dev_b += x_b * ghat_b[i] * segment_weight(cb, b_end_b[i], now, cb.end);
                let z: f64 = rng.sample(StandardNormal);
                x_a = gbm_step_with(x_a, ca, ca.end - now, z);
                x_b = gbm_step_with(x_b, cb, cb.end - now, z);
            }
            (x_a - gamma * dev_a) - (x_b - gamma * dev_b)
        })
        .collect();

    let (diff_mean, diff_se) = mean_and_se(&diffs);
    Ok(PerturbationReport {
        t,
        h_step,
        alt_head: alt_head.to_vec(),
        n_paths,
        seed,
        diff_mean,
        diff_se,
        diff_over_h: diff_mean / h_step,
        pass: diff_mean >= -3.0 * diff_se,
    })
}
