//! Jump-diffusion market and wealth simulation with exact positive-wealth
//! stepping for piecewise-constant policies, plus closed-form wealth moments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::deviation::RepresentingPair;
use crate::drivers::JumpPayoff;
use crate::error::{Error, Result};
use crate::jumps::LevyMeasure;

/// Market with a riskless rate, n risky assets driven by a d-dimensional
/// Brownian motion and a k-dimensional compensated jump martingale.
///
/// Rows of the jump-sensitivity matrix are nonnegative with row sums <= 1,
/// which together with atom coordinates > -1 keeps wealth strictly positive.
/// Volatility entries may take either sign (only `Sigma Sigma'` and `c'Sigma`
/// enter the dynamics).
#[derive(Debug, Clone)]
pub struct MarketModel {
    rate: f64,
    drift: Vec<f64>,
    volatility: Vec<Vec<f64>>,
    jump_sensitivity: Vec<Vec<f64>>,
    measure: LevyMeasure,
}

impl MarketModel {
    pub fn new(
        rate: f64,
        drift: Vec<f64>,
        volatility: Vec<Vec<f64>>,
        jump_sensitivity: Vec<Vec<f64>>,
        measure: LevyMeasure,
    ) -> Result<Self> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "rate must be finite and >= 0, got {rate}"
            )));
        }
        let n = drift.len();
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one asset".into()));
        }
        if drift.iter().any(|mu| !mu.is_finite() || *mu < rate) {
            return Err(Error::InvalidParameter(format!(
                "asset drifts must be finite and >= rate {rate}, got {drift:?}"
            )));
        }
        if volatility.len() != n || jump_sensitivity.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected {n} volatility and jump-sensitivity rows, got {} and {}",
                volatility.len(),
                jump_sensitivity.len()
            )));
        }
        let d = volatility[0].len();
        if d == 0 || volatility.iter().any(|row| row.len() != d) {
            return Err(Error::DimensionMismatch(
                "volatility rows must share one positive length".into(),
            ));
        }
        if volatility.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter(
                "volatility entries must be finite".into(),
            ));
        }
        let k = measure.dimension();
        for (i, row) in jump_sensitivity.iter().enumerate() {
            if row.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "jump-sensitivity row {i} has length {}, measure dimension is {k}",
                    row.len()
                )));
            }
            if row.iter().any(|r| !r.is_finite() || *r < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "jump sensitivities must be finite and >= 0, got row {row:?}"
                )));
            }
            let row_sum: f64 = row.iter().sum();
            if row_sum > 1.0 + 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "jump-sensitivity row {i} sums to {row_sum} > 1"
                )));
            }
        }
        if n > d.min(k) {
            return Err(Error::DimensionMismatch(format!(
                "need n <= min(d, k), got n = {n}, d = {d}, k = {k}"
            )));
        }
        Ok(Self {
            rate,
            drift,
            volatility,
            jump_sensitivity,
            measure,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    pub fn volatility(&self) -> &[Vec<f64>] {
        &self.volatility
    }

    pub fn jump_sensitivity(&self) -> &[Vec<f64>] {
        &self.jump_sensitivity
    }

    pub fn measure(&self) -> &LevyMeasure {
        &self.measure
    }

    pub fn n_assets(&self) -> usize {
        self.drift.len()
    }

    pub fn diffusion_dim(&self) -> usize {
        self.volatility[0].len()
    }

    pub fn jump_dim(&self) -> usize {
        self.measure.dimension()
    }

    /// `(mu - r 1)' c`.
    pub fn excess_drift(&self, allocation: &[f64]) -> f64 {
        self.drift
            .iter()
            .zip(allocation)
            .map(|(mu, c)| (mu - self.rate) * c)
            .sum()
    }

    /// `mu_c = r + (mu - r 1)' c`.
    pub fn total_drift(&self, allocation: &[f64]) -> f64 {
        self.rate + self.excess_drift(allocation)
    }

    /// Diffusion exposure `c' Sigma` (length d).
    pub fn diffusion_exposure(&self, allocation: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.diffusion_dim()];
        self.diffusion_exposure_into(allocation, &mut out);
        out
    }

    pub fn diffusion_exposure_into(&self, allocation: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (c, row) in allocation.iter().zip(&self.volatility) {
            for (o, s) in out.iter_mut().zip(row) {
                *o += c * s;
            }
        }
    }

    /// Jump-direction exposure `c' R` (length k).
    pub fn jump_direction(&self, allocation: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.jump_dim()];
        for (c, row) in allocation.iter().zip(&self.jump_sensitivity) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += c * r;
            }
        }
        out
    }

    /// Jump payoff values `c' R y_j` per atom.
    pub fn jump_exposure(&self, allocation: &[f64]) -> JumpPayoff {
        let mut out = vec![0.0; self.measure.len()];
        self.jump_exposure_into(allocation, &mut out);
        JumpPayoff::new(out)
    }

    pub fn jump_exposure_into(&self, allocation: &[f64], out: &mut [f64]) {
        let direction = self.jump_direction(allocation);
        for (o, atom) in out.iter_mut().zip(self.measure.atoms()) {
            *o = direction
                .iter()
                .zip(&atom.location)
                .map(|(a, y)| a * y)
                .sum();
        }
    }

    /// Drift of the compensator of `c' R dL`: `(c' R) m` with m the mean
    /// jump vector.
    pub fn compensator_drift(&self, allocation: &[f64]) -> f64 {
        self.jump_direction(allocation)
            .iter()
            .zip(self.measure.mean_vector())
            .map(|(a, m)| a * m)
            .sum()
    }

    /// Instantaneous covariance-like matrix `Sigma Sigma' + R M R'` with M
    /// the second-moment matrix of the jump measure; the exact quadratic form
    /// behind the joint-norm driver on linear jump payoffs.
    pub fn total_covariance(&self) -> Vec<Vec<f64>> {
        let n = self.n_assets();
        let mut cov = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let diff: f64 = self.volatility[i]
                    .iter()
                    .zip(&self.volatility[j])
                    .map(|(a, b)| a * b)
                    .sum();
                cov[i][j] = diff;
            }
        }
        let m = self.measure.second_moment_matrix();
        let k = self.jump_dim();
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    for q in 0..k {
                        acc += self.jump_sensitivity[i][p] * m[p][q] * self.jump_sensitivity[j][q];
                    }
                }
                cov[i][j] += acc;
            }
        }
        cov
    }
}

/// Membership in the no-short-sale, no-borrowing set
/// `B = {x >= 0, sum x_i <= 1}` with a small tolerance for roundoff.
pub fn is_admissible(allocation: &[f64]) -> bool {
    allocation.iter().all(|c| c.is_finite() && *c >= -1e-12)
        && allocation.iter().sum::<f64>() <= 1.0 + 1e-12
}

/// Piecewise-constant allocation path on [0, T]; the cell value applies on
/// the half-open interval [t_i, t_{i+1}).
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    grid: Vec<f64>,
    allocations: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(grid: Vec<f64>, allocations: Vec<Vec<f64>>) -> Result<Self> {
        if grid.len() < 2 || grid[0] != 0.0 {
            return Err(Error::InvalidParameter(
                "policy grid must start at 0 and have at least two points".into(),
            ));
        }
        if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "policy grid must be finite and strictly increasing".into(),
            ));
        }
        if allocations.len() != grid.len() - 1 {
            return Err(Error::DimensionMismatch(format!(
                "expected {} allocation cells, got {}",
                grid.len() - 1,
                allocations.len()
            )));
        }
        let n = allocations[0].len();
        if n == 0 || allocations.iter().any(|c| c.len() != n) {
            return Err(Error::DimensionMismatch(
                "allocation cells must share one positive length".into(),
            ));
        }
        for (i, c) in allocations.iter().enumerate() {
            if !is_admissible(c) {
                return Err(Error::InadmissibleAllocation(format!(
                    "cell {i} allocation {c:?} leaves the admissible set"
                )));
            }
        }
        Ok(Self { grid, allocations })
    }

    /// Constant allocation on [0, horizon].
    pub fn constant(allocation: Vec<f64>, horizon: f64) -> Result<Self> {
        Self::new(vec![0.0, horizon], vec![allocation])
    }

    /// All-cash policy.
    pub fn riskless(n_assets: usize, horizon: f64) -> Result<Self> {
        Self::constant(vec![0.0; n_assets], horizon)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn allocations(&self) -> &[Vec<f64>] {
        &self.allocations
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn n_assets(&self) -> usize {
        self.allocations[0].len()
    }

    pub fn num_cells(&self) -> usize {
        self.allocations.len()
    }

    pub fn cell_index(&self, t: f64) -> usize {
        match self.grid.binary_search_by(|probe| probe.total_cmp(&t)) {
            Ok(i) => i.min(self.num_cells() - 1),
            Err(i) => i.saturating_sub(1).min(self.num_cells() - 1),
        }
    }

    pub fn allocation_at(&self, t: f64) -> &[f64] {
        &self.allocations[self.cell_index(t)]
    }
}

/// Simulated wealth paths on a common grid with per-path jump logs
/// (jump time, atom index).
#[derive(Debug, Clone)]
pub struct PathSet {
    grid: Vec<f64>,
    wealth: Vec<Vec<f64>>,
    jump_log: Vec<Vec<(f64, usize)>>,
    seed: u64,
}

impl PathSet {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.wealth.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn wealth(&self, path: usize) -> &[f64] {
        &self.wealth[path]
    }

    pub fn jump_log(&self, path: usize) -> &[(f64, usize)] {
        &self.jump_log[path]
    }

    /// Terminal wealth across paths.
    pub fn terminal(&self) -> Vec<f64> {
        self.wealth.iter().map(|w| *w.last().unwrap()).collect()
    }

    pub fn min_wealth(&self) -> f64 {
        self.wealth
            .iter()
            .flatten()
            .fold(f64::INFINITY, |acc, w| acc.min(*w))
    }
}

/// Per-cell dynamics of a piecewise-constant policy, precomputed once per
/// simulation: total drift, drift net of the jump compensator, scalar
/// diffusion exposure and the multiplicative jump factors per atom.
#[derive(Debug, Clone)]
pub(crate) struct CellDynamics {
    pub start: f64,
    pub end: f64,
    pub mu_total: f64,
    pub mu_between_jumps: f64,
    pub sigma: f64,
    pub jump_factors: Vec<f64>,
    pub allocation: Vec<f64>,
}

pub(crate) fn cell_dynamics(model: &MarketModel, policy: &Policy, grid: &[f64]) -> Vec<CellDynamics> {
    grid.windows(2)
        .map(|w| {
            let allocation = policy.allocation_at(w[0]).to_vec();
            let mu_total = model.total_drift(&allocation);
            let comp = model.compensator_drift(&allocation);
            let exposure = model.diffusion_exposure(&allocation);
            let sigma = exposure.iter().map(|x| x * x).sum::<f64>().sqrt();
            let payoff = model.jump_exposure(&allocation);
            let jump_factors = payoff.values().iter().map(|v| 1.0 + v).collect();
            CellDynamics {
                start: w[0],
                end: w[1],
                mu_total,
                mu_between_jumps: mu_total - comp,
                sigma,
                jump_factors,
                allocation,
            }
        })
        .collect()
}

/// Union of two increasing grids over the span of `base`.
pub(crate) fn merge_grids(base: &[f64], other: &[f64]) -> Vec<f64> {
    let horizon = *base.last().unwrap();
    let mut merged: Vec<f64> = base
        .iter()
        .chain(other.iter().filter(|t| **t > 0.0 && **t < horizon))
        .copied()
        .collect();
    merged.sort_by(|a, b| a.total_cmp(b));
    merged.dedup();
    merged
}

/// Draws the jump events of one cell: per-atom Poisson counts, then uniform
/// times in the cell, returned sorted by time. The draw order is fixed by
/// the atom order, so streams stay aligned across policies.
pub(crate) fn sample_cell_jumps<R: Rng + ?Sized>(
    measure: &LevyMeasure,
    start: f64,
    end: f64,
    rng: &mut R,
) -> Vec<(f64, usize)> {
    let dt = end - start;
    let counts = measure.sample_jump_counts(dt, rng);
    let mut events: Vec<(f64, usize)> = Vec::new();
    for (atom_idx, count) in counts.iter().enumerate() {
        for _ in 0..*count {
            let u: f64 = rng.random();
            events.push((start + u * dt, atom_idx));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    events
}

/// Simulates wealth paths exactly in log space: geometric Brownian motion
/// between jump times within each constant-allocation cell (drift net of the
/// jump compensator) and multiplicative factors `1 + c'R y` at exact
/// exponential jump times. Paths are strictly positive by construction and
/// deterministic given the seed; path p uses stream p of a ChaCha generator.
pub fn simulate(
    model: &MarketModel,
    policy: &Policy,
    x0: f64,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PathSet> {
    if !(x0.is_finite() && x0 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "initial wealth must be > 0, got {x0}"
        )));
    }
    if n_paths == 0 {
        return Err(Error::InvalidParameter("need at least one path".into()));
    }
    if policy.n_assets() != model.n_assets() {
        return Err(Error::DimensionMismatch(format!(
            "policy has {} assets, model has {}",
            policy.n_assets(),
            model.n_assets()
        )));
    }
    if grid.len() < 2 || grid[0] != 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "simulation grid must start at 0 and increase strictly".into(),
        ));
    }
    let horizon = *grid.last().unwrap();
    if policy.horizon() < horizon - 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "policy horizon {} does not cover simulation horizon {horizon}",
            policy.horizon()
        )));
    }

    let union = merge_grids(grid, policy.grid());
    let cells = cell_dynamics(model, policy, &union);
    // map union cell end -> output column (if it is an output point)
    let output_col: Vec<Option<usize>> = union
        .iter()
        .map(|t| grid.iter().position(|g| g == t))
        .collect();

    let paths: Vec<(Vec<f64>, Vec<(f64, usize)>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut wealth = vec![0.0; grid.len()];
            wealth[0] = x0;
            let mut log_jumps = Vec::new();
            let mut x = x0;
            for (cell_idx, cell) in cells.iter().enumerate() {
                let events = sample_cell_jumps(model.measure(), cell.start, cell.end, &mut rng);
                let mut now = cell.start;
                for (time, atom) in events {
                    x = gbm_step(x, cell, time - now, &mut rng);
                    x *= cell.jump_factors[atom];
                    log_jumps.push((time, atom));
                    now = time;
                }
                x = gbm_step(x, cell, cell.end - now, &mut rng);
                debug_assert!(x > 0.0);
                if let Some(col) = output_col[cell_idx + 1] {
                    wealth[col] = x;
                }
            }
            (wealth, log_jumps)
        })
        .collect();

    let mut wealth = Vec::with_capacity(n_paths);
    let mut jump_log = Vec::with_capacity(n_paths);
    for (w, j) in paths {
        wealth.push(w);
        jump_log.push(j);
    }
    Ok(PathSet {
        grid: grid.to_vec(),
        wealth,
        jump_log,
        seed,
    })
}

/// One exact GBM step over an interval with no jumps. A normal variate is
/// always consumed, so streams stay aligned across policies sharing a grid.
pub(crate) fn gbm_step<R: Rng + ?Sized>(x: f64, cell: &CellDynamics, dt: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    gbm_step_with(x, cell, dt, z)
}

/// The same step driven by an externally drawn variate, for common-random-
/// number coupling of two policies on one stream.
pub(crate) fn gbm_step_with(x: f64, cell: &CellDynamics, dt: f64, z: f64) -> f64 {
    if dt <= 0.0 {
        return x;
    }
    let drift = (cell.mu_between_jumps - 0.5 * cell.sigma * cell.sigma) * dt;
    x * (drift + cell.sigma * dt.sqrt() * z).exp()
}

/// Exact growth factor `b_pi(t) = exp(int_t^T (r + (mu - r 1)' pi(s)) ds)`.
pub fn growth_factor(model: &MarketModel, policy: &Policy, t: f64) -> Result<f64> {
    let horizon = policy.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::OutOfRange(format!(
            "t must lie in [0, {horizon}], got {t}"
        )));
    }
    if policy.n_assets() != model.n_assets() {
        return Err(Error::DimensionMismatch(
            "policy and model asset counts differ".into(),
        ));
    }
    let mut exponent = 0.0;
    for i in 0..policy.num_cells() {
        let overlap = policy.grid()[i + 1] - policy.grid()[i].max(t);
        if overlap > 0.0 {
            exponent += model.total_drift(&policy.allocations()[i]) * overlap;
        }
    }
    Ok(exponent.exp())
}

/// Conditional mean of terminal wealth, `E[X_T | X_t = x0] = x0 b_pi(t)`,
/// computed cell-exactly.
pub fn wealth_mean(model: &MarketModel, policy: &Policy, x0: f64, t: f64) -> Result<f64> {
    Ok(x0 * growth_factor(model, policy, t)?)
}

/// Representing-pair coefficients of terminal wealth along one simulated
/// path, frozen per grid cell at the left endpoint: diffusion coefficient
/// `b(s) X_{s-} pi' Sigma` and jump payoff `b(s) X_{s-} pi' R y_j`.
pub fn representing_pair_of_wealth(
    model: &MarketModel,
    policy: &Policy,
    paths: &PathSet,
    path: usize,
) -> Result<RepresentingPair> {
    if path >= paths.n_paths() {
        return Err(Error::OutOfRange(format!(
            "path index {path} out of {}",
            paths.n_paths()
        )));
    }
    let grid = paths.grid();
    let wealth = paths.wealth(path);
    let mut diffusion = Vec::with_capacity(grid.len() - 1);
    let mut jump = Vec::with_capacity(grid.len() - 1);
    for i in 0..grid.len() - 1 {
        let t = grid[i];
        let allocation = policy.allocation_at(t);
        let scale = growth_factor(model, policy, t)? * wealth[i];
        let exposure = model.diffusion_exposure(allocation);
        diffusion.push(exposure.iter().map(|e| scale * e).collect());
        jump.push(model.jump_exposure(allocation).scaled(scale));
    }
    RepresentingPair::new(grid.to_vec(), diffusion, jump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jumps::JumpAtom;
    use approx::assert_relative_eq;

    fn single_asset_model(rate: f64, mu: f64, sigma: f64, rho: f64, measure: LevyMeasure) -> MarketModel {
        MarketModel::new(rate, vec![mu], vec![vec![sigma]], vec![vec![rho]], measure).unwrap()
    }

    fn jump_measure() -> LevyMeasure {
        LevyMeasure::new(1, vec![JumpAtom::new(vec![0.1], 2.0)]).unwrap()
    }

    #[test]
    fn constructor_validates_invariants() {
        let m = LevyMeasure::empty(1);
        // mu below rate
        assert!(MarketModel::new(0.05, vec![0.01], vec![vec![0.2]], vec![vec![0.0]], m.clone()).is_err());
        // negative jump sensitivity
        assert!(MarketModel::new(0.0, vec![0.1], vec![vec![0.2]], vec![vec![-0.1]], m.clone()).is_err());
        // row sum > 1
        let m2 = LevyMeasure::empty(2);
        assert!(MarketModel::new(
            0.0,
            vec![0.1],
            vec![vec![0.2, 0.0]],
            vec![vec![0.6, 0.6]],
            m2.clone()
        )
        .is_err());
        // n > min(d, k)
        assert!(MarketModel::new(
            0.0,
            vec![0.1, 0.2],
            vec![vec![0.2], vec![0.1]],
            vec![vec![0.0], vec![0.0]],
            m.clone()
        )
        .is_err());
        // signed volatility is allowed
        assert!(MarketModel::new(
            0.0,
            vec![0.1, 0.05],
            vec![vec![0.25, 0.0], vec![-0.1, 0.2]],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            m2
        )
        .is_ok());
    }

    #[test]
    fn policy_rejects_inadmissible_cells() {
        assert!(Policy::constant(vec![0.6, 0.6], 1.0).is_err());
        assert!(Policy::constant(vec![-0.2], 1.0).is_err());
        assert!(Policy::constant(vec![0.4, 0.3], 1.0).is_ok());
    }

    #[test]
    fn riskless_policy_grows_at_rate_exactly() {
        let model = single_asset_model(0.03, 0.08, 0.2, 0.3, jump_measure());
        let policy = Policy::riskless(1, 2.0).unwrap();
        let grid = vec![0.0, 0.5, 1.0, 2.0];
        let paths = simulate(&model, &policy, 1.5, &grid, 32, 9).unwrap();
        for p in 0..paths.n_paths() {
            for (j, t) in grid.iter().enumerate() {
                assert_relative_eq!(
                    paths.wealth(p)[j],
                    1.5 * (0.03 * t).exp(),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn deterministic_ode_when_no_noise() {
        // Sigma = 0, no jumps: X_t = x0 exp(int r + (mu - r) pi)
        let model = single_asset_model(0.02, 0.07, 0.0, 0.0, LevyMeasure::empty(1));
        let policy = Policy::new(vec![0.0, 1.0, 2.0], vec![vec![0.25], vec![0.75]]).unwrap();
        let grid = vec![0.0, 1.0, 2.0];
        let paths = simulate(&model, &policy, 1.0, &grid, 8, 4).unwrap();
        let mu1 = 0.02 + 0.05 * 0.25;
        let mu2 = 0.02 + 0.05 * 0.75;
        for p in 0..8 {
            assert_relative_eq!(paths.wealth(p)[1], (mu1_f64(mu1)).exp(), max_relative = 1e-12);
            assert_relative_eq!(
                paths.wealth(p)[2],
                (mu1 + mu2).exp(),
                max_relative = 1e-12
            );
        }
        fn mu1_f64(x: f64) -> f64 {
            x
        }
    }

    #[test]
    fn sample_mean_matches_closed_form() {
        let model = single_asset_model(0.02, 0.08, 0.25, 0.3, jump_measure());
        let policy = Policy::new(vec![0.0, 0.6, 1.0], vec![vec![0.8], vec![0.3]]).unwrap();
        let grid = vec![0.0, 1.0];
        let n = 40_000;
        let paths = simulate(&model, &policy, 1.0, &grid, n, 77).unwrap();
        let terminal = paths.terminal();
        let mean: f64 = terminal.iter().sum::<f64>() / n as f64;
        let var: f64 =
            terminal.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let target = wealth_mean(&model, &policy, 1.0, 0.0).unwrap();
        assert!(
            (mean - target).abs() <= 3.0 * se,
            "mean {mean}, target {target}, se {se}"
        );
        assert!(paths.min_wealth() > 0.0);
    }

    #[test]
    fn discounted_wealth_is_martingale_when_drift_equals_rate() {
        // rate 0 and mu = rate: sample mean stays at x0 on every grid point
        let model = MarketModel::new(
            0.0,
            vec![0.0],
            vec![vec![0.3]],
            vec![vec![0.4]],
            jump_measure(),
        )
        .unwrap();
        let policy = Policy::constant(vec![0.7], 1.0).unwrap();
        let grid = vec![0.0, 0.25, 0.5, 1.0];
        let n = 60_000;
        let paths = simulate(&model, &policy, 1.0, &grid, n, 123).unwrap();
        for j in 1..grid.len() {
            let col: Vec<f64> = (0..n).map(|p| paths.wealth(p)[j]).collect();
            let mean: f64 = col.iter().sum::<f64>() / n as f64;
            let var: f64 = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - 1.0).abs() <= 3.5 * se,
                "t = {}, mean {mean}, se {se}",
                grid[j]
            );
        }
    }

    #[test]
    fn grid_refinement_preserves_the_law() {
        let model = single_asset_model(0.01, 0.07, 0.2, 0.3, jump_measure());
        let policy = Policy::constant(vec![0.9], 1.0).unwrap();
        let coarse: Vec<f64> = (0..=64).map(|i| i as f64 / 64.0).collect();
        let fine: Vec<f64> = (0..=256).map(|i| i as f64 / 256.0).collect();
        let n = 30_000;
        let a = simulate(&model, &policy, 1.0, &coarse, n, 5).unwrap();
        let b = simulate(&model, &policy, 1.0, &fine, n, 6).unwrap();
        let stats = |t: &[f64]| {
            let m = t.iter().sum::<f64>() / t.len() as f64;
            let v = t.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (t.len() - 1) as f64;
            (m, v)
        };
        let (ma, va) = stats(&a.terminal());
        let (mb, vb) = stats(&b.terminal());
        let se_mean = ((va + vb) / n as f64).sqrt();
        assert!((ma - mb).abs() <= 3.0 * se_mean);
        // variance-difference band via the fourth-moment approximation
        let fourth = |t: &[f64], m: f64, v: f64| {
            t.iter().map(|x| ((x - m) * (x - m) - v).powi(2)).sum::<f64>() / t.len() as f64
        };
        let se_var = ((fourth(&a.terminal(), ma, va) + fourth(&b.terminal(), mb, vb))
            / n as f64)
            .sqrt();
        assert!((va - vb).abs() <= 3.0 * se_var);
    }

    #[test]
    fn simulation_is_deterministic_given_seed() {
        let model = single_asset_model(0.02, 0.08, 0.25, 0.3, jump_measure());
        let policy = Policy::constant(vec![0.5], 1.0).unwrap();
        let grid = vec![0.0, 0.5, 1.0];
        let a = simulate(&model, &policy, 1.0, &grid, 16, 42).unwrap();
        let b = simulate(&model, &policy, 1.0, &grid, 16, 42).unwrap();
        for p in 0..16 {
            assert_eq!(a.wealth(p), b.wealth(p));
            assert_eq!(a.jump_log(p), b.jump_log(p));
        }
    }

    #[test]
    fn wealth_mean_cases() {
        let model = single_asset_model(0.03, 0.09, 0.2, 0.0, LevyMeasure::empty(1));
        let policy = Policy::riskless(1, 2.0).unwrap();
        assert_relative_eq!(
            wealth_mean(&model, &policy, 2.0, 0.0).unwrap(),
            2.0 * (0.06f64).exp(),
            max_relative = 1e-14
        );
        assert_relative_eq!(wealth_mean(&model, &policy, 2.0, 2.0).unwrap(), 2.0);
        // piecewise policy against a Riemann-sum oracle for the exponent
        let policy = Policy::new(vec![0.0, 0.8, 2.0], vec![vec![0.5], vec![1.0]]).unwrap();
        let steps = 1_000_000;
        let mut exponent = 0.0;
        for i in 0..steps {
            let s = 2.0 * (i as f64 + 0.5) / steps as f64;
            exponent += model.total_drift(policy.allocation_at(s)) * (2.0 / steps as f64);
        }
        assert_relative_eq!(
            wealth_mean(&model, &policy, 1.0, 0.0).unwrap(),
            exponent.exp(),
            max_relative = 1e-9
        );
    }

    #[test]
    fn representing_pair_matches_hand_computation() {
        let model = single_asset_model(0.02, 0.08, 0.25, 0.3, jump_measure());
        let policy = Policy::constant(vec![0.6], 1.0).unwrap();
        let grid = vec![0.0, 0.5, 1.0];
        let paths = simulate(&model, &policy, 2.0, &grid, 4, 3).unwrap();
        let pair = representing_pair_of_wealth(&model, &policy, &paths, 1).unwrap();
        // hand substitution at the second cell: a = b(0.5) X_{0.5} pi Sigma
        let x = paths.wealth(1)[1];
        let b = growth_factor(&model, &policy, 0.5).unwrap();
        assert_relative_eq!(
            pair.diffusion()[1][0],
            b * x * 0.6 * 0.25,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            pair.jump()[1].values()[0],
            b * x * 0.6 * 0.3 * 0.1,
            max_relative = 1e-12
        );
        // riskless policy has identically zero coefficients
        let riskless = Policy::riskless(1, 1.0).unwrap();
        let paths0 = simulate(&model, &riskless, 2.0, &grid, 1, 3).unwrap();
        let pair0 = representing_pair_of_wealth(&model, &riskless, &paths0, 0).unwrap();
        assert!(pair0.is_zero());
        // doubling wealth doubles the coefficients
        let paths2 = simulate(&model, &policy, 4.0, &grid, 4, 3).unwrap();
        let pair2 = representing_pair_of_wealth(&model, &policy, &paths2, 1).unwrap();
        assert_relative_eq!(
            pair2.diffusion()[0][0],
            2.0 * pair.diffusion()[0][0],
            max_relative = 1e-12
        );
    }
}
