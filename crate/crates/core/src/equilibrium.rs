//! Equilibrium policy and value function for the dynamic mean-deviation
//! portfolio problem: the boundary objective T_a, the fixed point a* with
//! its policy and value coefficients, closed-form oracles for one and two
//! risky assets, and the extended-HJB residual checker.

use crate::drivers::Driver;
use crate::error::{Error, Result};
use crate::market::{MarketModel, Policy};

/// Driver value at the exposures of an allocation:
/// `ghat(c) = g(c'Sigma, y -> c'R y)`.
pub fn ghat(model: &MarketModel, driver: &Driver, allocation: &[f64]) -> Result<f64> {
    let mut eval = GhatEval::new(model, driver)?;
    eval.check_allocation(allocation)?;
    Ok(eval.ghat(allocation))
}

/// Boundary objective `T_a(c) = a (mu - r 1)'c - ghat(c)`.
pub fn objective_t(model: &MarketModel, driver: &Driver, a: f64, allocation: &[f64]) -> Result<f64> {
    let mut eval = GhatEval::new(model, driver)?;
    eval.check_allocation(allocation)?;
    Ok(eval.objective(a, allocation))
}

/// Maximises `T_a` over the boundary of the admissible set (which contains
/// the zero vertex). For one asset the candidates are {0, 1}; for two assets
/// each simplex edge is searched by golden section to 1e-10 in the
/// allocation. Exact value ties resolve to the lexicographically smallest
/// point, which prefers the zero allocation.
pub fn maximize_boundary(
    model: &MarketModel,
    driver: &Driver,
    a: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut eval = GhatEval::new(model, driver)?;
    boundary_argmax(&mut eval, a)
}

/// `s(a) = sup_{c in boundary} T_a(c)`; nonnegative because the zero vertex
/// lies on the boundary.
pub fn s_of_a(model: &MarketModel, driver: &Driver, a: f64) -> Result<f64> {
    maximize_boundary(model, driver, a).map(|(_, s)| s)
}

/// Largest `a in [0, 1/gamma]` with `s(a) <= 0`, by bisection to 1e-12.
/// `s` is nondecreasing in `a` because every `T_a(c)` is affine in `a` with
/// nonnegative slope when `mu > r 1`.
pub fn a_minus(model: &MarketModel, driver: &Driver, gamma: f64) -> Result<f64> {
    require_strict_excess(model)?;
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be finite and > 0, got {gamma}"
        )));
    }
    let mut eval = GhatEval::new(model, driver)?;
    let top = gamma.recip();
    if boundary_argmax(&mut eval, top)?.1 <= 0.0 {
        return Ok(top);
    }
    let (mut lo, mut hi) = (0.0_f64, top);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if boundary_argmax(&mut eval, mid)?.1 <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

fn require_strict_excess(model: &MarketModel) -> Result<()> {
    if model.drift().iter().any(|mu| *mu <= model.rate()) {
        return Err(Error::InvalidParameter(
            "equilibrium construction needs mu_i > r for every asset".into(),
        ));
    }
    Ok(())
}

/// Numerical controls of the Picard iteration for the fixed point.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointOptions {
    /// Number of uniform grid cells on [0, T].
    pub grid_cells: usize,
    /// Stopping tolerance on the sup-norm update.
    pub tol: f64,
    pub max_iter: usize,
    /// Picard damping factor in (0, 1].
    pub damping: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            grid_cells: 4096,
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
        }
    }
}

impl FixedPointOptions {
    fn validate(&self) -> Result<()> {
        if self.grid_cells < 64 {
            return Err(Error::InvalidParameter(format!(
                "grid_cells must be at least 64, got {}",
                self.grid_cells
            )));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidParameter("tol must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be >= 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

/// Solved equilibrium: the fixed-point function a*, the policy C*, the
/// coefficients b, d of the conditional mean and deviation, and the derived
/// thresholds. `t_star` is `-inf` when the policy invests from time zero.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    grid: Vec<f64>,
    a_star: Vec<f64>,
    c_star: Vec<Vec<f64>>,
    b: Vec<f64>,
    d: Vec<f64>,
    value_coeff: Vec<f64>,
    a_minus: f64,
    t_star: f64,
    gamma: f64,
    degenerate: bool,
    iterations: usize,
    residual: f64,
    s_at_gamma_inv: f64,
}

impl EquilibriumSolution {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn a_star(&self) -> &[f64] {
        &self.a_star
    }

    pub fn c_star(&self) -> &[Vec<f64>] {
        &self.c_star
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Value coefficients `v = b - gamma d`, so `V(t, x) = x v(t)`.
    pub fn value_coeff(&self) -> &[f64] {
        &self.value_coeff
    }

    pub fn a_minus(&self) -> f64 {
        self.a_minus
    }

    pub fn t_star(&self) -> f64 {
        self.t_star
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn s_at_gamma_inv(&self) -> f64 {
        self.s_at_gamma_inv
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    fn interp(&self, values: &[f64], t: f64) -> f64 {
        let horizon = self.horizon();
        let cells = self.grid.len() - 1;
        let u = (t / horizon * cells as f64).clamp(0.0, cells as f64);
        let i = (u.floor() as usize).min(cells - 1);
        let frac = u - i as f64;
        values[i] + frac * (values[i + 1] - values[i])
    }

    pub fn a_star_at(&self, t: f64) -> f64 {
        self.interp(&self.a_star, t)
    }

    /// `V(t, x) = x (b(t) - gamma d(t))`, linear in wealth.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        x * self.interp(&self.value_coeff, t)
    }

    /// `h(t, x) = x b(t)`, the conditional mean of terminal wealth.
    pub fn mean_value(&self, t: f64, x: f64) -> f64 {
        x * self.interp(&self.b, t)
    }
}

/// Buffered evaluator of `ghat` and `T_a`; keeps the inner loops
/// allocation-free.
pub(crate) struct GhatEval<'a> {
    model: &'a MarketModel,
    driver: &'a Driver,
    diffusion: Vec<f64>,
    direction: Vec<f64>,
    payoff: Vec<f64>,
}

impl<'a> GhatEval<'a> {
    pub(crate) fn new(model: &'a MarketModel, driver: &'a Driver) -> Result<Self> {
        if driver.measure().len() != model.measure().len()
            || driver.measure().dimension() != model.measure().dimension()
        {
            return Err(Error::DimensionMismatch(
                "driver and market must reference the same jump measure".into(),
            ));
        }
        Ok(Self {
            model,
            driver,
            diffusion: vec![0.0; model.diffusion_dim()],
            direction: vec![0.0; model.jump_dim()],
            payoff: vec![0.0; model.measure().len()],
        })
    }

    fn check_allocation(&self, allocation: &[f64]) -> Result<()> {
        if allocation.len() != self.model.n_assets() {
            return Err(Error::DimensionMismatch(format!(
                "allocation has {} entries, model has {} assets",
                allocation.len(),
                self.model.n_assets()
            )));
        }
        Ok(())
    }

    pub(crate) fn ghat(&mut self, allocation: &[f64]) -> f64 {
        self.model
            .diffusion_exposure_into(allocation, &mut self.diffusion);
        self.direction.fill(0.0);
        for (c, row) in allocation.iter().zip(self.model.jump_sensitivity()) {
            for (o, r) in self.direction.iter_mut().zip(row) {
                *o += c * r;
            }
        }
        for (p, atom) in self.payoff.iter_mut().zip(self.model.measure().atoms()) {
            *p = self
                .direction
                .iter()
                .zip(&atom.location)
                .map(|(a, y)| a * y)
                .sum();
        }
        self.driver
            .eval_values(&self.diffusion, &self.payoff)
            .expect("dimensions checked at construction")
    }

    pub(crate) fn objective(&mut self, a: f64, allocation: &[f64]) -> f64 {
        a * self.model.excess_drift(allocation) - self.ghat(allocation)
    }
}

/// Golden-section maximiser of a unimodal function on [lo, hi].
fn golden_max(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    const INVPHI2: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lo, hi);
    let mut h = b - a;
    let mut c = a + INVPHI2 * h;
    let mut d = a + INVPHI * h;
    let mut fc = f(c);
    let mut fd = f(d);
    while h > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            h = b - a;
            c = a + INVPHI2 * h;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            h = b - a;
            d = a + INVPHI * h;
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

fn boundary_argmax(eval: &mut GhatEval, a: f64) -> Result<(Vec<f64>, f64)> {
    match eval.model.n_assets() {
        1 => {
            let v0 = eval.objective(a, &[0.0]);
            let v1 = eval.objective(a, &[1.0]);
            if v1 > v0 {
                Ok((vec![1.0], v1))
            } else {
                Ok((vec![0.0], v0))
            }
        }
        2 => {
            let edges: [fn(f64) -> [f64; 2]; 3] = [
                |t| [t, 0.0],
                |t| [0.0, t],
                |t| [t, 1.0 - t],
            ];
            let mut candidates: Vec<([f64; 2], f64)> = Vec::with_capacity(9);
            for edge in edges {
                let (tau, _) = golden_max(|t| eval.objective(a, &edge(t)), 0.0, 1.0, 1e-10);
                for t in [tau, 0.0, 1.0] {
                    let c = edge(t);
                    let v = eval.objective(a, &c);
                    candidates.push((c, v));
                }
            }
            let best = candidates
                .iter()
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut winner: Option<[f64; 2]> = None;
            for (c, v) in &candidates {
                if *v == best && winner.map_or(true, |w| lex_less(c, &w)) {
                    winner = Some(*c);
                }
            }
            let c = winner.expect("at least one candidate");
            Ok((c.to_vec(), best))
        }
        n => Err(Error::UnsupportedDimension(n)),
    }
}

/// One-sided limit of `(ghat, mu)` as `a` decreases to `a_minus` from above
/// (the policy jumps from zero to the boundary maximiser there).
fn switch_limit_values(eval: &mut GhatEval, a_min: f64) -> Result<(f64, f64)> {
    let bump = a_min + 1e-9 * a_min.abs().max(1.0);
    let (c, _) = boundary_argmax(eval, bump)?;
    Ok((eval.ghat(&c), eval.model.total_drift(&c)))
}

/// Per-sweep products: the policy, driver value and total drift at each grid
/// point, plus per-cell integrals of `ghat(C(s))` and `mu_{C(s)}`. A cell in
/// which the profile leaves `a_minus` is split at the switch point implied by
/// the profile's own slope equation `da/ds = ghat(C_a)` (constant-slope
/// model with the one-sided limit `g_plus`): the switch sits at
/// `t_{i+1} - (a_{i+1} - a_minus)/g_plus` and the cell's ghat integral is
/// `a_{i+1} - a_minus` exactly. Below the switch the policy is zero.
struct Sweep {
    policies: Vec<Vec<f64>>,
    cell_ghat: Vec<f64>,
    cell_mu: Vec<f64>,
}

fn sweep(
    eval: &mut GhatEval,
    grid: &[f64],
    a_vals: &[f64],
    a_min: f64,
) -> Result<Sweep> {
    let n_pts = a_vals.len();
    let n_assets = eval.model.n_assets();
    let rate = eval.model.rate();
    let mut policies = Vec::with_capacity(n_pts);
    let mut ghat_vals = vec![0.0; n_pts];
    let mut mu_vals = vec![rate; n_pts];
    for i in 0..n_pts {
        if a_vals[i] <= a_min {
            policies.push(vec![0.0; n_assets]);
        } else {
            let (c, _) = boundary_argmax(eval, a_vals[i])?;
            ghat_vals[i] = eval.ghat(&c);
            mu_vals[i] = eval.model.total_drift(&c);
            policies.push(c);
        }
    }

    let mut switch_cache: Option<(f64, f64)> = None;
    let cells = n_pts - 1;
    let mut cell_ghat = vec![0.0; cells];
    let mut cell_mu = vec![0.0; cells];
    for i in 0..cells {
        let dt = grid[i + 1] - grid[i];
        let (al, ar) = (a_vals[i], a_vals[i + 1]);
        if ar <= a_min {
            cell_mu[i] = rate * dt;
        } else if al > a_min {
            cell_ghat[i] = 0.5 * (ghat_vals[i] + ghat_vals[i + 1]) * dt;
            cell_mu[i] = 0.5 * (mu_vals[i] + mu_vals[i + 1]) * dt;
        } else {
            let (g_plus, mu_plus) = match switch_cache {
                Some(v) => v,
                None => {
                    let v = switch_limit_values(eval, a_min)?;
                    switch_cache = Some(v);
                    v
                }
            };
            // time spent above the switch under the constant-slope model
            let above = if g_plus > 0.0 {
                ((ar - a_min) / g_plus).min(dt)
            } else {
                dt
            };
            let below = dt - above;
            if above < dt {
                cell_ghat[i] = ar - a_min;
            } else {
                cell_ghat[i] = 0.5 * (g_plus + ghat_vals[i + 1]) * dt;
            }
            cell_mu[i] = rate * below + 0.5 * (mu_plus + mu_vals[i + 1]) * above;
        }
    }
    Ok(Sweep {
        policies,
        cell_ghat,
        cell_mu,
    })
}

fn backward_cumsum(cells: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cells.len() + 1];
    for i in (0..cells.len()).rev() {
        out[i] = out[i + 1] + cells[i];
    }
    out
}

/// Constructs the equilibrium by damped Picard iteration on
/// `f -> A_{C_f} = 1/gamma - d_{C_f}/b_{C_f}`, starting from `f = 1/gamma`.
/// Stops when the sup-norm update falls below `tol` and certifies the
/// residual `||f - F_f|| < 10 tol`; non-convergence is an error carrying the
/// last residual. When `s(1/gamma) <= 0` the solution is the degenerate
/// all-cash case with `V(t, x) = x e^{r(T-t)}`.
pub fn fixed_point(
    model: &MarketModel,
    driver: &Driver,
    gamma: f64,
    horizon: f64,
    opts: &FixedPointOptions,
) -> Result<EquilibriumSolution> {
    require_strict_excess(model)?;
    opts.validate()?;
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be finite and > 0, got {gamma}"
        )));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "horizon must be finite and > 0, got {horizon}"
        )));
    }
    let cells = opts.grid_cells;
    let grid: Vec<f64> = (0..=cells)
        .map(|i| horizon * i as f64 / cells as f64)
        .collect();
    let n_pts = grid.len();
    let gamma_inv = gamma.recip();

    let mut eval = GhatEval::new(model, driver)?;
    let s_top = boundary_argmax(&mut eval, gamma_inv)?.1;
    let a_min = a_minus(model, driver, gamma)?;

    if s_top <= 0.0 {
        // degenerate case: all cash, V equals the riskless rollback of x
        let b: Vec<f64> = grid.iter().map(|t| (model.rate() * (horizon - t)).exp()).collect();
        return Ok(EquilibriumSolution {
            a_star: vec![gamma_inv; n_pts],
            c_star: vec![vec![0.0; model.n_assets()]; n_pts],
            d: vec![0.0; n_pts],
            value_coeff: b.clone(),
            b,
            grid,
            a_minus: a_min,
            t_star: horizon,
            gamma,
            degenerate: true,
            iterations: 0,
            residual: 0.0,
            s_at_gamma_inv: s_top,
        });
    }

    let mut a_vals = vec![gamma_inv; n_pts];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let sw = sweep(&mut eval, &grid, &a_vals, a_min)?;
        let q = backward_cumsum(&sw.cell_ghat);
        let mut delta: f64 = 0.0;
        for i in 0..n_pts {
            let target = gamma_inv - q[i];
            delta = delta.max((target - a_vals[i]).abs());
            // the fixed point never falls below a_minus; projecting keeps
            // the zero-policy branch stable against last-ulp wobble
            a_vals[i] = (a_vals[i] + opts.damping * (target - a_vals[i])).max(a_min);
        }
        if opts.damping * delta < opts.tol {
            converged = true;
            break;
        }
    }

    // residual certificate on the final iterate
    let sw = sweep(&mut eval, &grid, &a_vals, a_min)?;
    let q = backward_cumsum(&sw.cell_ghat);
    let residual = (0..n_pts)
        .map(|i| ((gamma_inv - q[i]) - a_vals[i]).abs())
        .fold(0.0, f64::max);
    if !converged || residual > 10.0 * opts.tol {
        return Err(Error::NonConvergence {
            iterations,
            residual,
            tolerance: opts.tol,
        });
    }

    let b_exp = backward_cumsum(&sw.cell_mu);
    let b: Vec<f64> = b_exp.iter().map(|e| e.exp()).collect();
    let d: Vec<f64> = b.iter().zip(&q).map(|(bi, qi)| bi * qi).collect();
    let value_coeff: Vec<f64> = b.iter().zip(&d).map(|(bi, di)| bi - gamma * di).collect();

    // t* = sup{t: a*(t) <= a_minus}; -inf when a* starts above a_minus.
    // Inside the switch cell the profile obeys da/ds = ghat(C_a), so the
    // crossing sits at t_{j+1} - (a_{j+1} - a_minus)/g_plus, consistent
    // with the sweep's split of that cell.
    let t_star = if a_vals[0] > a_min {
        f64::NEG_INFINITY
    } else {
        let mut idx = 0;
        for (i, a) in a_vals.iter().enumerate() {
            if *a <= a_min {
                idx = i;
            }
        }
        if idx + 1 >= n_pts {
            horizon
        } else {
            let (g_plus, _) = switch_limit_values(&mut eval, a_min)?;
            if g_plus > 0.0 {
                (grid[idx + 1] - (a_vals[idx + 1] - a_min) / g_plus)
                    .clamp(grid[idx], grid[idx + 1])
            } else {
                grid[idx]
            }
        }
    };

    Ok(EquilibriumSolution {
        grid,
        a_star: a_vals,
        c_star: sw.policies,
        b,
        d,
        value_coeff,
        a_minus: a_min,
        t_star,
        gamma,
        degenerate: false,
        iterations,
        residual,
        s_at_gamma_inv: s_top,
    })
}

/// Extracts the equilibrium policy as a piecewise-constant `Policy`: the
/// solution grid refined by `t*`, each invested cell frozen at its midpoint
/// allocation, and equal consecutive cells merged (the n = 1 policy
/// collapses to at most two cells switching exactly at `t*`).
pub fn equilibrium_policy(
    model: &MarketModel,
    driver: &Driver,
    solution: &EquilibriumSolution,
) -> Result<Policy> {
    let horizon = solution.horizon();
    let n = model.n_assets();
    if solution.degenerate() {
        return Policy::riskless(n, horizon);
    }
    let mut eval = GhatEval::new(model, driver)?;
    let mut points: Vec<f64> = solution.grid().to_vec();
    let t_star = solution.t_star();
    if t_star > 0.0 && t_star < horizon && !points.contains(&t_star) {
        points.push(t_star);
        points.sort_by(|a, b| a.total_cmp(b));
    }
    let mut allocations: Vec<Vec<f64>> = Vec::with_capacity(points.len() - 1);
    for w in points.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let c = if mid <= t_star {
            vec![0.0; n]
        } else {
            let a_mid = solution.a_star_at(mid);
            if a_mid <= solution.a_minus() {
                vec![0.0; n]
            } else {
                boundary_argmax(&mut eval, a_mid)?.0
            }
        };
        allocations.push(c);
    }
    // merge equal consecutive cells
    let mut merged_grid = vec![points[0]];
    let mut merged_alloc: Vec<Vec<f64>> = Vec::new();
    for (i, c) in allocations.into_iter().enumerate() {
        if merged_alloc.last() == Some(&c) {
            *merged_grid.last_mut().unwrap() = points[i + 1];
            continue;
        }
        merged_alloc.push(c);
        merged_grid.push(points[i + 1]);
    }
    // merged_grid currently holds cell endpoints; rebuild the full grid
    let mut grid = vec![points[0]];
    grid.extend(merged_grid.into_iter().skip(1));
    Policy::new(grid, merged_alloc)
}

/// Exact `(b_pi(t), d_pi(t))` for a piecewise-constant policy:
/// `b = exp(int_t^T mu_pi ds)` and `d = b int_t^T ghat(pi(s)) ds`.
pub fn policy_coefficients(
    model: &MarketModel,
    driver: &Driver,
    policy: &Policy,
    t: f64,
) -> Result<(f64, f64)> {
    let horizon = policy.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::OutOfRange(format!(
            "t must lie in [0, {horizon}], got {t}"
        )));
    }
    let mut eval = GhatEval::new(model, driver)?;
    let mut exponent = 0.0;
    let mut q = 0.0;
    for i in 0..policy.num_cells() {
        let overlap = policy.grid()[i + 1] - policy.grid()[i].max(t);
        if overlap > 0.0 {
            let c = &policy.allocations()[i];
            exponent += model.total_drift(c) * overlap;
            q += eval.ghat(c) * overlap;
        }
    }
    let b = exponent.exp();
    Ok((b, b * q))
}

/// Residuals of the extended HJB system at (t, x), evaluated on the
/// solution grid with central time differences. `value_residual` is
/// `dV/dt + sup_pi {L^pi V - gamma G^pi h}` and `mean_residual` is
/// `dh/dt + L^{pi*} h` with the jump part of `L` evaluated directly as an
/// atom sum (it cancels exactly for functions linear in wealth).
#[derive(Debug, Clone, Copy)]
pub struct HjbResidual {
    pub value_residual: f64,
    pub mean_residual: f64,
    /// t lies within one grid cell of the policy switch t*, where V is not
    /// differentiable in time; excluded from pass/fail accounting.
    pub near_kink: bool,
}

pub fn hjb_residual(
    model: &MarketModel,
    driver: &Driver,
    gamma: f64,
    solution: &EquilibriumSolution,
    t: f64,
    x: f64,
) -> Result<HjbResidual> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "x must be finite and > 0, got {x}"
        )));
    }
    let grid = solution.grid();
    let horizon = solution.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::OutOfRange(format!(
            "t must lie in [0, {horizon}], got {t}"
        )));
    }
    let cells = grid.len() - 1;
    let dt = horizon / cells as f64;
    let i = ((t / dt).round() as usize).clamp(1, cells - 1);

    let v = solution.value_coeff();
    let b = solution.b();
    let v_dot = (v[i + 1] - v[i - 1]) / (2.0 * dt);
    let b_dot = (b[i + 1] - b[i - 1]) / (2.0 * dt);

    // sup over the admissible set reduces to s(A) by positive homogeneity:
    // the objective is linear along rays, so the sup over B equals the sup
    // over its boundary, which includes the zero vertex.
    let a_i = gamma.recip() - solution.d()[i] / b[i];
    let s_i = s_of_a(model, driver, a_i)?;
    let value_residual = x * (v_dot + model.rate() * v[i] + gamma * b[i] * s_i);

    let c = &solution.c_star()[i];
    let mu_c = model.total_drift(c);
    let jump_term = linear_jump_generator_term(model, c, b[i], x);
    let mean_residual = x * b_dot + mu_c * x * b[i] + jump_term;

    let near_kink = !solution.degenerate()
        && solution.t_star().is_finite()
        && (t - solution.t_star()).abs() <= dt;

    Ok(HjbResidual {
        value_residual,
        mean_residual,
        near_kink,
    })
}

/// Jump part of the generator applied to the linear function `f(y) = slope y`
/// at wealth x, evaluated literally as the compensated atom sum
/// `sum_j rate_j [f(x + x w_j) - f(x) - x w_j f'(x)]`; algebraically zero.
pub fn linear_jump_generator_term(model: &MarketModel, allocation: &[f64], slope: f64, x: f64) -> f64 {
    let payoff = model.jump_exposure(allocation);
    payoff
        .values()
        .iter()
        .zip(model.measure().atoms())
        .map(|(w, atom)| atom.rate * (slope * (x + x * w) - slope * x - x * w * slope))
        .sum()
}

/// Closed-form single-asset equilibrium (joint-norm driver with unit scale):
/// `kappa = sqrt(Sigma^2 + R^2 nu2)`, threshold `a_- = kappa/(mu - r)`,
/// switch time `t* = (T + 1/(mu-r) - 1/(gamma kappa)) ^ T`, full investment
/// after `t*` and all cash before, with
/// `V(t,x) = x e^{mu(T-t)} [1 - (T-t) gamma kappa]` on the invested region
/// rolled back at the riskless rate before `t*`. The a-profile on the
/// invested region is the fixed point `a*(t) = 1/gamma - kappa (T-t)`.
#[derive(Debug, Clone, Copy)]
pub struct SingleAssetClosedForm {
    mu: f64,
    rate: f64,
    gamma: f64,
    horizon: f64,
    kappa: f64,
    t_star: f64,
    a_minus: f64,
}

impl SingleAssetClosedForm {
    pub fn new(
        mu: f64,
        rate: f64,
        sigma: f64,
        jump_sens: f64,
        nu2: f64,
        gamma: f64,
        horizon: f64,
    ) -> Result<Self> {
        if !(mu.is_finite() && rate.is_finite() && mu > rate && rate >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need mu > rate >= 0, got mu = {mu}, rate = {rate}"
            )));
        }
        if !(gamma.is_finite() && gamma > 0.0 && horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(
                "gamma and horizon must be finite and > 0".into(),
            ));
        }
        if nu2 < 0.0 || jump_sens < 0.0 {
            return Err(Error::InvalidParameter(
                "jump sensitivity and nu2 must be >= 0".into(),
            ));
        }
        let kappa = (sigma * sigma + jump_sens * jump_sens * nu2).sqrt();
        if kappa <= 0.0 {
            return Err(Error::InvalidParameter(
                "closed form needs a nonzero total volatility".into(),
            ));
        }
        let t_star = (horizon + (mu - rate).recip() - (gamma * kappa).recip()).min(horizon);
        Ok(Self {
            mu,
            rate,
            gamma,
            horizon,
            kappa,
            t_star,
            a_minus: kappa / (mu - rate),
        })
    }

    /// Reads mu, r and kappa off a one-asset market; the driver is the
    /// unit-scale joint norm by construction of the closed form.
    pub fn from_model(model: &MarketModel, gamma: f64, horizon: f64) -> Result<Self> {
        if model.n_assets() != 1 {
            return Err(Error::UnsupportedDimension(model.n_assets()));
        }
        let kappa_sq = model.total_covariance()[0][0];
        Self::new(
            model.drift()[0],
            model.rate(),
            kappa_sq.sqrt(),
            0.0,
            0.0,
            gamma,
            horizon,
        )
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn t_star(&self) -> f64 {
        self.t_star
    }

    pub fn a_minus(&self) -> f64 {
        self.a_minus
    }

    /// Case (i) applies when the switch never happens before the horizon.
    pub fn degenerate(&self) -> bool {
        self.t_star >= self.horizon
    }

    pub fn allocation(&self, t: f64) -> f64 {
        if t > self.t_star {
            1.0
        } else {
            0.0
        }
    }

    pub fn a_star(&self, t: f64) -> f64 {
        if t > self.t_star {
            self.gamma.recip() - self.kappa * (self.horizon - t)
        } else {
            self.a_minus
        }
    }

    /// `h(t, x)/x`.
    pub fn mean_factor(&self, t: f64) -> f64 {
        if t >= self.t_star {
            (self.mu * (self.horizon - t)).exp()
        } else {
            (self.rate * (self.t_star - t)).exp() * (self.mu * (self.horizon - self.t_star)).exp()
        }
    }

    /// `V(t, x)/x`.
    pub fn value_factor(&self, t: f64) -> f64 {
        if t >= self.t_star {
            self.mean_factor(t) * (1.0 - (self.horizon - t) * self.gamma * self.kappa)
        } else {
            (self.rate * (self.t_star - t)).exp() * self.value_factor(self.t_star)
        }
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        x * self.value_factor(t)
    }

    pub fn mean(&self, t: f64, x: f64) -> f64 {
        x * self.mean_factor(t)
    }
}

/// Closed-form boundary maximiser pieces for two risky assets under the
/// unit-scale joint-norm driver, in terms of the instantaneous covariance
/// `s = Sigma Sigma' + R M R'` with `mu1 > mu2 > r` and `s12 < 0`.
#[derive(Debug, Clone, Copy)]
pub struct TwoAssetParams {
    pub mu1: f64,
    pub mu2: f64,
    pub rate: f64,
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TwoAssetClosedForm {
    params: TwoAssetParams,
    d_plus: f64,
    e_plus: f64,
    a_plus: f64,
}

impl TwoAssetClosedForm {
    pub fn new(params: TwoAssetParams) -> Result<Self> {
        let TwoAssetParams {
            mu1,
            mu2,
            rate,
            s11,
            s12,
            s22,
        } = params;
        if !(mu1 > mu2 && mu2 > rate) {
            return Err(Error::InvalidParameter(format!(
                "need mu1 > mu2 > rate, got {mu1}, {mu2}, {rate}"
            )));
        }
        if !(s11 > 0.0 && s22 > 0.0 && s12 < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need s11 > 0, s22 > 0 and s12 < 0, got {s11}, {s12}, {s22}"
            )));
        }
        let d_plus = s11 + s22 - 2.0 * s12;
        let e_plus = s12 - s22;
        let a_plus = (s11 - s12) / ((mu1 - mu2) * s11.sqrt());
        Ok(Self {
            params,
            d_plus,
            e_plus,
            a_plus,
        })
    }

    pub fn from_model(model: &MarketModel, ) -> Result<Self> {
        if model.n_assets() != 2 {
            return Err(Error::UnsupportedDimension(model.n_assets()));
        }
        let cov = model.total_covariance();
        Self::new(TwoAssetParams {
            mu1: model.drift()[0],
            mu2: model.drift()[1],
            rate: model.rate(),
            s11: cov[0][0],
            s12: cov[0][1],
            s22: cov[1][1],
        })
    }

    pub fn params(&self) -> TwoAssetParams {
        self.params
    }

    pub fn a_plus(&self) -> f64 {
        self.a_plus
    }

    /// `a` values beyond this bound leave the domain of `c_plus`.
    pub fn domain_bound(&self) -> f64 {
        self.d_plus.sqrt() / (self.params.mu1 - self.params.mu2)
    }

    /// Objective restricted to the face `c (1, 0) + (1-c) (0, 1)`:
    /// `T_a((c, 1-c)) = a(mu2 - r) + a(mu1 - mu2) c - sqrt(d+ c^2 + 2 e+ c + s22)`.
    pub fn edge_value(&self, a: f64, c: f64) -> f64 {
        let p = &self.params;
        a * (p.mu2 - p.rate) + a * (p.mu1 - p.mu2) * c
            - (self.d_plus * c * c + 2.0 * self.e_plus * c + p.s22).sqrt()
    }

    /// Unconstrained maximiser of the face restriction,
    /// `c_+(a) = -e+/d+ + sqrt((e+/d+)^2 - eta(a))`.
    pub fn c_plus(&self, a: f64) -> Result<f64> {
        let p = &self.params;
        let q = a * a * (p.mu1 - p.mu2) * (p.mu1 - p.mu2);
        if q >= self.d_plus {
            return Err(Error::OutOfRange(format!(
                "a = {a} leaves the domain of c_plus (a^2 (mu1-mu2)^2 >= d_plus)"
            )));
        }
        let eta = (q * p.s22 - self.e_plus * self.e_plus) / (self.d_plus * (q - self.d_plus));
        let ratio = self.e_plus / self.d_plus;
        let disc = ratio * ratio - eta;
        if disc < 0.0 {
            if disc < -1e-12 {
                return Err(Error::OutOfRange(format!(
                    "negative discriminant {disc} at a = {a}"
                )));
            }
            return Ok(-ratio);
        }
        Ok(-ratio + disc.sqrt())
    }

    /// Analytic boundary supremum: the best of the zero vertex, the two
    /// single-asset vertices (the straight edges are linear along rays) and
    /// the interior face maximiser when it falls inside (0, 1).
    pub fn boundary_sup(&self, a: f64) -> f64 {
        let p = &self.params;
        let v10 = a * (p.mu1 - p.rate) - p.s11.sqrt();
        let v01 = a * (p.mu2 - p.rate) - p.s22.sqrt();
        let mut best = 0f64.max(v10).max(v01);
        if let Ok(c) = self.c_plus(a) {
            if c > 0.0 && c < 1.0 {
                best = best.max(self.edge_value(a, c));
            }
        }
        best
    }

    /// Largest `a in [0, 1/gamma]` with `boundary_sup(a) <= 0`; the analytic
    /// counterpart of `a_minus`.
    pub fn a_minus(&self, gamma: f64) -> f64 {
        let top = gamma.recip();
        if self.boundary_sup(top) <= 0.0 {
            return top;
        }
        let (mut lo, mut hi) = (0.0_f64, top);
        while hi - lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            if self.boundary_sup(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Case table of the equilibrium allocation at level `a`.
    pub fn allocation(&self, a: f64, a_minus: f64) -> Result<[f64; 2]> {
        if a <= a_minus {
            return Ok([0.0, 0.0]);
        }
        if a > a_minus.max(self.a_plus) {
            return Ok([1.0, 0.0]);
        }
        let c = self.c_plus(a)?;
        Ok([c, 1.0 - c])
    }
}
