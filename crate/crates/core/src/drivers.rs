//! Deviation driver functions g(h, htilde) acting on a diffusion coefficient
//! h in R^d and a jump payoff htilde given by its values on the atoms of a
//! finite-activity Lévy measure.
//!
//! Three concrete families are provided:
//! - `ScaledSplitNorm(c, d)`: `c |h| + d * ||htilde||_{L2(nu)}`,
//! - `ScaledJointNorm(scale)`: `scale * sqrt(|h|^2 + ||htilde||^2_{L2(nu)})`,
//! - `CvarJump(a)`: the nu-tail average of the worst jump payoffs over mass a
//!   (ignores h, and is not a positive driver).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::jumps::LevyMeasure;

/// Jump payoff `htilde` evaluated at each atom of a referenced measure.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPayoff {
    values: Vec<f64>,
}

impl JumpPayoff {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zero(atom_count: usize) -> Self {
        Self {
            values: vec![0.0; atom_count],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Squared L2(nu) norm `sum_j rate_j htilde_j^2`.
    pub fn weighted_norm_sq(&self, measure: &LevyMeasure) -> Result<f64> {
        weighted_norm_sq(&self.values, measure)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| factor * v).collect(),
        }
    }

    pub fn added(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch(format!(
                "payoff lengths {} and {} differ",
                self.len(),
                other.len()
            )));
        }
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

fn weighted_norm_sq(values: &[f64], measure: &LevyMeasure) -> Result<f64> {
    if values.len() != measure.len() {
        return Err(Error::DimensionMismatch(format!(
            "payoff has {} values, measure has {} atoms",
            values.len(),
            measure.len()
        )));
    }
    Ok(values
        .iter()
        .zip(measure.atoms())
        .map(|(v, atom)| atom.rate * v * v)
        .sum())
}

/// Concrete driver family and its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriverKind {
    /// `c |h| + d ||htilde||_{L2(nu)}`.
    ScaledSplitNorm { c: f64, d: f64 },
    /// `scale * sqrt(|h|^2 + ||htilde||^2_{L2(nu)})`.
    ScaledJointNorm { scale: f64 },
    /// nu-CVaR of the jump payoff at tail mass `a`, independent of h.
    CvarJump { tail_mass: f64 },
}

/// An evaluatable deviation driver tied to a Lévy measure.
///
/// Drivers are immutable and `eval` is a pure function.
#[derive(Debug, Clone)]
pub struct Driver {
    kind: DriverKind,
    measure: LevyMeasure,
}

impl Driver {
    pub fn new(kind: DriverKind, measure: LevyMeasure) -> Result<Self> {
        match kind {
            DriverKind::ScaledSplitNorm { c, d } => {
                if !(c.is_finite() && c > 0.0 && d.is_finite() && d > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "split-norm driver needs c > 0 and d > 0, got c = {c}, d = {d}"
                    )));
                }
            }
            DriverKind::ScaledJointNorm { scale } => {
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "joint-norm driver needs scale > 0, got {scale}"
                    )));
                }
            }
            DriverKind::CvarJump { tail_mass } => {
                let total = measure.total_mass();
                if !(tail_mass > 0.0 && tail_mass < total) {
                    return Err(Error::OutOfRange(format!(
                        "CVaR tail mass must lie in (0, {total}), got {tail_mass}"
                    )));
                }
            }
        }
        Ok(Self { kind, measure })
    }

    pub fn kind(&self) -> DriverKind {
        self.kind
    }

    pub fn measure(&self) -> &LevyMeasure {
        &self.measure
    }

    /// All provided families are convex.
    pub fn is_convex(&self) -> bool {
        true
    }

    /// All provided families are positively homogeneous.
    pub fn is_positively_homogeneous(&self) -> bool {
        true
    }

    /// Whether `g(h, htilde) > 0` for all `(h, htilde) != 0` is claimed.
    /// The CVaR jump driver violates this (e.g. on positive constant payoffs).
    pub fn is_positive(&self) -> bool {
        !matches!(self.kind, DriverKind::CvarJump { .. })
    }

    /// Natural constant K for the linear-growth bound
    /// `g^2 <= 1 + K^2 |h|^2 + K^2 ||htilde||^2_{L2(nu)}`.
    pub fn linear_growth_constant(&self) -> f64 {
        match self.kind {
            DriverKind::ScaledSplitNorm { c, d } => std::f64::consts::SQRT_2 * c.max(d),
            DriverKind::ScaledJointNorm { scale } => scale,
            DriverKind::CvarJump { tail_mass } => tail_mass.sqrt().recip(),
        }
    }

    /// Evaluates the driver at diffusion coefficient `h` and jump payoff
    /// `htilde`.
    pub fn eval(&self, h: &[f64], htilde: &JumpPayoff) -> Result<f64> {
        self.eval_values(h, htilde.values())
    }

    /// Slice-level evaluation (one value per atom); avoids wrapper
    /// allocations in inner loops.
    pub fn eval_values(&self, h: &[f64], htilde: &[f64]) -> Result<f64> {
        match self.kind {
            DriverKind::ScaledSplitNorm { c, d } => {
                let jump_sq = weighted_norm_sq(htilde, &self.measure)?;
                Ok(c * norm(h) + d * jump_sq.sqrt())
            }
            DriverKind::ScaledJointNorm { scale } => {
                let jump_sq = weighted_norm_sq(htilde, &self.measure)?;
                Ok(scale * (norm_sq(h) + jump_sq).sqrt())
            }
            DriverKind::CvarJump { tail_mass } => cvar_nu(tail_mass, htilde, &self.measure),
        }
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn norm(v: &[f64]) -> f64 {
    norm_sq(v).sqrt()
}

/// Average of the worst (most negative) payoff values over nu-mass
/// `tail_mass`, negated so that a pure downside payoff yields a positive
/// number. The marginal atom is split proportionally.
pub fn cvar_nu(tail_mass: f64, htilde: &[f64], measure: &LevyMeasure) -> Result<f64> {
    let total = measure.total_mass();
    if !(tail_mass > 0.0 && tail_mass < total) {
        return Err(Error::OutOfRange(format!(
            "CVaR tail mass must lie in (0, {total}), got {tail_mass}"
        )));
    }
    if htilde.len() != measure.len() {
        return Err(Error::DimensionMismatch(format!(
            "payoff has {} values, measure has {} atoms",
            htilde.len(),
            measure.len()
        )));
    }
    let mut order: Vec<usize> = (0..htilde.len()).collect();
    order.sort_by(|&i, &j| htilde[i].total_cmp(&htilde[j]));
    let mut remaining = tail_mass;
    let mut acc = 0.0;
    for &j in &order {
        let take = remaining.min(measure.atoms()[j].rate);
        acc += take * htilde[j];
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }
    Ok(-acc / tail_mass)
}

/// Randomised axiom check report for one driver.
#[derive(Debug, Clone)]
pub struct DriverAxiomReport {
    pub samples: usize,
    pub homogeneity_max_rel_error: f64,
    pub subadditivity_max_violation: f64,
    pub linear_growth_max_excess: f64,
    pub positivity_claimed: bool,
    pub positivity_violations: usize,
    /// Smallest g value seen on a nonzero input, as evidence for violations.
    pub min_nonzero_value: f64,
}

impl DriverAxiomReport {
    /// Positivity failures only count against drivers that claim positivity;
    /// for the CVaR jump driver they are recorded as expected.
    pub fn passed(&self) -> bool {
        self.homogeneity_max_rel_error <= 1e-12
            && self.subadditivity_max_violation <= 1e-12
            && self.linear_growth_max_excess <= 1e-12
            && (!self.positivity_claimed || self.positivity_violations == 0)
    }

    pub fn expected_positivity_failure(&self) -> bool {
        !self.positivity_claimed && self.positivity_violations > 0
    }
}

/// Runs randomised checks of positive homogeneity, subadditivity, positivity
/// and the linear-growth bound on `samples` random inputs with diffusion
/// dimension `diffusion_dim`.
pub fn check_driver_axioms<R: Rng + ?Sized>(
    driver: &Driver,
    diffusion_dim: usize,
    samples: usize,
    rng: &mut R,
) -> DriverAxiomReport {
    let atom_count = driver.measure().len();
    let growth_k = driver.linear_growth_constant();

    let mut report = DriverAxiomReport {
        samples,
        homogeneity_max_rel_error: 0.0,
        subadditivity_max_violation: 0.0,
        linear_growth_max_excess: 0.0,
        positivity_claimed: driver.is_positive(),
        positivity_violations: 0,
        min_nonzero_value: f64::INFINITY,
    };

    let draw_point = |rng: &mut R| -> (Vec<f64>, Vec<f64>) {
        let scale = 10f64.powf(rng.random_range(-1.0..1.0));
        let h: Vec<f64> = (0..diffusion_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let v: Vec<f64> = (0..atom_count)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (h, v)
    };

    for _ in 0..samples {
        let (h1, v1) = draw_point(rng);
        let (h2, v2) = draw_point(rng);
        let g1 = driver.eval_values(&h1, &v1).expect("consistent dims");
        let g2 = driver.eval_values(&h2, &v2).expect("consistent dims");

        // positive homogeneity at a random kappa in [1e-3, 1e3]
        let kappa = 10f64.powf(rng.random_range(-3.0..3.0));
        let hk: Vec<f64> = h1.iter().map(|x| kappa * x).collect();
        let vk: Vec<f64> = v1.iter().map(|x| kappa * x).collect();
        let gk = driver.eval_values(&hk, &vk).expect("consistent dims");
        let rel = (gk - kappa * g1).abs() / (kappa * g1.abs()).max(1e-100);
        report.homogeneity_max_rel_error = report.homogeneity_max_rel_error.max(rel);

        // subadditivity
        let hs: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a + b).collect();
        let vs: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let gs = driver.eval_values(&hs, &vs).expect("consistent dims");
        report.subadditivity_max_violation =
            report.subadditivity_max_violation.max(gs - (g1 + g2));

        // positivity on nonzero inputs
        let nonzero = h1.iter().chain(&v1).any(|x| *x != 0.0);
        if nonzero {
            report.min_nonzero_value = report.min_nonzero_value.min(g1);
            if g1 <= 0.0 {
                report.positivity_violations += 1;
            }
        }

        // linear-growth bound with the driver's natural constant
        let jump_sq = weighted_norm_sq(&v1, driver.measure()).expect("consistent dims");
        let bound = 1.0 + growth_k * growth_k * (norm_sq(&h1) + jump_sq);
        report.linear_growth_max_excess =
            report.linear_growth_max_excess.max(g1 * g1 - bound);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jumps::JumpAtom;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn half_half_measure() -> LevyMeasure {
        LevyMeasure::new(
            1,
            vec![
                JumpAtom::new(vec![0.2], 0.5),
                JumpAtom::new(vec![-0.5], 0.5),
            ],
        )
        .unwrap()
    }

    #[test]
    fn eval_vanishes_at_zero() {
        let measure = half_half_measure();
        for kind in [
            DriverKind::ScaledSplitNorm { c: 2.0, d: 3.0 },
            DriverKind::ScaledJointNorm { scale: 1.0 },
            DriverKind::CvarJump { tail_mass: 0.25 },
        ] {
            let driver = Driver::new(kind, measure.clone()).unwrap();
            let g = driver.eval(&[0.0, 0.0], &JumpPayoff::zero(2)).unwrap();
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn joint_norm_reduces_to_euclidean_norm() {
        let driver = Driver::new(
            DriverKind::ScaledJointNorm { scale: 1.0 },
            half_half_measure(),
        )
        .unwrap();
        let g = driver.eval(&[3.0, 4.0], &JumpPayoff::zero(2)).unwrap();
        assert_relative_eq!(g, 5.0);
    }

    #[test]
    fn split_norm_direct_substitution() {
        // one atom rate 0.25, payoff 2: 2*1 + 3*sqrt(0.25*4) = 5
        let measure = LevyMeasure::new(1, vec![JumpAtom::new(vec![0.1], 0.25)]).unwrap();
        let driver =
            Driver::new(DriverKind::ScaledSplitNorm { c: 2.0, d: 3.0 }, measure).unwrap();
        let g = driver
            .eval(&[1.0, 0.0], &JumpPayoff::new(vec![2.0]))
            .unwrap();
        assert_relative_eq!(g, 5.0);
    }

    #[test]
    fn eval_rejects_mismatched_payoff() {
        let driver = Driver::new(
            DriverKind::ScaledJointNorm { scale: 1.0 },
            half_half_measure(),
        )
        .unwrap();
        assert!(driver.eval(&[1.0], &JumpPayoff::new(vec![1.0])).is_err());
    }

    #[test]
    fn cvar_nu_sorted_tail_average() {
        let measure = half_half_measure();
        // values (-2, 1) with masses 0.5/0.5
        let payoff = [-2.0, 1.0];
        // a = 0.25:
        assert_relative_eq!(cvar_nu(0.25, &payoff, &measure).unwrap(), 2.0);
        // a = 0.75: -(1/0.75)(0.5*(-2) + 0.25*1) = 1
        assert_relative_eq!(cvar_nu(0.75, &payoff, &measure).unwrap(), 1.0);
        // zero payoff
        assert_eq!(cvar_nu(0.5, &[0.0, 0.0], &measure).unwrap(), 0.0);
    }

    #[test]
    fn cvar_nu_rejects_bad_tail_mass() {
        let measure = half_half_measure();
        assert!(cvar_nu(0.0, &[1.0, 1.0], &measure).is_err());
        assert!(cvar_nu(1.0, &[1.0, 1.0], &measure).is_err());
        assert!(cvar_nu(-0.1, &[1.0, 1.0], &measure).is_err());
    }

    #[test]
    fn cvar_driver_is_asymmetric_norm_drivers_symmetric() {
        let measure = half_half_measure();
        let cvar = Driver::new(DriverKind::CvarJump { tail_mass: 0.25 }, measure.clone()).unwrap();
        let plus = JumpPayoff::new(vec![-2.0, 1.0]);
        let minus = plus.scaled(-1.0);
        let g_plus = cvar.eval(&[0.0], &plus).unwrap();
        let g_minus = cvar.eval(&[0.0], &minus).unwrap();
        assert_relative_eq!(g_plus, 2.0);
        assert_relative_eq!(g_minus, 1.0);
        assert!(g_plus != g_minus);

        for kind in [
            DriverKind::ScaledSplitNorm { c: 2.0, d: 3.0 },
            DriverKind::ScaledJointNorm { scale: 1.7 },
        ] {
            let driver = Driver::new(kind, measure.clone()).unwrap();
            let h = [0.4, -0.3];
            let hm = [-0.4, 0.3];
            assert_eq!(
                driver.eval(&h, &plus).unwrap(),
                driver.eval(&hm, &minus).unwrap()
            );
        }
    }

    #[test]
    fn axioms_pass_for_norm_drivers() {
        let measure = half_half_measure();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for kind in [
            DriverKind::ScaledJointNorm { scale: 1.0 },
            DriverKind::ScaledSplitNorm { c: 2.0, d: 3.0 },
        ] {
            let driver = Driver::new(kind, measure.clone()).unwrap();
            let report = check_driver_axioms(&driver, 3, 1000, &mut rng);
            assert!(report.passed(), "{report:?}");
            assert_eq!(report.positivity_violations, 0);
        }
    }

    #[test]
    fn cvar_positivity_failure_is_expected_not_an_error() {
        let measure = half_half_measure();
        let driver = Driver::new(DriverKind::CvarJump { tail_mass: 0.25 }, measure).unwrap();
        // constant +1 payoff: cvar = -1 < 0
        let g = driver.eval(&[0.0], &JumpPayoff::new(vec![1.0, 1.0])).unwrap();
        assert_relative_eq!(g, -1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let report = check_driver_axioms(&driver, 1, 1000, &mut rng);
        assert!(report.passed(), "{report:?}");
        assert!(report.expected_positivity_failure());
    }

    #[test]
    fn homogeneity_with_unit_kappa_is_identity() {
        let driver = Driver::new(
            DriverKind::ScaledJointNorm { scale: 2.0 },
            half_half_measure(),
        )
        .unwrap();
        let h = [0.3, -1.2];
        let v = JumpPayoff::new(vec![0.7, -0.1]);
        let g = driver.eval(&h, &v).unwrap();
        let g1 = driver.eval(&h, &v.scaled(1.0)).unwrap();
        assert_eq!(g, g1);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let measure = half_half_measure();
        assert!(Driver::new(DriverKind::ScaledSplitNorm { c: 0.0, d: 1.0 }, measure.clone()).is_err());
        assert!(Driver::new(DriverKind::ScaledJointNorm { scale: -1.0 }, measure.clone()).is_err());
        assert!(Driver::new(DriverKind::CvarJump { tail_mass: 1.5 }, measure.clone()).is_err());
        assert!(Driver::new(
            DriverKind::CvarJump { tail_mass: 0.5 },
            LevyMeasure::empty(1)
        )
        .is_err());
    }
}
