//! Finite-activity Lévy measures: weighted jump atoms in R^k, their moments,
//! and compound-Poisson increment sampling.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One atom of a finite-activity Lévy measure: a jump location in R^k and a
/// Poisson arrival rate (mass) in units of 1/time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpAtom {
    pub location: Vec<f64>,
    pub rate: f64,
}

impl JumpAtom {
    pub fn new(location: Vec<f64>, rate: f64) -> Self {
        Self { location, rate }
    }
}

/// Finite-activity Lévy measure `nu = sum_j rate_j * delta_{y_j}`.
///
/// Atom coordinates must all exceed -1 so that wealth multipliers
/// `1 + c'R y` stay strictly positive, and rates must be strictly positive.
/// Values are immutable after construction and safe to share across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyMeasure {
    atoms: Vec<JumpAtom>,
    dimension: usize,
}

impl LevyMeasure {
    pub fn new(dimension: usize, atoms: Vec<JumpAtom>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidParameter(
                "jump dimension must be at least 1".into(),
            ));
        }
        for (j, atom) in atoms.iter().enumerate() {
            if atom.location.len() != dimension {
                return Err(Error::DimensionMismatch(format!(
                    "atom {j} has {} coordinates, expected {dimension}",
                    atom.location.len()
                )));
            }
            if !atom.rate.is_finite() || atom.rate <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "atom {j} rate must be finite and > 0, got {}",
                    atom.rate
                )));
            }
            if atom.location.iter().any(|y| !y.is_finite() || *y <= -1.0) {
                return Err(Error::InvalidParameter(format!(
                    "atom {j} coordinates must be finite and > -1, got {:?}",
                    atom.location
                )));
            }
        }
        Ok(Self { atoms, dimension })
    }

    /// Measure with no atoms in R^k.
    pub fn empty(dimension: usize) -> Self {
        Self::new(dimension, Vec::new()).expect("empty measure is always valid")
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn atoms(&self) -> &[JumpAtom] {
        &self.atoms
    }

    /// Number of atoms.
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Total arrival rate `Lambda = sum_j rate_j`.
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.rate).sum()
    }

    /// Second absolute moment `nu_2 = sum_j rate_j |y_j|^2`.
    pub fn nu2(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.rate * a.location.iter().map(|y| y * y).sum::<f64>())
            .sum()
    }

    /// Mean jump vector `m = sum_j rate_j y_j`, the compensator density of the
    /// raw jump process.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dimension];
        for atom in &self.atoms {
            for (mi, yi) in m.iter_mut().zip(&atom.location) {
                *mi += atom.rate * yi;
            }
        }
        m
    }

    /// Second-moment matrix `M = sum_j rate_j y_j y_j'` (k x k).
    pub fn second_moment_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.dimension;
        let mut m = vec![vec![0.0; k]; k];
        for atom in &self.atoms {
            for i in 0..k {
                for l in 0..k {
                    m[i][l] += atom.rate * atom.location[i] * atom.location[l];
                }
            }
        }
        m
    }

    /// Number of arrivals per atom over a window of length `dt`, one
    /// `Poisson(rate_j * dt)` draw per atom in atom order.
    pub fn sample_jump_counts<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> Vec<u64> {
        debug_assert!(dt > 0.0);
        self.atoms
            .iter()
            .map(|atom| {
                let poisson = Poisson::new(atom.rate * dt).expect("positive rate");
                poisson.sample(rng) as u64
            })
            .collect()
    }

    /// Compound-Poisson increment over `[t, t+dt]` as a multiset of jump
    /// vectors: `Poisson(rate_j * dt)` copies of `y_j` for each atom.
    /// Deterministic given the stream state.
    pub fn sample_jumps<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> Vec<Vec<f64>> {
        let counts = self.sample_jump_counts(dt, rng);
        let mut jumps = Vec::new();
        for (atom, count) in self.atoms.iter().zip(counts) {
            for _ in 0..count {
                jumps.push(atom.location.clone());
            }
        }
        jumps
    }
}
