//! Dynamic deviation measures for jump-diffusion random variables and
//! time-consistent mean-deviation portfolio selection.
//!
//! The crate computes deviation measures through their driver-function
//! integral representation, solves the dynamic mean-deviation portfolio
//! problem by constructing the subgame-perfect equilibrium policy via an
//! extended-HJB fixed point, and cross-validates the construction against
//! closed forms and Monte Carlo simulation.

pub mod error;
pub mod jumps;
pub mod drivers;
pub mod deviation;
pub mod market;
pub mod equilibrium;
pub mod validate;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
pub use jumps::{JumpAtom, LevyMeasure};
pub use drivers::{Driver, DriverKind, JumpPayoff};
pub use deviation::{GridDeviationSpec, RepresentingPair};
pub use market::{MarketModel, PathSet, Policy};
pub use equilibrium::EquilibriumSolution;
