//! Deformability estimation by grid search: simulate the poked patch for
//! each candidate β and keep the one whose equilibrium lies closest to the
//! observed surface.

use nalgebra::{Point2, Point3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msm::{Constraint, MsmError, MsmSolver, RestShape, SolverParams};
use crate::spatial::PointIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite point in observed shape")]
    NonFinite,
    #[error("invalid beta grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Solver(#[from] MsmError),
}

pub type Result<T, E = EstimatorError> = std::result::Result<T, E>;

/// Dense reconstruction of a deformed patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedShape {
    points: Vec<Point3<f64>>,
}

impl ObservedShape {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(EstimatorError::EmptyInput("observed shape"));
        }
        if points.iter().any(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(EstimatorError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }
}

/// Mean distance from each simulated point to its nearest observed point.
pub fn chamfer_error(sim: &[Point3<f64>], observed: &ObservedShape) -> Result<f64> {
    if sim.is_empty() {
        return Err(EstimatorError::EmptyInput("simulated points"));
    }
    Ok(chamfer_indexed(sim, &PointIndex::new(observed.points())))
}

fn chamfer_indexed(sim: &[Point3<f64>], index: &PointIndex<'_>) -> f64 {
    let total: f64 = sim
        .iter()
        .map(|p| index.nearest(p).map_or(0.0, |(_, d)| d))
        .sum();
    total / sim.len() as f64
}

/// Residual differences below this (m) count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Residual of one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub beta: f64,
    pub error: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSample {
    pub location: [f64; 2],
    pub beta_hat: f64,
    pub residuals: Vec<Residual>,
}

impl BetaSample {
    pub fn min_error(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.error)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn all_converged(&self) -> bool {
        self.residuals.iter().all(|r| r.converged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Number of uniform candidates `k / n` in `[0, 1)`.
    pub beta_samples: usize,
    /// Start each candidate from the previous candidate's equilibrium.
    pub warm_start: bool,
    pub cluster_size: usize,
    pub cluster_stride: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            beta_samples: 20,
            warm_start: false,
            cluster_size: 3,
            cluster_stride: 1,
        }
    }
}

impl EstimatorConfig {
    pub fn beta_grid(&self) -> Vec<f64> {
        beta_grid(self.beta_samples)
    }
}

/// `{0, 1/n, ..., (n-1)/n}`.
pub fn beta_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / n as f64).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(EstimatorError::EmptyInput("beta grid"));
    }
    if grid.iter().any(|b| !(0.0..1.0).contains(b)) {
        return Err(EstimatorError::InvalidGrid("values must lie in [0, 1)".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EstimatorError::InvalidGrid("values must be strictly ascending".into()));
    }
    Ok(())
}

/// Simulated equilibria for every candidate β of one poke, reusable
/// against any number of observations.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    location: [f64; 2],
    candidates: Vec<(f64, Vec<Point3<f64>>, bool, usize)>,
}

impl CandidateSet {
    pub fn simulate(
        shape: &RestShape,
        constraints: &[Constraint],
        beta_grid: &[f64],
        params: &SolverParams,
        warm_start: bool,
    ) -> Result<Self> {
        check_grid(beta_grid)?;
        let solver = MsmSolver::new(shape)?;
        let mut candidates: Vec<(f64, Vec<Point3<f64>>, bool, usize)> = Vec::with_capacity(beta_grid.len());
        for &beta in beta_grid {
            let init = if warm_start {
                candidates.last().map(|c| c.1.as_slice())
            } else {
                None
            };
            let r = solver.relax_from(init, constraints, beta, params)?;
            candidates.push((beta, r.positions, r.converged, r.iterations));
        }
        Ok(Self {
            location: poke_location(shape, constraints),
            candidates,
        })
    }

    pub fn betas(&self) -> impl Iterator<Item = f64> + '_ {
        self.candidates.iter().map(|c| c.0)
    }

    /// Equilibrium positions for the candidate at `i`.
    pub fn positions(&self, i: usize) -> &[Point3<f64>] {
        &self.candidates[i].1
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn score(&self, observed: &ObservedShape) -> BetaSample {
        let index = PointIndex::new(observed.points());
        let residuals: Vec<Residual> = self
            .candidates
            .iter()
            .map(|(beta, pos, converged, iterations)| Residual {
                beta: *beta,
                error: chamfer_indexed(pos, &index),
                converged: *converged,
                iterations: *iterations,
            })
            .collect();
        // a candidate must beat the incumbent by more than round-off, so
        // ties keep the smaller beta
        let mut best = 0;
        for (i, r) in residuals.iter().enumerate() {
            if r.error < residuals[best].error - TIE_TOLERANCE {
                best = i;
            }
        }
        BetaSample {
            location: self.location,
            beta_hat: residuals[best].beta,
            residuals,
        }
    }
}

/// Mean xy of the constrained positions, or of the whole shape when nothing
/// is constrained.
fn poke_location(shape: &RestShape, constraints: &[Constraint]) -> [f64; 2] {
    let pts: Vec<Point2<f64>> = if constraints.is_empty() {
        shape.positions().iter().map(|p| p.xy()).collect()
    } else {
        constraints.iter().map(|c| c.position.xy()).collect()
    };
    let n = pts.len().max(1) as f64;
    let sum = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p.x, a[1] + p.y]);
    [sum[0] / n, sum[1] / n]
}

/// Grid search for the β whose simulated equilibrium best matches `observed`.
pub fn estimate_beta(
    shape: &RestShape,
    constraints: &[Constraint],
    observed: &ObservedShape,
    beta_grid: &[f64],
    params: &SolverParams,
) -> Result<BetaSample> {
    Ok(CandidateSet::simulate(shape, constraints, beta_grid, params, false)?.score(observed))
}
