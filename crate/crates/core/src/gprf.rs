//! Gaussian random fields: GP regression over planar coordinates.
//!
//! Used for three things: the heightmap of the observed surface, the dense
//! reconstruction of a poked patch, and the deformability (beta) field.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Point2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Diagonal jitter used when the model is declared noise free.
pub const NOISE_FREE_JITTER: f64 = 1e-10;

/// Smallest pivot (relative to the prior variance) accepted from the
/// factorization of a noise-free kernel matrix.
const MIN_RELATIVE_PIVOT: f64 = 1e-9;

/// Number of query points evaluated per batched triangular solve.
const QUERY_CHUNK: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GprError {
    #[error("training set is empty")]
    EmptyTraining,
    #[error("{inputs} inputs but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("training data contains non-finite values")]
    NonFinite,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("kernel matrix is not numerically positive definite")]
    FactorizationFailure,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

pub type Result<T, E = GprError> = std::result::Result<T, E>;

/// Squared-exponential kernel parameters.
///
/// `sigma_w` divides the squared distance directly, so it carries units of m².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub sigma_e: f64,
    pub sigma_w: f64,
    pub sigma_n: f64,
}

impl Hyperparams {
    pub fn new(sigma_e: f64, sigma_w: f64, sigma_n: f64) -> Result<Self> {
        let h = Self {
            sigma_e,
            sigma_w,
            sigma_n,
        };
        h.validate()?;
        Ok(h)
    }

    /// Defaults for height models.
    pub fn geometry() -> Self {
        Self {
            sigma_e: 0.05,
            sigma_w: 0.005,
            sigma_n: 0.003,
        }
    }

    /// Defaults for the deformability field.
    pub fn beta_field() -> Self {
        Self {
            sigma_e: 0.5,
            sigma_w: 0.01,
            sigma_n: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_e > 0.0 && self.sigma_e.is_finite()) {
            return Err(GprError::InvalidHyperparams(format!(
                "sigma_e must be positive, got {}",
                self.sigma_e
            )));
        }
        if !(self.sigma_w > 0.0 && self.sigma_w.is_finite()) {
            return Err(GprError::InvalidHyperparams(format!(
                "sigma_w must be positive, got {}",
                self.sigma_w
            )));
        }
        if !(self.sigma_n >= 0.0 && self.sigma_n.is_finite()) {
            return Err(GprError::InvalidHyperparams(format!(
                "sigma_n must be non-negative, got {}",
                self.sigma_n
            )));
        }
        Ok(())
    }

    pub fn prior_variance(&self) -> f64 {
        self.sigma_e * self.sigma_e
    }
}

/// `k(a, b) = σ_e² exp(-|a - b|² / σ_w)`.
#[inline]
pub fn kernel_eval(xi: &Point2<f64>, xj: &Point2<f64>, hyper: &Hyperparams) -> f64 {
    hyper.prior_variance() * (-(xi - xj).norm_squared() / hyper.sigma_w).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: Vec<Point2<f64>>,
    targets: Vec<f64>,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Point2<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(GprError::LengthMismatch {
                inputs: inputs.len(),
                targets: targets.len(),
            });
        }
        if inputs.is_empty() {
            return Err(GprError::EmptyTraining);
        }
        let finite = inputs.iter().all(|p| p.x.is_finite() && p.y.is_finite())
            && targets.iter().all(|t| t.is_finite());
        if !finite {
            return Err(GprError::NonFinite);
        }
        Ok(Self { inputs, targets })
    }

    pub fn inputs(&self) -> &[Point2<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn target_mean(&self) -> f64 {
        self.targets.iter().sum::<f64>() / self.targets.len() as f64
    }

    /// Concatenate two training sets.
    pub fn extended(&self, other: &TrainingSet) -> TrainingSet {
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(&other.inputs);
        let mut targets = self.targets.clone();
        targets.extend_from_slice(&other.targets);
        TrainingSet { inputs, targets }
    }
}

/// A fitted Gaussian random field.
///
/// Targets are modelled as `prior_mean + f(x)` with `f` a zero-mean GP; the
/// plain zero-mean model is `prior_mean = 0`.
#[derive(Debug, Clone)]
pub struct GprModel {
    training: TrainingSet,
    hyper: Hyperparams,
    prior_mean: f64,
    factor: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Fit a zero-mean field.
pub fn fit(training: TrainingSet, hyper: Hyperparams) -> Result<GprModel> {
    GprModel::fit_with_mean(training, hyper, 0.0)
}

impl GprModel {
    pub fn fit(training: TrainingSet, hyper: Hyperparams) -> Result<Self> {
        Self::fit_with_mean(training, hyper, 0.0)
    }

    /// Fit with the prior mean set to the average training target.
    pub fn fit_centered(training: TrainingSet, hyper: Hyperparams) -> Result<Self> {
        let mean = training.target_mean();
        Self::fit_with_mean(training, hyper, mean)
    }

    pub fn fit_with_mean(training: TrainingSet, hyper: Hyperparams, prior_mean: f64) -> Result<Self> {
        hyper.validate()?;
        if !prior_mean.is_finite() {
            return Err(GprError::NonFinite);
        }
        let n = training.len();
        let x = training.inputs();
        let noise_free = hyper.sigma_n == 0.0;
        let diag = if noise_free {
            NOISE_FREE_JITTER
        } else {
            hyper.sigma_n * hyper.sigma_n
        };
        let mut k = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = kernel_eval(&x[i], &x[j], &hyper);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(j, j)] += diag;
        }
        let factor = Cholesky::new(k).ok_or(GprError::FactorizationFailure)?;
        if noise_free {
            let floor = MIN_RELATIVE_PIVOT * hyper.prior_variance();
            let l = factor.l_dirty();
            if (0..n).any(|i| l[(i, i)] * l[(i, i)] < floor) {
                return Err(GprError::FactorizationFailure);
            }
        }
        let y = DVector::from_iterator(n, training.targets().iter().map(|t| t - prior_mean));
        let alpha = factor.solve(&y);
        Ok(Self {
            training,
            hyper,
            prior_mean,
            factor,
            alpha,
        })
    }

    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    /// `(K + σ_n² I)⁻¹ (y - prior_mean)`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    fn cross_kernel(&self, test: &[Point2<f64>]) -> DMatrix<f64> {
        let x = self.training.inputs();
        DMatrix::from_fn(x.len(), test.len(), |i, j| kernel_eval(&x[i], &test[j], &self.hyper))
    }

    fn predict_chunk(
        &self,
        test: &[Point2<f64>],
        mean: Option<&mut Vec<f64>>,
        variance: Option<&mut Vec<f64>>,
    ) {
        let mut ks = self.cross_kernel(test);
        if let Some(mean) = mean {
            mean.extend(ks.column_iter().map(|c| self.prior_mean + c.dot(&self.alpha)));
        }
        if let Some(variance) = variance {
            let prior = self.hyper.prior_variance();
            self.factor.l_dirty().solve_lower_triangular_mut(&mut ks);
            variance.extend(ks.column_iter().map(|v| (prior - v.norm_squared()).max(0.0)));
        }
    }

    fn predict_impl(&self, test: &[Point2<f64>], want_mean: bool, want_var: bool) -> (Vec<f64>, Vec<f64>) {
        let mut mean = Vec::with_capacity(if want_mean { test.len() } else { 0 });
        let mut var = Vec::with_capacity(if want_var { test.len() } else { 0 });
        for chunk in test.chunks(QUERY_CHUNK) {
            self.predict_chunk(
                chunk,
                want_mean.then_some(&mut mean),
                want_var.then_some(&mut var),
            );
        }
        (mean, var)
    }

    /// Posterior mean at each query point.
    pub fn predict_mean(&self, test: &[Point2<f64>]) -> Vec<f64> {
        self.predict_impl(test, true, false).0
    }

    /// Posterior variance (diagonal only) at each query point.
    pub fn predict_variance(&self, test: &[Point2<f64>]) -> Vec<f64> {
        self.predict_impl(test, false, true).1
    }

    pub fn predict(&self, test: &[Point2<f64>]) -> (Vec<f64>, Vec<f64>) {
        self.predict_impl(test, true, true)
    }

    /// Mean and variance on every cell of a grid.
    pub fn infer_grid(&self, spec: &GridSpec) -> (ScalarField, ScalarField) {
        let (mean, var) = self.predict(&spec.points());
        (
            ScalarField {
                spec: *spec,
                values: mean,
            },
            ScalarField {
                spec: *spec,
                values: var,
            },
        )
    }

    /// Mean only on every cell of a grid.
    pub fn infer_mean_grid(&self, spec: &GridSpec) -> ScalarField {
        ScalarField {
            spec: *spec,
            values: self.predict_mean(&spec.points()),
        }
    }
}

pub fn predict_mean(model: &GprModel, test: &[Point2<f64>]) -> Vec<f64> {
    model.predict_mean(test)
}

pub fn predict_variance(model: &GprModel, test: &[Point2<f64>]) -> Vec<f64> {
    model.predict_variance(test)
}

pub fn infer_grid(model: &GprModel, spec: &GridSpec) -> (ScalarField, ScalarField) {
    model.infer_grid(spec)
}

/// Regular lattice; cell `(i, j)` (row `i`, column `j`) sits at
/// `origin + (j * spacing, i * spacing)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 2],
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(origin: [f64; 2], spacing: f64, nx: usize, ny: usize) -> Result<Self> {
        let spec = Self {
            origin,
            spacing,
            nx,
            ny,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Smallest grid with the given spacing covering `[x0, x1] x [y0, y1]`.
    pub fn covering(min: [f64; 2], max: [f64; 2], spacing: f64) -> Result<Self> {
        let count = |lo: f64, hi: f64| ((hi - lo) / spacing + 1e-9).floor() as usize + 1;
        Self::new(min, spacing, count(min[0], max[0]), count(min[1], max[1]))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(GprError::InvalidGrid(format!(
                "spacing must be positive, got {}",
                self.spacing
            )));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(GprError::InvalidGrid("grid needs at least one cell".into()));
        }
        if !(self.origin[0].is_finite() && self.origin[1].is_finite()) {
            return Err(GprError::InvalidGrid("non-finite origin".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn point(&self, row: usize, col: usize) -> Point2<f64> {
        Point2::new(
            self.origin[0] + col as f64 * self.spacing,
            self.origin[1] + row as f64 * self.spacing,
        )
    }

    pub fn point_at(&self, index: usize) -> Point2<f64> {
        self.point(index / self.nx, index % self.nx)
    }

    /// Cell centres in row-major order.
    pub fn points(&self) -> Vec<Point2<f64>> {
        (0..self.ny)
            .flat_map(|i| (0..self.nx).map(move |j| (i, j)))
            .map(|(i, j)| self.point(i, j))
            .collect()
    }

    /// Row-major index of the cell nearest to `p`, clamped to the grid.
    pub fn nearest_index(&self, p: &Point2<f64>) -> usize {
        let snap = |v: f64, o: f64, n: usize| {
            let k = ((v - o) / self.spacing).round();
            k.clamp(0.0, (n - 1) as f64) as usize
        };
        snap(p.y, self.origin[1], self.ny) * self.nx + snap(p.x, self.origin[0], self.nx)
    }
}

/// Scalar values sampled on a [`GridSpec`], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.len() {
            return Err(GprError::InvalidGrid(format!(
                "{} values for a {}x{} grid",
                values.len(),
                spec.nx,
                spec.ny
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GprError::NonFinite);
        }
        Ok(Self { spec, values })
    }

    pub fn constant(spec: GridSpec, value: f64) -> Self {
        Self {
            spec,
            values: vec![value; spec.len()],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.spec.nx + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64).sqrt()
    }

    /// Copy with every value mapped through `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            spec: self.spec,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }
}
