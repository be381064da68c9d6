//! Meshless shape matching (position-based dynamics) for elastic surfaces.
//!
//! A surface is a set of particles grouped into overlapping clusters. Each
//! cluster finds the transform that best maps its rest configuration onto the
//! current positions (rigid, linear or quadratic), the per-cluster goals are
//! averaged per particle, and unconstrained particles are pulled towards those
//! goals until nothing moves any more. The deformability `beta` blends between
//! the rigid rotation (`beta = 0`) and the optimal linear/quadratic fit.

use nalgebra::{Matrix3, Point3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Matrix3x9 = SMatrix<f64, 3, 9>;
pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Vector9 = SVector<f64, 9>;

/// Moment-matrix eigen-directions weaker than this fraction of the strongest
/// one (after scaling coordinates by the cluster's rms radius) are treated as
/// degenerate. Sub-millimetre height noise on a centimetre-wide flat patch
/// stays below it, so such a patch behaves like an exactly flat one.
pub const DEGENERATE_RATIO: f64 = 1e-2;

/// A rank-deficient `A_r` is accepted down to rank 2; below this ratio
/// between the middle and the largest singular value it is treated as singular.
const SINGULAR_RATIO: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MsmError {
    #[error("total cluster mass must be positive")]
    ZeroMass,
    #[error("moment matrix is singular even after regularization")]
    DegenerateShape,
    #[error("matrix is singular, no rotation can be extracted")]
    SingularMatrix,
    #[error("bad cluster specification: {0}")]
    BadClusterSpec(String),
    #[error("particle {0} belongs to no cluster")]
    UncoveredParticle(usize),
    #[error("beta must lie in [0, 1), got {0}")]
    InvalidBeta(f64),
    #[error("constraint index {index} out of range for {len} particles")]
    ConstraintOutOfRange { index: usize, len: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("relaxation did not converge after {iterations} iterations (last step {last_step:.3e} m)")]
    NoConvergence { iterations: usize, last_step: f64 },
}

pub type Result<T, E = MsmError> = std::result::Result<T, E>;

/// Which optimal transform is blended with the rigid rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DeformMode {
    Rigid,
    Linear,
    #[default]
    Quadratic,
}

/// Rest configuration of a particle surface.
#[derive(Debug, Clone, PartialEq)]
pub struct RestShape {
    positions: Vec<Point3<f64>>,
    masses: Vec<f64>,
    clusters: Vec<Vec<usize>>,
    fixed: Vec<bool>,
}

impl RestShape {
    pub fn new(
        positions: Vec<Point3<f64>>,
        masses: Vec<f64>,
        clusters: Vec<Vec<usize>>,
        fixed: Vec<bool>,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(MsmError::InvalidShape("no particles".into()));
        }
        if masses.len() != n || fixed.len() != n {
            return Err(MsmError::InvalidShape(format!(
                "{} positions but {} masses and {} fixed flags",
                n,
                masses.len(),
                fixed.len()
            )));
        }
        if masses.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(MsmError::InvalidShape("masses must be positive".into()));
        }
        if positions.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(MsmError::InvalidShape("non-finite rest position".into()));
        }
        let mut covered = vec![false; n];
        for cluster in &clusters {
            if cluster.is_empty() {
                return Err(MsmError::BadClusterSpec("empty cluster".into()));
            }
            for &i in cluster {
                if i >= n {
                    return Err(MsmError::BadClusterSpec(format!(
                        "cluster index {i} out of range for {n} particles"
                    )));
                }
                covered[i] = true;
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(MsmError::UncoveredParticle(i));
        }
        Ok(Self {
            positions,
            masses,
            clusters,
            fixed,
        })
    }

    /// Uniform-mass surface sampled on a regular `nx` x `ny` lattice with
    /// row-major heights. Edge particles are pinned to the ground.
    pub fn from_heightmap(
        origin: [f64; 2],
        spacing: f64,
        nx: usize,
        ny: usize,
        heights: &[f64],
        cluster_size: usize,
        stride: usize,
    ) -> Result<Self> {
        if nx == 0 || ny == 0 || heights.len() != nx * ny {
            return Err(MsmError::InvalidShape(format!(
                "{} heights for a {nx}x{ny} lattice",
                heights.len()
            )));
        }
        let positions = (0..ny)
            .flat_map(|iy| (0..nx).map(move |ix| (ix, iy)))
            .map(|(ix, iy)| {
                Point3::new(
                    origin[0] + ix as f64 * spacing,
                    origin[1] + iy as f64 * spacing,
                    heights[iy * nx + ix],
                )
            })
            .collect();
        let fixed = (0..ny)
            .flat_map(|iy| (0..nx).map(move |ix| ix == 0 || iy == 0 || ix + 1 == nx || iy + 1 == ny))
            .collect();
        let clusters = make_clusters((nx, ny), cluster_size, stride)?;
        Self::new(positions, vec![1.0; nx * ny], clusters, fixed)
    }

    /// Flat lattice at constant height.
    pub fn flat_grid(
        origin: [f64; 2],
        spacing: f64,
        nx: usize,
        ny: usize,
        height: f64,
        cluster_size: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::from_heightmap(origin, spacing, nx, ny, &vec![height; nx * ny], cluster_size, stride)
    }

    /// Same particles with every particle in one cluster.
    pub fn single_cluster(&self) -> Self {
        Self {
            clusters: vec![(0..self.len()).collect()],
            ..self.clone()
        }
    }

    pub fn with_clusters(&self, clusters: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(
            self.positions.clone(),
            self.masses.clone(),
            clusters,
            self.fixed.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn fixed_mask(&self) -> &[bool] {
        &self.fixed
    }
}

/// Current (intermediate) positions and the goals they are pulled towards.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformState {
    pub positions: Vec<Point3<f64>>,
    pub goals: Vec<Point3<f64>>,
}

impl DeformState {
    pub fn new(positions: Vec<Point3<f64>>) -> Self {
        let goals = positions.clone();
        Self { positions, goals }
    }

    pub fn at_rest(shape: &RestShape) -> Self {
        Self::new(shape.positions.clone())
    }
}

/// Optimal transforms of one body.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTransform {
    pub rotation: Matrix3<f64>,
    pub linear: Matrix3<f64>,
    pub quadratic: Matrix3x9,
    pub rest_center: Point3<f64>,
    pub center: Point3<f64>,
}

/// Prescribed position for one particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constraint {
    pub index: usize,
    pub position: Point3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    /// Fraction of the way each particle moves towards its goal per iteration.
    pub alpha: f64,
    /// Convergence threshold on the largest per-iteration displacement (m).
    pub eps: f64,
    pub max_iters: usize,
    pub mode: DeformMode,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            eps: 1e-6,
            max_iters: 2000,
            mode: DeformMode::Quadratic,
        }
    }
}

/// Equilibrium reached by [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub positions: Vec<Point3<f64>>,
    pub iterations: usize,
    pub last_step: f64,
    pub converged: bool,
}

impl Relaxation {
    /// Turn a non-converged relaxation into [`MsmError::NoConvergence`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(MsmError::NoConvergence {
                iterations: self.iterations,
                last_step: self.last_step,
            })
        }
    }
}

/// Quadratic basis `[x, y, z, x², y², z², xy, yz, zx]`.
pub fn quadratic_basis(s: &Vector3<f64>) -> Vector9 {
    Vector9::from_column_slice(&[
        s.x,
        s.y,
        s.z,
        s.x * s.x,
        s.y * s.y,
        s.z * s.z,
        s.x * s.y,
        s.y * s.z,
        s.z * s.x,
    ])
}

fn check_state(shape: &RestShape, state: &DeformState) -> Result<()> {
    if state.positions.len() != shape.len() {
        return Err(MsmError::InvalidShape(format!(
            "state has {} positions, shape has {}",
            state.positions.len(),
            shape.len()
        )));
    }
    Ok(())
}

/// Mass-weighted centers of the rest and current configurations.
pub fn optimal_translations(
    shape: &RestShape,
    state: &DeformState,
) -> Result<(Point3<f64>, Point3<f64>)> {
    check_state(shape, state)?;
    let total: f64 = shape.masses.iter().sum();
    if !(total > 0.0) {
        return Err(MsmError::ZeroMass);
    }
    let weighted = |pts: &[Point3<f64>]| {
        let sum = pts
            .iter()
            .zip(&shape.masses)
            .fold(Vector3::zeros(), |acc, (p, m)| acc + p.coords * *m);
        Point3::from(sum / total)
    };
    Ok((weighted(&shape.positions), weighted(&state.positions)))
}

/// Truncated inverse of a symmetric moment matrix.
///
/// Coordinates are rescaled by `scale` before the eigen-decomposition so the
/// cutoff compares like with like. Returns the pseudo-inverse and the
/// projector onto the dropped directions (zero for well-conditioned input).
fn moment_inverse<const D: usize>(
    m: SMatrix<f64, D, D>,
    scale: SVector<f64, D>,
) -> Result<(SMatrix<f64, D, D>, SMatrix<f64, D, D>)>
where
    nalgebra::Const<D>: nalgebra::DimSub<nalgebra::U1>,
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<nalgebra::Const<D>>
        + nalgebra::allocator::Allocator<<nalgebra::Const<D> as nalgebra::DimSub<nalgebra::U1>>::Output>,
{
    if !m.iter().all(|v| v.is_finite()) || !scale.iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(MsmError::DegenerateShape);
    }
    let d = SMatrix::<f64, D, D>::from_diagonal(&scale);
    let eig = (d * m * d).symmetric_eigen();
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return Err(MsmError::DegenerateShape);
    }
    let mut inv = SMatrix::<f64, D, D>::zeros();
    let mut kept = SMatrix::<f64, D, D>::zeros();
    for k in 0..D {
        let e = eig.eigenvalues[k];
        if e >= DEGENERATE_RATIO * top {
            let v = eig.eigenvectors.column(k);
            let vv = v * v.transpose();
            inv += vv / e;
            kept += vv;
        }
    }
    let d_inv = SMatrix::<f64, D, D>::from_diagonal(&scale.map(|v| 1.0 / v));
    let dropped = SMatrix::<f64, D, D>::identity() - d_inv * kept * d;
    Ok((d * inv * d, dropped))
}

fn linear_scale(a_s: &Matrix3<f64>, total_mass: f64) -> Vector3<f64> {
    Vector3::repeat((total_mass / a_s.trace()).sqrt())
}

// Cross terms carry √2 so that rotations act orthogonally on the scaled
// basis and the truncation does not depend on orientation.
fn quadratic_scale(a_s: &Matrix3<f64>, total_mass: f64) -> Vector9 {
    let k = (total_mass / a_s.trace()).sqrt();
    Vector9::from_fn(|i, _| match i {
        0..3 => k,
        3..6 => k * k,
        _ => k * k * std::f64::consts::SQRT_2,
    })
}

/// Optimal linear transform `A = A_r A_s⁻¹` and its rotational moment `A_r`.
pub fn optimal_linear(
    shape: &RestShape,
    state: &DeformState,
) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    let (t0, t) = optimal_translations(shape, state)?;
    let mut a_r = Matrix3::zeros();
    let mut a_s = Matrix3::zeros();
    for ((p0, p), m) in shape.positions.iter().zip(&state.positions).zip(&shape.masses) {
        let s = p0 - t0;
        let r = p - t;
        a_r += (r * s.transpose()) * *m;
        a_s += (s * s.transpose()) * *m;
    }
    let (inv, _) = moment_inverse(a_s, linear_scale(&a_s, shape.masses.iter().sum()))?;
    Ok((a_r * inv, a_r))
}

/// Rotational factor `R` of the polar decomposition `A_r = R S`.
///
/// Rank-2 input (flat clusters) is accepted: the missing axis is completed so
/// that `det(R) = +1`. Reflections are removed by flipping the axis with the
/// smallest singular value.
pub fn polar_rotation(a_r: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !a_r.iter().all(|v| v.is_finite()) {
        return Err(MsmError::SingularMatrix);
    }
    let svd = a_r.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(MsmError::SingularMatrix),
    };
    let sv = svd.singular_values;
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]));
    let [lo, mid, hi] = order;
    if !(sv[hi] > 0.0) || sv[mid] <= SINGULAR_RATIO * sv[hi] {
        return Err(MsmError::SingularMatrix);
    }
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(lo).neg_mut();
        r = u * v_t;
    }
    Ok(r)
}

/// Optimal quadratic transform `Ā = (Σ m r s̄ᵀ)(Σ m s̄ s̄ᵀ)⁻¹`.
pub fn quadratic_transform(shape: &RestShape, state: &DeformState) -> Result<Matrix3x9> {
    let (t0, t) = optimal_translations(shape, state)?;
    let mut a_r = Matrix3x9::zeros();
    let mut a_qq = Matrix9::zeros();
    let mut a_s = Matrix3::zeros();
    for ((p0, p), m) in shape.positions.iter().zip(&state.positions).zip(&shape.masses) {
        let s = p0 - t0;
        let sb = quadratic_basis(&s);
        a_r += ((p - t) * sb.transpose()) * *m;
        a_qq += (sb * sb.transpose()) * *m;
        a_s += (s * s.transpose()) * *m;
    }
    let (inv, _) = moment_inverse(a_qq, quadratic_scale(&a_s, shape.masses.iter().sum()))?;
    Ok(a_r * inv)
}

/// All optimal transforms of the whole shape treated as one body.
pub fn shape_transform(shape: &RestShape, state: &DeformState) -> Result<ShapeTransform> {
    let (rest_center, center) = optimal_translations(shape, state)?;
    let (linear, a_r) = optimal_linear(shape, state)?;
    Ok(ShapeTransform {
        rotation: polar_rotation(&a_r)?,
        linear,
        quadratic: quadratic_transform(shape, state)?,
        rest_center,
        center,
    })
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(MsmError::InvalidBeta(beta))
    }
}

/// Goal positions of the whole shape treated as a single body.
pub fn goal_positions(
    shape: &RestShape,
    state: &DeformState,
    beta: f64,
    mode: DeformMode,
) -> Result<Vec<Point3<f64>>> {
    check_beta(beta)?;
    check_state(shape, state)?;
    let all: Vec<usize> = (0..shape.len()).collect();
    let frame = ClusterFrame::new(&shape.positions, &shape.masses, &all)?;
    let mut goals = vec![Vector3::zeros(); shape.len()];
    frame.goals(&state.positions, beta, mode, |k, g| goals[k] = g)?;
    Ok(goals.into_iter().map(Point3::from).collect())
}

/// Overlapping square clusters on a row-major `nx` x `ny` lattice.
///
/// Cluster origins advance by `stride`; a final cluster is aligned with the
/// far edge whenever the stride would leave particles uncovered. Clusters are
/// clipped to the lattice when it is smaller than `cluster_size`.
pub fn make_clusters(
    grid_dims: (usize, usize),
    cluster_size: usize,
    stride: usize,
) -> Result<Vec<Vec<usize>>> {
    let (nx, ny) = grid_dims;
    if cluster_size < 2 {
        return Err(MsmError::BadClusterSpec(format!(
            "cluster size must be at least 2, got {cluster_size}"
        )));
    }
    if stride < 1 || stride >= cluster_size {
        return Err(MsmError::BadClusterSpec(format!(
            "stride must satisfy 1 <= stride < cluster size ({cluster_size}), got {stride}"
        )));
    }
    if nx == 0 || ny == 0 {
        return Err(MsmError::BadClusterSpec("empty lattice".into()));
    }
    let starts = |n: usize| -> Vec<usize> {
        if n <= cluster_size {
            return vec![0];
        }
        let last = n - cluster_size;
        let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
        if *v.last().unwrap() != last {
            v.push(last);
        }
        v
    };
    let (wx, wy) = (cluster_size.min(nx), cluster_size.min(ny));
    let mut clusters = Vec::new();
    for &y0 in &starts(ny) {
        for &x0 in &starts(nx) {
            clusters.push(
                (y0..y0 + wy)
                    .flat_map(|iy| (x0..x0 + wx).map(move |ix| iy * nx + ix))
                    .collect(),
            );
        }
    }
    Ok(clusters)
}

/// Accumulates per-cluster goals and averages them per particle.
#[derive(Debug, Clone)]
pub struct GoalBlender {
    sums: Vec<Vector3<f64>>,
    counts: Vec<u32>,
}

impl GoalBlender {
    pub fn new(n_particles: usize) -> Self {
        Self {
            sums: vec![Vector3::zeros(); n_particles],
            counts: vec![0; n_particles],
        }
    }

    pub fn reset(&mut self) {
        self.sums.iter_mut().for_each(|s| *s = Vector3::zeros());
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    #[inline]
    pub fn add(&mut self, particle: usize, goal: Vector3<f64>) {
        self.sums[particle] += goal;
        self.counts[particle] += 1;
    }

    /// Per-particle average; fails if some particle received no goal.
    pub fn blended(&self) -> Result<Vec<Point3<f64>>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(i, (s, &c))| {
                if c == 0 {
                    Err(MsmError::UncoveredParticle(i))
                } else {
                    Ok(Point3::from(s / c as f64))
                }
            })
            .collect()
    }

    #[inline]
    fn goal(&self, i: usize) -> Vector3<f64> {
        self.sums[i] / self.counts[i] as f64
    }
}

/// Average the goals proposed by every cluster a particle belongs to.
pub fn blend_clusters(
    n_particles: usize,
    per_cluster_goals: &[(Vec<usize>, Vec<Point3<f64>>)],
) -> Result<Vec<Point3<f64>>> {
    let mut blender = GoalBlender::new(n_particles);
    for (cluster, goals) in per_cluster_goals {
        if cluster.len() != goals.len() {
            return Err(MsmError::BadClusterSpec(format!(
                "cluster of {} particles with {} goals",
                cluster.len(),
                goals.len()
            )));
        }
        for (&i, g) in cluster.iter().zip(goals) {
            if i >= n_particles {
                return Err(MsmError::BadClusterSpec(format!("index {i} out of range")));
            }
            blender.add(i, g.coords);
        }
    }
    blender.blended()
}

/// Rest-state quantities of one cluster that stay fixed during relaxation.
#[derive(Debug, Clone)]
struct ClusterFrame {
    indices: Vec<usize>,
    masses: Vec<f64>,
    total_mass: f64,
    s: Vec<Vector3<f64>>,
    s_bar: Vec<Vector9>,
    /// Pseudo-inverse of the linear moment matrix and its dropped subspace.
    linear: Option<(Matrix3<f64>, Matrix3<f64>)>,
    quadratic: Option<(Matrix9, Matrix9)>,
}

impl ClusterFrame {
    fn new(rest: &[Point3<f64>], masses: &[f64], indices: &[usize]) -> Result<Self> {
        let cm: Vec<f64> = indices.iter().map(|&i| masses[i]).collect();
        let total_mass: f64 = cm.iter().sum();
        if !(total_mass > 0.0) {
            return Err(MsmError::ZeroMass);
        }
        let com = indices
            .iter()
            .zip(&cm)
            .fold(Vector3::zeros(), |acc, (&i, m)| acc + rest[i].coords * *m)
            / total_mass;
        let s: Vec<Vector3<f64>> = indices.iter().map(|&i| rest[i].coords - com).collect();
        let s_bar: Vec<Vector9> = s.iter().map(quadratic_basis).collect();
        let mut a_s = Matrix3::zeros();
        let mut a_qq = Matrix9::zeros();
        for ((si, sb), m) in s.iter().zip(&s_bar).zip(&cm) {
            a_s += (si * si.transpose()) * *m;
            a_qq += (sb * sb.transpose()) * *m;
        }
        Ok(Self {
            indices: indices.to_vec(),
            masses: cm,
            total_mass,
            s,
            s_bar,
            linear: moment_inverse(a_s, linear_scale(&a_s, total_mass)).ok(),
            quadratic: moment_inverse(a_qq, quadratic_scale(&a_s, total_mass)).ok(),
        })
    }

    /// Emits `(local index, goal)` for every cluster member.
    fn goals(
        &self,
        positions: &[Point3<f64>],
        beta: f64,
        mode: DeformMode,
        mut emit: impl FnMut(usize, Vector3<f64>),
    ) -> Result<()> {
        let t = self
            .indices
            .iter()
            .zip(&self.masses)
            .fold(Vector3::zeros(), |acc, (&i, m)| acc + positions[i].coords * *m)
            / self.total_mass;
        let mut a_r = Matrix3::zeros();
        for ((&i, si), m) in self.indices.iter().zip(&self.s).zip(&self.masses) {
            a_r += ((positions[i].coords - t) * *m) * si.transpose();
        }
        let rotation = polar_rotation(&a_r)?;
        match mode {
            DeformMode::Rigid => {
                for (k, si) in self.s.iter().enumerate() {
                    emit(k, rotation * si + t);
                }
            }
            DeformMode::Linear => {
                // Dropped directions follow the rotation, so a noisy flat
                // rest shape is still an exact equilibrium.
                let (inv, dropped) = self.linear.ok_or(MsmError::DegenerateShape)?;
                let a = a_r * inv + rotation * dropped;
                let blend = rotation * (1.0 - beta) + a * beta;
                for (k, si) in self.s.iter().enumerate() {
                    emit(k, blend * si + t);
                }
            }
            DeformMode::Quadratic => {
                let (inv, dropped) = self.quadratic.ok_or(MsmError::DegenerateShape)?;
                let mut a_r9 = Matrix3x9::zeros();
                for ((&i, sb), m) in self.indices.iter().zip(&self.s_bar).zip(&self.masses) {
                    a_r9 += ((positions[i].coords - t) * *m) * sb.transpose();
                }
                let mut rigid = Matrix3x9::zeros();
                rigid.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
                let mut blend = (a_r9 * inv + rigid * dropped) * beta;
                blend
                    .fixed_view_mut::<3, 3>(0, 0)
                    .zip_apply(&rotation, |b, r| *b += (1.0 - beta) * r);
                for (k, sb) in self.s_bar.iter().enumerate() {
                    emit(k, blend * sb + t);
                }
            }
        }
        Ok(())
    }
}

/// Shape-matching relaxation solver with per-cluster rest data precomputed.
///
/// Build once per rest shape and reuse it for every `beta`.
#[derive(Debug, Clone)]
pub struct MsmSolver {
    rest: Vec<Point3<f64>>,
    fixed: Vec<bool>,
    frames: Vec<ClusterFrame>,
}

impl MsmSolver {
    pub fn new(shape: &RestShape) -> Result<Self> {
        let frames = shape
            .clusters
            .iter()
            .map(|c| ClusterFrame::new(&shape.positions, &shape.masses, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rest: shape.positions.clone(),
            fixed: shape.fixed.clone(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.rest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }

    /// Blended cluster goals for the given positions.
    pub fn goals(
        &self,
        positions: &[Point3<f64>],
        beta: f64,
        mode: DeformMode,
    ) -> Result<Vec<Point3<f64>>> {
        check_beta(beta)?;
        let mut blender = GoalBlender::new(self.len());
        self.accumulate(positions, beta, mode, &mut blender)?;
        blender.blended()
    }

    fn accumulate(
        &self,
        positions: &[Point3<f64>],
        beta: f64,
        mode: DeformMode,
        blender: &mut GoalBlender,
    ) -> Result<()> {
        blender.reset();
        for frame in &self.frames {
            let idx = &frame.indices;
            frame.goals(positions, beta, mode, |k, g| blender.add(idx[k], g))?;
        }
        Ok(())
    }

    /// Pin mask and positions: boundary particles at rest, constraints at
    /// their prescribed positions.
    fn pinned(&self, constraints: &[Constraint]) -> Result<(Vec<bool>, Vec<Point3<f64>>)> {
        let mut pinned = self.fixed.clone();
        let mut start = self.rest.clone();
        for c in constraints {
            if c.index >= self.len() {
                return Err(MsmError::ConstraintOutOfRange {
                    index: c.index,
                    len: self.len(),
                });
            }
            pinned[c.index] = true;
            start[c.index] = c.position;
        }
        Ok((pinned, start))
    }

    /// Relax from the rest shape with constrained particles displaced.
    pub fn relax(
        &self,
        constraints: &[Constraint],
        beta: f64,
        params: &SolverParams,
    ) -> Result<Relaxation> {
        self.relax_from(None, constraints, beta, params)
    }

    /// Relax starting from `initial` (warm start) or from the rest shape.
    pub fn relax_from(
        &self,
        initial: Option<&[Point3<f64>]>,
        constraints: &[Constraint],
        beta: f64,
        params: &SolverParams,
    ) -> Result<Relaxation> {
        check_beta(beta)?;
        let (pinned, mut positions) = self.pinned(constraints)?;
        if let Some(init) = initial {
            if init.len() != self.len() {
                return Err(MsmError::InvalidShape("warm start has wrong length".into()));
            }
            for (i, p) in init.iter().enumerate() {
                if !pinned[i] {
                    positions[i] = *p;
                }
            }
        }
        let mut blender = GoalBlender::new(self.len());
        let mut last_step = f64::INFINITY;
        for iteration in 1..=params.max_iters {
            self.accumulate(&positions, beta, params.mode, &mut blender)?;
            let mut max_step: f64 = 0.0;
            for (i, p) in positions.iter_mut().enumerate() {
                if pinned[i] {
                    continue;
                }
                let step = (blender.goal(i) - p.coords) * params.alpha;
                p.coords += step;
                max_step = max_step.max(step.norm());
            }
            last_step = max_step;
            if max_step < params.eps {
                return Ok(Relaxation {
                    positions,
                    iterations: iteration,
                    last_step,
                    converged: true,
                });
            }
        }
        Ok(Relaxation {
            positions,
            iterations: params.max_iters,
            last_step,
            converged: false,
        })
    }
}

/// Equilibrium of `shape` under `constraints` for deformability `beta`.
pub fn simulate(
    shape: &RestShape,
    constraints: &[Constraint],
    beta: f64,
    params: &SolverParams,
) -> Result<Relaxation> {
    MsmSolver::new(shape)?.relax(constraints, beta, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.0..3.0);
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
    }

    /// Non-planar blob of particles in a single cluster.
    fn blob(rng: &mut ChaCha8Rng, n: usize) -> RestShape {
        let pts: Vec<Point3<f64>> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                )
            })
            .collect();
        RestShape::new(pts, vec![1.0; n], vec![(0..n).collect()], vec![false; n]).unwrap()
    }

    fn transformed(shape: &RestShape, m: &Matrix3<f64>, shift: Vector3<f64>) -> DeformState {
        let (t0, _) = optimal_translations(shape, &DeformState::at_rest(shape)).unwrap();
        DeformState::new(
            shape
                .positions()
                .iter()
                .map(|p| t0 + m * (p - t0) + shift)
                .collect(),
        )
    }

    fn max_dist(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
        a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn translations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = blob(&mut rng, 10);
        let rest = DeformState::at_rest(&shape);
        let (t0, t) = optimal_translations(&shape, &rest).unwrap();
        assert_eq!(t0, t);
        let centroid = shape.positions().iter().fold(Vector3::zeros(), |a, p| a + p.coords) / 10.0;
        assert!((t0.coords - centroid).norm() < 1e-15);

        let down = DeformState::new(
            shape
                .positions()
                .iter()
                .map(|p| p + Vector3::new(0.0, 0.0, -0.01))
                .collect(),
        );
        let (t0, t) = optimal_translations(&shape, &down).unwrap();
        assert!((t - t0 - Vector3::new(0.0, 0.0, -0.01)).norm() < 1e-15);

        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.5, -1.0),
            Point3::new(-2.0, 3.0, 0.25),
        ];
        let shape = RestShape::new(pts.clone(), vec![1.0, 2.0, 3.0], vec![vec![0, 1, 2]], vec![false; 3])
            .unwrap();
        let (t0, _) = optimal_translations(&shape, &DeformState::new(pts)).unwrap();
        // (0 + 2*1 + 3*-2) / 6, (0 + 1 + 9) / 6, (0 - 2 + 0.75) / 6
        assert!((t0 - Point3::new(-4.0 / 6.0, 10.0 / 6.0, -1.25 / 6.0)).norm() < 1e-15);
    }

    #[test]
    fn linear_fit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = blob(&mut rng, 20);
        let (a, _) = optimal_linear(&shape, &DeformState::at_rest(&shape)).unwrap();
        assert!((a - Matrix3::identity()).norm() < 1e-10);

        let r0 = random_rotation(&mut rng);
        let (a, _) = optimal_linear(&shape, &transformed(&shape, &r0, Vector3::zeros())).unwrap();
        assert!((a - r0).norm() < 1e-8);

        let m = Matrix3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0));
        let (a, _) = optimal_linear(&shape, &transformed(&shape, &m, Vector3::new(0.1, 0.0, 0.0))).unwrap();
        assert!((a - m).norm() < 1e-8);
    }

    #[test]
    fn polar_examples() {
        assert!((polar_rotation(&Matrix3::identity()).unwrap() - Matrix3::identity()).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r0 = random_rotation(&mut rng);
            let a = r0 * Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 4.0));
            assert!((polar_rotation(&a).unwrap() - r0).norm() < 1e-9);
            assert!((polar_rotation(&(r0 * 5.0)).unwrap() - r0).norm() < 1e-9);
        }
    }

    #[test]
    fn polar_handles_reflection_and_rank_deficiency() {
        let reflect = Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, -1.0));
        let r = polar_rotation(&reflect).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r - Matrix3::identity()).norm() < 1e-12);

        // flat (rank 2) moment: the third axis is completed
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r0 = random_rotation(&mut rng);
        let flat = r0 * Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 0.0));
        assert!((polar_rotation(&flat).unwrap() - r0).norm() < 1e-9);

        let rank1 = Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(polar_rotation(&rank1).unwrap_err(), MsmError::SingularMatrix);
        assert_eq!(polar_rotation(&Matrix3::zeros()).unwrap_err(), MsmError::SingularMatrix);
    }

    #[test]
    fn quadratic_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = blob(&mut rng, 40);
        let q = quadratic_transform(&shape, &DeformState::at_rest(&shape)).unwrap();
        let mut expect = Matrix3x9::zeros();
        expect.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        assert!((q - expect).norm() < 1e-8);

        let m = Matrix3::new(1.1, 0.2, 0.0, -0.1, 0.9, 0.05, 0.0, 0.3, 1.0);
        let state = transformed(&shape, &m, Vector3::new(0.0, 0.02, 0.0));
        let q = quadratic_transform(&shape, &state).unwrap();
        let (a, _) = optimal_linear(&shape, &state).unwrap();
        assert!((q.fixed_view::<3, 3>(0, 0) - a).norm() < 1e-7);
        assert!(q.fixed_view::<3, 6>(0, 3).norm() < 1e-6);
    }

    #[test]
    fn quadratic_fits_bend_better_than_linear() {
        let flat = RestShape::flat_grid([-0.04, -0.04], 0.01, 9, 9, 0.0, 9, 1).unwrap();
        let c = 5.0;
        let state = DeformState::new(
            flat.positions()
                .iter()
                .map(|p| Point3::new(p.x, p.y, p.z + c * p.x * p.x))
                .collect(),
        );
        let (t0, t) = optimal_translations(&flat, &state).unwrap();
        let (a, _) = optimal_linear(&flat, &state).unwrap();
        let q = quadratic_transform(&flat, &state).unwrap();
        let (mut lin_err, mut quad_err) = (0.0, 0.0);
        for (p0, p) in flat.positions().iter().zip(&state.positions) {
            let s = p0 - t0;
            let r = p - t;
            lin_err += (a * s - r).norm();
            quad_err += (q * quadratic_basis(&s) - r).norm();
        }
        assert!(quad_err < lin_err, "{quad_err} vs {lin_err}");
    }

    #[test]
    fn goal_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = blob(&mut rng, 15);
        let r0 = random_rotation(&mut rng);
        let stretch = r0 * Matrix3::from_diagonal(&Vector3::new(1.3, 0.8, 1.1));
        let state = transformed(&shape, &stretch, Vector3::new(0.01, 0.0, -0.02));

        let rigid = goal_positions(&shape, &state, 0.0, DeformMode::Rigid).unwrap();
        for mode in [DeformMode::Linear, DeformMode::Quadratic] {
            let g = goal_positions(&shape, &state, 0.0, mode).unwrap();
            assert!(max_dist(&g, &rigid) < 1e-12);
        }
        let rest = goal_positions(&shape, &DeformState::at_rest(&shape), 0.0, DeformMode::Quadratic).unwrap();
        assert!(max_dist(&rest, shape.positions()) < 1e-12);

        // beta = 0.5 lands halfway between the rigid and linear images
        let tr = shape_transform(&shape, &state).unwrap();
        let half = goal_positions(&shape, &state, 0.5, DeformMode::Linear).unwrap();
        for (i, p0) in shape.positions().iter().enumerate() {
            let s = p0 - tr.rest_center;
            let lin = tr.linear * s + tr.center.coords;
            let mid = (rigid[i].coords + lin) * 0.5;
            assert!((half[i].coords - mid).norm() < 1e-12);
        }

        assert_eq!(
            goal_positions(&shape, &state, 1.0, DeformMode::Linear).unwrap_err(),
            MsmError::InvalidBeta(1.0)
        );
    }

    #[test]
    fn cluster_tilings() {
        assert_eq!(make_clusters((3, 3), 3, 1).unwrap().len(), 1);

        let c = make_clusters((4, 4), 3, 1).unwrap();
        assert_eq!(c.len(), 4);
        let mut count = [0; 16];
        c.iter().flatten().for_each(|&i| count[i] += 1);
        for i in [5, 6, 9, 10] {
            assert_eq!(count[i], 4);
        }
        assert_eq!(count[0], 1);

        let c = make_clusters((5, 5), 3, 2).unwrap();
        assert_eq!(c.len(), 4);
        let covered: std::collections::BTreeSet<usize> = c.iter().flatten().copied().collect();
        assert_eq!(covered.len(), 25);

        // stride that does not divide the span still reaches the far edge
        let c = make_clusters((6, 4), 3, 2).unwrap();
        let covered: std::collections::BTreeSet<usize> = c.iter().flatten().copied().collect();
        assert_eq!(covered.len(), 24);

        for (size, stride) in [(1, 1), (3, 0), (3, 3), (3, 4)] {
            assert!(matches!(
                make_clusters((5, 5), size, stride),
                Err(MsmError::BadClusterSpec(_))
            ));
        }
    }

    #[test]
    fn blending() {
        let g: Vec<Point3<f64>> = (0..4).map(|i| Point3::new(i as f64, 0.0, 1.0)).collect();
        assert_eq!(blend_clusters(4, &[(vec![0, 1, 2, 3], g.clone())]).unwrap(), g);

        let a = Point3::new(1.0, 2.0, 3.0);
        let b = Point3::new(3.0, 0.0, -1.0);
        let out = blend_clusters(1, &[(vec![0], vec![a]), (vec![0], vec![b])]).unwrap();
        assert_eq!(out[0], Point3::new(2.0, 1.0, 1.0));

        assert_eq!(
            blend_clusters(3, &[(vec![0, 1], vec![a, b])]).unwrap_err(),
            MsmError::UncoveredParticle(2)
        );
    }

    #[test]
    fn blending_matches_per_particle_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clusters = make_clusters((4, 4), 3, 1).unwrap();
        let per: Vec<(Vec<usize>, Vec<Point3<f64>>)> = clusters
            .iter()
            .map(|c| {
                let goals = c
                    .iter()
                    .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
                    .collect();
                (c.clone(), goals)
            })
            .collect();
        let out = blend_clusters(16, &per).unwrap();
        for i in 0..16 {
            let hits: Vec<Point3<f64>> = per
                .iter()
                .flat_map(|(c, g)| c.iter().zip(g).filter(|(j, _)| **j == i).map(|(_, p)| *p))
                .collect();
            let avg = hits.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / hits.len() as f64;
            assert_eq!(out[i].coords, avg);
        }
    }

    #[test]
    fn rest_shape_validation() {
        let p = vec![Point3::origin(); 3];
        assert!(matches!(
            RestShape::new(p.clone(), vec![1.0; 2], vec![vec![0, 1, 2]], vec![false; 3]),
            Err(MsmError::InvalidShape(_))
        ));
        assert!(matches!(
            RestShape::new(p.clone(), vec![1.0; 3], vec![vec![0, 1]], vec![false; 3]),
            Err(MsmError::UncoveredParticle(2))
        ));
        assert!(matches!(
            RestShape::new(p.clone(), vec![1.0; 3], vec![vec![], vec![0, 1, 2]], vec![false; 3]),
            Err(MsmError::BadClusterSpec(_))
        ));
        assert!(matches!(
            RestShape::new(p, vec![1.0, 0.0, 1.0], vec![vec![0, 1, 2]], vec![false; 3]),
            Err(MsmError::InvalidShape(_))
        ));
        let g = RestShape::flat_grid([0.0, 0.0], 0.01, 4, 3, 0.0, 3, 1).unwrap();
        let pinned = g.fixed_mask().iter().filter(|f| **f).count();
        assert_eq!(pinned, 10);
    }

    fn center_press(shape: &RestShape, nx: usize, ny: usize, depth: f64) -> Vec<Constraint> {
        let i = (ny / 2) * nx + nx / 2;
        let p = shape.positions()[i];
        vec![Constraint {
            index: i,
            position: Point3::new(p.x, p.y, p.z - depth),
        }]
    }

    #[test]
    fn rest_is_equilibrium() {
        let shape = RestShape::flat_grid([0.0, 0.0], 0.01, 7, 7, 0.05, 3, 1).unwrap();
        for beta in [0.0, 0.5, 0.9] {
            let r = simulate(&shape, &[], beta, &SolverParams::default()).unwrap();
            assert!(r.converged);
            assert_eq!(r.iterations, 1);
            assert!(max_dist(&r.positions, shape.positions()) < 1e-12, "{beta}");
        }
    }

    #[test]
    fn rest_height_noise_does_not_change_the_press() {
        let (n, depth) = (13, 0.015);
        let flat = RestShape::flat_grid([0.0, 0.0], 0.01, n, n, 0.05, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bumpy: Vec<Point3<f64>> = flat
            .positions()
            .iter()
            .map(|p| Point3::new(p.x, p.y, p.z + rng.random_range(-5e-4..5e-4)))
            .collect();
        let noisy = RestShape::new(bumpy, flat.masses().to_vec(), flat.clusters().to_vec(), flat.fixed_mask().to_vec()).unwrap();
        for mode in [DeformMode::Linear, DeformMode::Quadratic] {
            let params = SolverParams {
                mode,
                max_iters: 20_000,
                ..Default::default()
            };
            let at_rest = simulate(&noisy, &[], 0.6, &params).unwrap();
            assert!(max_dist(&at_rest.positions, noisy.positions()) < 1e-12);
            let a = simulate(&flat, &center_press(&flat, n, n, depth), 0.6, &params).unwrap();
            let b = simulate(&noisy, &center_press(&noisy, n, n, depth), 0.6, &params).unwrap();
            assert!(a.converged && b.converged);
            // the press displacement field is what matters, not the bumps
            let worst = (0..flat.len())
                .map(|i| ((a.positions[i] - flat.positions()[i]) - (b.positions[i] - noisy.positions()[i])).norm())
                .fold(0.0, f64::max);
            assert!(worst < 1e-3, "{mode:?}: {worst}");
        }
    }

    #[test]
    fn rigid_single_cluster_press_matches_rigid_fit() {
        let grid = RestShape::flat_grid([0.0, 0.0], 0.01, 9, 9, 0.0, 3, 1).unwrap();
        let shape = grid.single_cluster();
        let cons = center_press(&shape, 9, 9, 0.01);
        let params = SolverParams {
            eps: 1e-9,
            max_iters: 20_000,
            ..Default::default()
        };
        let r = simulate(&shape, &cons, 0.0, &params).unwrap().require_converged().unwrap();
        let fit = goal_positions(&shape, &DeformState::new(r.positions.clone()), 0.0, DeformMode::Rigid)
            .unwrap();
        let free_dev = (0..shape.len())
            .filter(|&i| !shape.fixed_mask()[i] && i != cons[0].index)
            .map(|i| (r.positions[i] - fit[i]).norm())
            .fold(0.0, f64::max);
        assert!(free_dev < 1e-6, "{free_dev}");
    }

    fn distance_to(target: &[Point3<f64>], pts: &[Point3<f64>]) -> f64 {
        pts.iter()
            .map(|p| target.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / pts.len() as f64
    }

    #[test]
    fn soft_press_stays_closer_to_pressed_configuration() {
        let shape = RestShape::flat_grid([0.0, 0.0], 0.01, 11, 11, 0.0, 3, 1).unwrap();
        let cons = center_press(&shape, 11, 11, 0.02);
        let mut pressed = shape.positions().to_vec();
        pressed[cons[0].index] = cons[0].position;
        let params = SolverParams::default();
        let stiff = simulate(&shape, &cons, 0.1, &params).unwrap();
        let soft = simulate(&shape, &cons, 0.95, &params).unwrap();
        assert!(stiff.converged && soft.converged);
        assert!(distance_to(&pressed, &soft.positions) < distance_to(&pressed, &stiff.positions));
    }

    #[test]
    fn constraints_are_exact() {
        let shape = RestShape::flat_grid([0.0, 0.0], 0.01, 9, 9, 0.05, 3, 1).unwrap();
        let cons = vec![
            Constraint {
                index: 40,
                position: Point3::new(0.0401, 0.0399, 0.0312345),
            },
            Constraint {
                index: 30,
                position: Point3::new(0.03, 0.03, 0.045),
            },
        ];
        let r = simulate(&shape, &cons, 0.4, &SolverParams::default()).unwrap();
        for c in &cons {
            assert_eq!(r.positions[c.index], c.position);
        }
        for (i, p) in shape.positions().iter().enumerate() {
            if shape.fixed_mask()[i] {
                assert_eq!(r.positions[i], *p);
            }
        }
        let bad = [Constraint {
            index: 81,
            position: Point3::origin(),
        }];
        assert!(matches!(
            simulate(&shape, &bad, 0.4, &SolverParams::default()),
            Err(MsmError::ConstraintOutOfRange { index: 81, len: 81 })
        ));
    }

    #[test]
    fn small_clusters_localize_deformation() {
        let n = 11;
        let grid = RestShape::flat_grid([0.0, 0.0], 0.01, n, n, 0.0, 3, 1).unwrap();
        let global = grid.single_cluster();
        let cons = center_press(&grid, n, n, 0.015);
        let params = SolverParams {
            max_iters: 10_000,
            ..Default::default()
        };
        let local = simulate(&grid, &cons, 0.5, &params).unwrap();
        let wide = simulate(&global, &cons, 0.5, &params).unwrap();
        // a single global cluster barely bends, so compare how much of the
        // near-field displacement still reaches the corner
        let c = cons[0].index;
        let disp = |r: &Relaxation, i: usize| (r.positions[i] - grid.positions()[i]).norm();
        let corner = n + 1;
        let local_ratio = disp(&local, corner) / disp(&local, c + 1);
        let wide_ratio = disp(&wide, corner) / disp(&wide, c + 1);
        assert!(local_ratio < wide_ratio, "{local_ratio} vs {wide_ratio}");
    }

    #[test]
    fn non_convergence_is_reported() {
        let shape = RestShape::flat_grid([0.0, 0.0], 0.01, 9, 9, 0.0, 3, 1).unwrap();
        let cons = center_press(&shape, 9, 9, 0.01);
        let params = SolverParams {
            max_iters: 3,
            ..Default::default()
        };
        let r = simulate(&shape, &cons, 0.3, &params).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!(matches!(r.require_converged(), Err(MsmError::NoConvergence { iterations: 3, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn goals_are_rigid_motion_equivariant(seed in 0u64..1000, beta in 0.0f64..0.99, mode_ix in 0usize..3) {
            let mode = [DeformMode::Rigid, DeformMode::Linear, DeformMode::Quadratic][mode_ix];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = blob(&mut rng, 16);
            let deform = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-0.2..0.2));
            let state = transformed(&shape, &deform, Vector3::new(0.0, 0.01, 0.0));
            let goals = goal_positions(&shape, &state, beta, mode).unwrap();

            let q = random_rotation(&mut rng);
            let shift = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3);
            let moved_rest: Vec<Point3<f64>> = shape.positions().iter().map(|p| Point3::from(q * p.coords + shift)).collect();
            let moved_shape = RestShape::new(moved_rest, vec![1.0; 16], vec![(0..16).collect()], vec![false; 16]).unwrap();
            let moved_state = DeformState::new(state.positions.iter().map(|p| Point3::from(q * p.coords + shift)).collect());
            let moved_goals = goal_positions(&moved_shape, &moved_state, beta, mode).unwrap();
            for (g, mg) in goals.iter().zip(&moved_goals) {
                prop_assert!((Point3::from(q * g.coords + shift) - mg).norm() < 1e-8);
            }
        }

        #[test]
        fn rigid_goals_preserve_distances(seed in 0u64..1000, mode_ix in 0usize..3) {
            let mode = [DeformMode::Rigid, DeformMode::Linear, DeformMode::Quadratic][mode_ix];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = blob(&mut rng, 12);
            let state = DeformState::new(shape.positions().iter().map(|p| Point3::new(
                p.x + rng.random_range(-0.01..0.01),
                p.y * 1.2,
                p.z + rng.random_range(-0.01..0.01))).collect());
            let g = goal_positions(&shape, &state, 0.0, mode).unwrap();
            let rest = shape.positions();
            for i in 0..12 {
                for j in 0..i {
                    prop_assert!(((g[i] - g[j]).norm() - (rest[i] - rest[j]).norm()).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn polar_factor_is_a_rotation(entries in proptest::array::uniform9(-1.0f64..1.0)) {
            let a = Matrix3::from_row_slice(&entries);
            prop_assume!(a.determinant().abs() > 1e-6);
            let r = polar_rotation(&a).unwrap();
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-8);
            prop_assert!(r.determinant() > 0.0);
        }

        #[test]
        fn linear_goals_interpolate_between_limits(seed in 0u64..1000, beta in 0.0f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = blob(&mut rng, 10);
            let deform = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let state = transformed(&shape, &deform, Vector3::zeros());
            let tr = shape_transform(&shape, &state).unwrap();
            let g = goal_positions(&shape, &state, beta, DeformMode::Linear).unwrap();
            for (i, p0) in shape.positions().iter().enumerate() {
                let s = p0 - tr.rest_center;
                let expect = (tr.rotation * s) * (1.0 - beta) + (tr.linear * s) * beta + tr.center.coords;
                prop_assert!((g[i].coords - expect).norm() < 1e-10);
            }
        }
    }
}
