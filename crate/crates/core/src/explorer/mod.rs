//! Active exploration loop: model the surface, poke where the deformability
//! field is most uncertain, reconstruct the poked patch, estimate β there and
//! fold it back into the field until no cell is uncertain any more.

mod segment;

pub use segment::{classification_accuracy, count_regions};

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::{Point2, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{BetaSample, CandidateSet, EstimatorConfig, EstimatorError, ObservedShape};
use crate::gprf::{GprError, GprModel, GridSpec, Hyperparams, ScalarField, TrainingSet};
use crate::msm::{MsmError, RestShape};
use crate::world::{
    self, observe, press_constraints, statistical_outlier_filter, PointCloud, Rect, Scenario, WorldError,
    WorldState,
};

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("no point-cloud data inside the region of interest")]
    EmptyRoi,
    #[error("deformed region is empty")]
    EmptyRegion,
    #[error("invalid value for `{field}`: {reason}")]
    InvalidParams { field: String, reason: String },
    #[error("aborted after {count} consecutive non-converged interactions (last at interaction {index})")]
    Aborted { count: usize, index: usize },
    #[error(transparent)]
    Gpr(#[from] GprError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Solver(#[from] MsmError),
}

pub type Result<T, E = ExploreError> = std::result::Result<T, E>;

/// How the next poke is chosen among uncertain cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Random,
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorerParams {
    pub variance_threshold: f64,
    pub grid_spacing: f64,
    pub roi_half_width: f64,
    pub max_interactions: usize,
    pub seed: u64,
    pub selection: Selection,
    /// First poke; the workspace centre when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_target: Option<[f64; 2]>,
    /// Height change (m) above which a cell counts as deformed.
    pub deformation_threshold: f64,
    /// Spacing of the deformed cells kept as β training points.
    pub beta_train_spacing: f64,
    /// Particle spacing of the simulated patch.
    pub patch_spacing: f64,
    pub filter_k: usize,
    pub filter_std_ratio: f64,
    pub max_world_points: usize,
    /// Smallest mean difference between two classes for a split to count.
    pub region_contrast: f64,
    pub world_gpr: Hyperparams,
    pub touch_gpr: Hyperparams,
    pub beta_gpr: Hyperparams,
}

impl Default for ExplorerParams {
    fn default() -> Self {
        Self {
            variance_threshold: 0.06,
            grid_spacing: 0.005,
            roi_half_width: 0.06,
            max_interactions: 12,
            seed: 0,
            selection: Selection::Random,
            initial_target: None,
            deformation_threshold: 0.001,
            beta_train_spacing: 0.02,
            patch_spacing: 0.01,
            filter_k: 8,
            filter_std_ratio: 1.0,
            max_world_points: 2500,
            region_contrast: 0.15,
            world_gpr: Hyperparams::geometry(),
            touch_gpr: Hyperparams {
                sigma_w: 0.001,
                ..Hyperparams::geometry()
            },
            beta_gpr: Hyperparams {
                sigma_e: 0.25,
                sigma_w: 0.0125,
                sigma_n: 0.02,
            },
        }
    }
}

fn invalid(field: &str, reason: &str) -> ExploreError {
    ExploreError::InvalidParams {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ExplorerParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, "must be positive"))
            }
        };
        positive(self.variance_threshold, "explorer.variance_threshold")?;
        positive(self.grid_spacing, "explorer.grid_spacing")?;
        positive(self.roi_half_width, "explorer.roi_half_width")?;
        positive(self.beta_train_spacing, "explorer.beta_train_spacing")?;
        positive(self.patch_spacing, "explorer.patch_spacing")?;
        if !(self.deformation_threshold >= 0.0 && self.deformation_threshold.is_finite()) {
            return Err(invalid("explorer.deformation_threshold", "must be non-negative"));
        }
        if !(self.filter_std_ratio.is_finite()) {
            return Err(invalid("explorer.filter_std_ratio", "must be finite"));
        }
        if !(self.region_contrast >= 0.0 && self.region_contrast.is_finite()) {
            return Err(invalid("explorer.region_contrast", "must be non-negative"));
        }
        if self.max_interactions == 0 {
            return Err(invalid("explorer.max_interactions", "must be at least 1"));
        }
        if self.filter_k == 0 {
            return Err(invalid("explorer.filter_k", "must be at least 1"));
        }
        if self.max_world_points == 0 {
            return Err(invalid("explorer.max_world_points", "must be at least 1"));
        }
        for (name, h) in [
            ("explorer.world_gpr", &self.world_gpr),
            ("explorer.touch_gpr", &self.touch_gpr),
            ("explorer.beta_gpr", &self.beta_gpr),
        ] {
            h.validate().map_err(|e| invalid(name, &e.to_string()))?;
        }
        Ok(())
    }
}

/// Posterior deformability over the workspace grid.
#[derive(Debug, Clone)]
pub struct BetaField {
    pub mean: ScalarField,
    pub variance: ScalarField,
    hyper: Hyperparams,
    model: Option<GprModel>,
}

impl BetaField {
    /// Field before any observation: zero mean, prior variance everywhere.
    pub fn prior(spec: GridSpec, hyper: Hyperparams) -> Self {
        Self {
            mean: ScalarField::constant(spec, 0.0),
            variance: ScalarField::constant(spec, hyper.prior_variance()),
            hyper,
            model: None,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.mean.spec
    }

    pub fn model(&self) -> Option<&GprModel> {
        self.model.as_ref()
    }

    pub fn training(&self) -> Option<&TrainingSet> {
        self.model.as_ref().map(GprModel::training)
    }

    pub fn variance_at(&self, p: &Point2<f64>) -> f64 {
        match &self.model {
            Some(m) => m.predict_variance(&[*p])[0],
            None => self.hyper.prior_variance(),
        }
    }

    pub fn mean_at(&self, p: &Point2<f64>) -> f64 {
        match &self.model {
            Some(m) => m.predict_mean(&[*p])[0],
            None => 0.0,
        }
    }

    /// Mean clamped into `[0, 1)` for reporting; the model keeps raw values.
    pub fn clamped_mean(&self) -> ScalarField {
        self.mean.map(|v| v.clamp(0.0, 1.0 - 1e-9))
    }
}

/// One poke and everything learned from it.
#[derive(Debug, Clone)]
pub struct InteractionRecord {
    pub index: usize,
    pub target: [f64; 2],
    pub contact: Point3<f64>,
    /// Initial cloud cropped to the region of interest.
    pub pre_cloud: PointCloud,
    /// Filtered cloud seen during the press, cropped likewise.
    pub post_cloud: PointCloud,
    pub tactile: Vec<Point3<f64>>,
    pub sample: BetaSample,
    pub true_beta: f64,
    pub deformed_cells: usize,
    pub variance_at_selection: f64,
    pub variance_before: f64,
    pub variance_after: f64,
    pub max_variance_after: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// No cell above the variance threshold.
    Converged,
    /// Interaction budget used up.
    Budget,
}

#[derive(Debug, Clone)]
pub struct ExplorationResult {
    pub field: BetaField,
    pub records: Vec<InteractionRecord>,
    pub world_model: GprModel,
    pub world_cloud: PointCloud,
    pub termination: Termination,
    /// Wall-clock time per pipeline stage.
    pub timings: BTreeMap<String, Duration>,
}

/// Centroid of the points in each occupied `cell` x `cell` xy bucket, in
/// bucket order.
pub fn voxel_decimate(points: &[Point3<f64>], cell: f64) -> Vec<Point3<f64>> {
    let mut buckets: BTreeMap<(i64, i64), (Point3<f64>, usize)> = BTreeMap::new();
    for p in points {
        let key = ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
        let e = buckets.entry(key).or_insert((Point3::origin(), 0));
        e.0.coords += p.coords;
        e.1 += 1;
    }
    buckets.into_values().map(|(s, n)| Point3::from(s.coords / n as f64)).collect()
}

/// Height model of the observed surface, decimated to at most `max_points`
/// training points and centred on the mean height.
pub fn fit_world(cloud: &PointCloud, hyper: Hyperparams, max_points: usize) -> Result<GprModel> {
    if cloud.is_empty() {
        return Err(GprError::EmptyTraining.into());
    }
    let mut points = cloud.points.clone();
    if points.len() > max_points {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &points {
            lo = [lo[0].min(p.x), lo[1].min(p.y)];
            hi = [hi[0].max(p.x), hi[1].max(p.y)];
        }
        let area = ((hi[0] - lo[0]) * (hi[1] - lo[1])).max(1e-12);
        let mut cell = (area / max_points as f64).sqrt();
        loop {
            let d = voxel_decimate(&cloud.points, cell);
            if d.len() <= max_points {
                points = d;
                break;
            }
            cell *= 1.05;
        }
    }
    let inputs = points.iter().map(|p| p.xy()).collect();
    let targets = points.iter().map(|p| p.z).collect();
    Ok(GprModel::fit_centered(TrainingSet::new(inputs, targets)?, hyper)?)
}

/// A uniformly random cell above the variance threshold (or the most
/// uncertain one in argmax mode); `None` once every cell is below it.
pub fn select_roi(field: &BetaField, params: &ExplorerParams, rng: &mut impl Rng) -> Option<Point2<f64>> {
    let hot: Vec<usize> = field
        .variance
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > params.variance_threshold)
        .map(|(i, _)| i)
        .collect();
    if hot.is_empty() {
        return None;
    }
    let pick = match params.selection {
        Selection::Random => hot[rng.random_range(0..hot.len())],
        Selection::Argmax => {
            let v = &field.variance.values;
            hot.iter().copied().fold(hot[0], |b, i| if v[i] > v[b] { i } else { b })
        }
    };
    Some(field.spec().point_at(pick))
}

/// Square region of interest around `center`, clipped to `bounds`.
pub fn roi_rect(center: &Point2<f64>, half_width: f64, bounds: &Rect) -> Rect {
    Rect::new(
        (center.x - half_width).max(bounds.min[0]),
        (center.y - half_width).max(bounds.min[1]),
        (center.x + half_width).min(bounds.max[0]),
        (center.y + half_width).min(bounds.max[1]),
    )
}

/// Dense reconstruction of a poked patch.
#[derive(Debug, Clone)]
pub struct TouchReconstruction {
    pub observed: ObservedShape,
    pub heights: ScalarField,
}

/// Fit a height model on the cropped cloud plus the tactile contacts and
/// sample it on a dense grid over the region of interest, filling in the
/// part hidden by the probe.
pub fn reconstruct_touch(
    post_cloud: &PointCloud,
    tactile: &[Point3<f64>],
    roi_center: &Point2<f64>,
    bounds: &Rect,
    params: &ExplorerParams,
) -> Result<TouchReconstruction> {
    let rect = roi_rect(roi_center, params.roi_half_width, bounds);
    let crop = post_cloud.crop(&rect);
    if crop.is_empty() && tactile.is_empty() {
        return Err(ExploreError::EmptyRoi);
    }
    let pts: Vec<&Point3<f64>> = crop.points.iter().chain(tactile).collect();
    let training = TrainingSet::new(pts.iter().map(|p| p.xy()).collect(), pts.iter().map(|p| p.z).collect())?;
    let model = GprModel::fit_centered(training, params.touch_gpr)?;
    let spec = GridSpec::covering(rect.min, rect.max, params.grid_spacing)?;
    let heights = model.infer_mean_grid(&spec);
    let observed = ObservedShape::new(
        spec.points()
            .iter()
            .zip(&heights.values)
            .map(|(p, &z)| Point3::new(p.x, p.y, z))
            .collect(),
    )?;
    Ok(TouchReconstruction { observed, heights })
}

/// Add `(coord, beta_hat)` for every coordinate of the deformed region,
/// refit and re-infer the field. The prior mean is the first estimate and
/// stays fixed, so later pokes leave distant regions alone.
pub fn update_beta_field(field: &BetaField, sample: &BetaSample, deformed_region: &[Point2<f64>]) -> Result<BetaField> {
    if deformed_region.is_empty() {
        return Err(ExploreError::EmptyRegion);
    }
    let fresh = TrainingSet::new(deformed_region.to_vec(), vec![sample.beta_hat; deformed_region.len()])?;
    let training = match field.training() {
        Some(t) => t.extended(&fresh),
        None => fresh,
    };
    let prior_mean = field.model.as_ref().map_or(sample.beta_hat, |m| m.prior_mean());
    let model = GprModel::fit_with_mean(training, field.hyper, prior_mean)?;
    let (mean, variance) = model.infer_grid(field.spec());
    Ok(BetaField {
        mean,
        variance,
        hyper: field.hyper,
        model: Some(model),
    })
}

/// Cells of `post` that moved more than `threshold` from `pre`, thinned to
/// every `step`-th row and column of the grid.
fn deformed_cells(pre: &[f64], post: &ScalarField, threshold: f64, step: usize) -> Vec<Point2<f64>> {
    let spec = post.spec;
    let mut out = Vec::new();
    for r in (0..spec.ny).step_by(step) {
        for c in (0..spec.nx).step_by(step) {
            let i = r * spec.nx + c;
            if (post.values[i] - pre[i]).abs() > threshold {
                out.push(spec.point(r, c));
            }
        }
    }
    out
}

/// Lattice of simulated particles around the contact, resting on the
/// surface model and clipped to the workspace. Edges are pinned.
pub fn patch_shape(
    world_model: &GprModel,
    contact: &Point3<f64>,
    bounds: &Rect,
    params: &ExplorerParams,
    estimator: &EstimatorConfig,
) -> Result<RestShape> {
    let s = params.patch_spacing;
    let half = (params.roi_half_width / s).round() as i64;
    let steps = |c: f64, lo: f64, hi: f64| {
        let below = (((c - lo) / s + 1e-9).floor() as i64).min(half);
        let above = (((hi - c) / s + 1e-9).floor() as i64).min(half);
        (below, above)
    };
    let (bx, ax) = steps(contact.x, bounds.min[0], bounds.max[0]);
    let (by, ay) = steps(contact.y, bounds.min[1], bounds.max[1]);
    let (nx, ny) = ((bx + ax + 1) as usize, (by + ay + 1) as usize);
    let origin = [contact.x - bx as f64 * s, contact.y - by as f64 * s];
    let xy: Vec<Point2<f64>> = (0..ny)
        .flat_map(|r| (0..nx).map(move |c| (r, c)))
        .map(|(r, c)| Point2::new(origin[0] + c as f64 * s, origin[1] + r as f64 * s))
        .collect();
    let heights = world_model.predict_mean(&xy);
    Ok(RestShape::from_heightmap(
        origin,
        s,
        nx,
        ny,
        &heights,
        estimator.cluster_size,
        estimator.cluster_stride,
    )?)
}

fn elapsed(timings: &mut BTreeMap<String, Duration>, stage: &str, since: Instant) {
    *timings.entry(stage.to_string()).or_default() += since.elapsed();
}

/// Full exploration of a scenario.
pub fn run_exploration(
    scenario: &Scenario,
    params: &ExplorerParams,
    estimator: &EstimatorConfig,
) -> Result<ExplorationResult> {
    params.validate()?;
    let bounds = scenario.workspace;
    let mut timings = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    // one independent sensor stream per observation
    let mut frame = 0u64;
    let mut next_sensor_seed = || {
        frame += 1;
        params.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(frame)
    };

    let mut world = WorldState::new(scenario);
    let t = Instant::now();
    let raw = observe(&world, &scenario.sensor, next_sensor_seed());
    let world_cloud = statistical_outlier_filter(&raw, params.filter_k, params.filter_std_ratio)?;
    elapsed(&mut timings, "observe", t);
    let t = Instant::now();
    let world_model = fit_world(&world_cloud, params.world_gpr, params.max_world_points)?;
    elapsed(&mut timings, "world_model", t);

    let spec = GridSpec::covering(bounds.min, bounds.max, params.grid_spacing)?;
    let mut field = BetaField::prior(spec, params.beta_gpr);
    let initial = params.initial_target.unwrap_or(bounds.center());
    let mut target = Point2::new(initial[0], initial[1]);
    let mut variance_at_selection = field.variance_at(&target);
    let beta_grid = estimator.beta_grid();
    let thin = ((params.beta_train_spacing / params.grid_spacing).round() as usize).max(1);

    let mut records: Vec<InteractionRecord> = Vec::new();
    let mut failures = 0;
    let mut termination = Termination::Budget;
    for index in 0..params.max_interactions {
        let t = Instant::now();
        let poke = world.poke(&target)?;
        let true_beta = poke.beta;
        elapsed(&mut timings, "poke", t);

        let t = Instant::now();
        let post_raw = observe(&world, &scenario.sensor, next_sensor_seed());
        let post = statistical_outlier_filter(&post_raw, params.filter_k, params.filter_std_ratio)?;
        elapsed(&mut timings, "observe", t);

        let t = Instant::now();
        let center = poke.contact.xy();
        let touch = reconstruct_touch(&post, &poke.tactile, &center, &bounds, params)?;
        elapsed(&mut timings, "touch_model", t);

        let t = Instant::now();
        let shape = patch_shape(&world_model, &poke.contact, &bounds, params, estimator)?;
        let constraints = press_constraints(&shape, &poke.contact, scenario.probe.tip_radius);
        let candidates =
            CandidateSet::simulate(&shape, &constraints, &beta_grid, &scenario.solver, estimator.warm_start)?;
        let sample = candidates.score(&touch.observed);
        elapsed(&mut timings, "estimate", t);

        let converged = poke.converged && sample.all_converged();
        if converged {
            failures = 0;
        } else {
            failures += 1;
            if failures > 3 {
                return Err(ExploreError::Aborted { count: failures, index });
            }
        }

        let t = Instant::now();
        let pre_heights = world_model.predict_mean(&touch.heights.spec.points());
        let mut region = deformed_cells(&pre_heights, &touch.heights, params.deformation_threshold, thin);
        if region.is_empty() {
            region.push(center);
        }
        let variance_before = field.variance_at(&center);
        field = update_beta_field(&field, &sample, &region)?;
        let variance_after = field.variance_at(&center);
        elapsed(&mut timings, "beta_field", t);

        world.release()?;
        let rect = roi_rect(&center, params.roi_half_width, &bounds);
        records.push(InteractionRecord {
            index,
            target: [target.x, target.y],
            contact: poke.contact,
            pre_cloud: world_cloud.crop(&rect),
            post_cloud: post.crop(&rect),
            tactile: poke.tactile,
            sample,
            true_beta,
            deformed_cells: region.len(),
            variance_at_selection,
            variance_before,
            variance_after,
            max_variance_after: field.variance.max(),
            converged,
        });

        match select_roi(&field, params, &mut rng) {
            None => {
                termination = Termination::Converged;
                break;
            }
            Some(next) => {
                variance_at_selection = field.variance_at(&next);
                target = next;
            }
        }
    }
    Ok(ExplorationResult {
        field,
        records,
        world_model,
        world_cloud,
        termination,
        timings,
    })
}

/// Ground-truth β sampled on a grid.
pub fn truth_field(scenario: &Scenario, spec: &GridSpec) -> Result<ScalarField> {
    let values = spec
        .points()
        .iter()
        .map(|p| world::true_beta_at(scenario, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScalarField::new(*spec, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{build_scenario, ScenarioConfig};

    fn grid() -> GridSpec {
        GridSpec::new([0.0, 0.0], 0.01, 61, 41).unwrap()
    }

    fn sample_at(x: f64, y: f64, beta: f64) -> BetaSample {
        BetaSample {
            location: [x, y],
            beta_hat: beta,
            residuals: vec![],
        }
    }

    fn disc(cx: f64, cy: f64, r: f64) -> Vec<Point2<f64>> {
        let mut out = Vec::new();
        for i in -5i32..=5 {
            for j in -5i32..=5 {
                let p = Point2::new(cx + i as f64 * r / 5.0, cy + j as f64 * r / 5.0);
                if (p - Point2::new(cx, cy)).norm() <= r {
                    out.push(p);
                }
            }
        }
        out
    }

    #[test]
    fn selection_rules() {
        let params = ExplorerParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior = BetaField::prior(grid(), params.beta_gpr);
        assert!(select_roi(&prior, &params, &mut rng).is_some());

        let mut quiet = prior.clone();
        quiet.variance = ScalarField::constant(grid(), 0.01);
        assert!(select_roi(&quiet, &params, &mut rng).is_none());

        quiet.variance.values[123] = 0.2;
        for mode in [Selection::Random, Selection::Argmax] {
            let p = ExplorerParams {
                selection: mode,
                ..params.clone()
            };
            assert_eq!(select_roi(&quiet, &p, &mut rng), Some(grid().point_at(123)));
        }
    }

    #[test]
    fn random_selection_is_seeded() {
        let params = ExplorerParams::default();
        let prior = BetaField::prior(grid(), params.beta_gpr);
        let picks = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| select_roi(&prior, &params, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(picks(3), picks(3));
        assert_ne!(picks(3), picks(4));
    }

    #[test]
    fn first_update_drops_variance_below_threshold() {
        let params = ExplorerParams::default();
        let prior = BetaField::prior(grid(), params.beta_gpr);
        let f = update_beta_field(&prior, &sample_at(0.3, 0.2, 0.6), &disc(0.3, 0.2, 0.04)).unwrap();
        let v = f.variance_at(&Point2::new(0.3, 0.2));
        assert!(v < params.variance_threshold && v < params.beta_gpr.prior_variance());
        assert!(matches!(
            update_beta_field(&prior, &sample_at(0.3, 0.2, 0.6), &[]),
            Err(ExploreError::EmptyRegion)
        ));
    }

    #[test]
    fn equal_estimates_give_flat_mean_between() {
        let params = ExplorerParams::default();
        let prior = BetaField::prior(grid(), params.beta_gpr);
        let f = update_beta_field(&prior, &sample_at(0.2, 0.2, 0.4), &disc(0.2, 0.2, 0.03)).unwrap();
        let f = update_beta_field(&f, &sample_at(0.35, 0.2, 0.4), &disc(0.35, 0.2, 0.03)).unwrap();
        for k in 0..=10 {
            let x = 0.2 + 0.015 * k as f64;
            assert!((f.mean_at(&Point2::new(x, 0.2)) - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn distant_update_is_local() {
        let params = ExplorerParams::default();
        let wide = GridSpec::new([0.0, 0.0], 0.05, 61, 5).unwrap();
        let prior = BetaField::prior(wide, params.beta_gpr);
        let here = Point2::new(0.2, 0.1);
        let f = update_beta_field(&prior, &sample_at(0.2, 0.1, 0.7), &disc(0.2, 0.1, 0.04)).unwrap();
        let before = f.mean_at(&here);
        let f = update_beta_field(&f, &sample_at(2.8, 0.1, 0.3), &disc(2.8, 0.1, 0.04)).unwrap();
        assert!((f.mean_at(&here) - before).abs() < 1e-3, "{} vs {before}", f.mean_at(&here));
    }

    #[test]
    fn flat_world_model() {
        let pts: Vec<Point3<f64>> = (0..60)
            .flat_map(|r| (0..80).map(move |c| Point3::new(c as f64 * 0.0075, r as f64 * 0.0067, 0.05)))
            .collect();
        let cloud = PointCloud::new(pts);
        let m = fit_world(&cloud, Hyperparams::geometry(), 2500).unwrap();
        assert!(m.training().len() <= 2500);
        let spec = GridSpec::covering([0.01, 0.01], [0.58, 0.38], 0.005).unwrap();
        let mean = m.infer_mean_grid(&spec);
        assert!(mean.values.iter().all(|z| (z - 0.05).abs() < 1e-4));
    }

    #[test]
    fn step_world_model_rises_monotonically() {
        let pts: Vec<Point3<f64>> = (0..40)
            .flat_map(|r| {
                (0..60).map(move |c| {
                    let x = c as f64 * 0.005;
                    Point3::new(x, r as f64 * 0.005, if x < 0.15 { 0.05 } else { 0.08 })
                })
            })
            .collect();
        let m = fit_world(&PointCloud::new(pts), Hyperparams::geometry(), 2500).unwrap();
        let ell = Hyperparams::geometry().sigma_w.sqrt();
        // the rise itself is monotone; the flanks ring a little, as any
        // squared-exponential fit of a discontinuity does
        let band: Vec<Point2<f64>> = (0..=20).map(|k| Point2::new(0.15 - 0.35 * ell + 0.035 * ell * k as f64, 0.1)).collect();
        let z = m.predict_mean(&band);
        assert!(z.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{z:?}");
        assert!(z[0] < 0.055 && z[20] > 0.075, "{z:?}");
        let wide: Vec<Point2<f64>> = (0..=40).map(|k| Point2::new(0.15 - ell + 0.05 * ell * k as f64, 0.1)).collect();
        let z = m.predict_mean(&wide);
        let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(lo > 0.05 - 0.003 && hi < 0.08 + 0.003, "{lo} {hi}");
    }

    #[test]
    fn decimation_keeps_centroids() {
        let pts = vec![
            Point3::new(0.001, 0.001, 1.0),
            Point3::new(0.003, 0.002, 3.0),
            Point3::new(0.012, 0.001, 5.0),
        ];
        let d = voxel_decimate(&pts, 0.01);
        assert_eq!(d.len(), 2);
        assert!((d[0].z - 2.0).abs() < 1e-12);
        assert_eq!(d[1], pts[2]);
    }

    #[test]
    fn touch_reconstruction_fills_occlusion() {
        let scenario = build_scenario(&ScenarioConfig::preset("two-region").unwrap()).unwrap();
        let mut world = WorldState::new(&scenario);
        let poke = world.poke(&Point2::new(0.4, 0.2)).unwrap();
        let sensor = crate::world::SensorModel {
            occlusion_radius: 0.03,
            ..scenario.sensor
        };
        let cloud = observe(&world, &sensor, 11);
        let cloud = statistical_outlier_filter(&cloud, 8, 1.0).unwrap();
        let params = ExplorerParams::default();
        let c = poke.contact.xy();
        let touch = reconstruct_touch(&cloud, &poke.tactile, &c, &scenario.workspace, &params).unwrap();
        let center = touch.heights.values[touch.heights.spec.nearest_index(&c)];
        let tactile_mean = poke.tactile.iter().map(|p| p.z).sum::<f64>() / poke.tactile.len() as f64;
        assert!((center - tactile_mean).abs() < 0.002, "{center} vs {tactile_mean}");

        let empty = PointCloud::default();
        assert!(matches!(
            reconstruct_touch(&empty, &[], &c, &scenario.workspace, &params),
            Err(ExploreError::EmptyRoi)
        ));
    }

    #[test]
    fn single_interaction_budget() {
        let scenario = build_scenario(&ScenarioConfig::preset("two-region").unwrap()).unwrap();
        let params = ExplorerParams {
            max_interactions: 1,
            ..Default::default()
        };
        let r = run_exploration(&scenario, &params, &EstimatorConfig::default()).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.termination, Termination::Budget);
        assert!(r.field.variance.max() > params.variance_threshold);
        let rec = &r.records[0];
        assert!(rec.variance_after < rec.variance_before);
        assert!((rec.sample.beta_hat - rec.true_beta).abs() <= 0.1, "{}", rec.sample.beta_hat);
    }
}
