//! Synthetic ground truth: a flat elastic surface split into rectangular
//! regions of known deformability, a virtual depth sensor and a virtual
//! spherical probe that presses the surface.

mod filter;
mod sensor;

pub use filter::statistical_outlier_filter;
pub use sensor::observe;

use std::collections::BTreeMap;

use nalgebra::{Point2, Point3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msm::{Constraint, MsmError, MsmSolver, RestShape, SolverParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("bad region layout: {0}")]
    BadLayout(String),
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("point ({0}, {1}) lies outside the workspace")]
    OutOfWorkspace(f64, f64),
    #[error("need more than {k} points for the outlier filter, got {len}")]
    TooFewPoints { k: usize, len: usize },
    #[error(transparent)]
    Solver(#[from] MsmError),
}

pub type Result<T, E = WorldError> = std::result::Result<T, E>;

fn invalid(field: &str, reason: impl Into<String>) -> WorldError {
    WorldError::InvalidConfig {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Axis-aligned rectangle `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            min: [x0, y0],
            max: [x1, y1],
        }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    /// Closed containment with a small absolute slack.
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        const SLACK: f64 = 1e-12;
        p.x >= self.min[0] - SLACK
            && p.x <= self.max[0] + SLACK
            && p.y >= self.min[1] - SLACK
            && p.y <= self.max[1] + SLACK
    }

    pub fn overlap_area(&self, other: &Rect) -> f64 {
        let w = self.max[0].min(other.max[0]) - self.min[0].max(other.min[0]);
        let h = self.max[1].min(other.max[1]) - self.min[1].max(other.min[1]);
        w.max(0.0) * h.max(0.0)
    }

    fn is_finite(&self) -> bool {
        self.min.iter().chain(&self.max).all(|v| v.is_finite())
    }
}

/// Ground-truth β per hardness label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HardnessTable(pub BTreeMap<String, f64>);

impl Default for HardnessTable {
    fn default() -> Self {
        Self(
            [("60", 0.75), ("110", 0.55), ("150", 0.35), ("rigid", 0.02)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    /// `[x0, y0, x1, y1]` in metres.
    pub rect: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardness: Option<String>,
    /// Explicit β, overriding the hardness table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkspaceConfig {
    pub name: String,
    pub origin: [f64; 2],
    pub size: [f64; 2],
    pub base_height: f64,
    /// Spacing of the true-surface particle lattice.
    pub particle_spacing: f64,
    /// Half-width of the square window relaxed around each poke.
    pub support_half_width: f64,
    pub cluster_size: usize,
    pub cluster_stride: usize,
}

impl Default for WorkspaceConfig {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            origin: [0.0, 0.0],
            size: [0.6, 0.4],
            base_height: 0.05,
            particle_spacing: 0.01,
            support_half_width: 0.06,
            cluster_size: 3,
            cluster_stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorModel {
    pub spacing: f64,
    pub noise_std: f64,
    pub outlier_fraction: f64,
    pub outlier_amplitude: f64,
    pub occlusion_radius: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            spacing: 0.007,
            noise_std: 0.001,
            outlier_fraction: 0.01,
            outlier_amplitude: 0.05,
            occlusion_radius: 0.025,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(invalid("sensor.spacing", "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("sensor.noise_std", "must be non-negative"));
        }
        if !(0.0..0.2).contains(&self.outlier_fraction) {
            return Err(invalid("sensor.outlier_fraction", "must lie in [0, 0.2)"));
        }
        if !(self.outlier_amplitude >= 0.0 && self.outlier_amplitude.is_finite()) {
            return Err(invalid("sensor.outlier_amplitude", "must be non-negative"));
        }
        if !(self.occlusion_radius >= 0.0 && self.occlusion_radius.is_finite()) {
            return Err(invalid("sensor.occlusion_radius", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeModel {
    pub tip_radius: f64,
    pub press_depth: f64,
    pub tactile_points: usize,
    /// When set, the indentation is scaled by `min(1, beta / reference)` so
    /// stiffer ground yields less, as under a constant pressing force.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_reference_beta: Option<f64>,
}

impl Default for ProbeModel {
    fn default() -> Self {
        Self {
            tip_radius: 0.01,
            press_depth: 0.015,
            tactile_points: 10,
            depth_reference_beta: None,
        }
    }
}

impl ProbeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.tip_radius > 0.0 && self.tip_radius.is_finite()) {
            return Err(invalid("probe.tip_radius", "must be positive"));
        }
        if !(self.press_depth > 0.0 && self.press_depth.is_finite()) {
            return Err(invalid("probe.press_depth", "must be positive"));
        }
        if self.tactile_points == 0 {
            return Err(invalid("probe.tactile_points", "must be at least 1"));
        }
        if let Some(r) = self.depth_reference_beta {
            if !(r > 0.0 && r < 1.0) {
                return Err(invalid("probe.depth_reference_beta", "must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn depth_for(&self, beta: f64) -> f64 {
        match self.depth_reference_beta {
            Some(r) => self.press_depth * (beta / r).min(1.0),
            None => self.press_depth,
        }
    }

    /// Contact points on the spherical tip whose lowest point is `bottom`:
    /// the bottom itself plus a ring 30 degrees up the cap.
    pub fn tactile_points(&self, bottom: &Point3<f64>) -> Vec<Point3<f64>> {
        let r = self.tip_radius;
        let center = bottom + nalgebra::Vector3::new(0.0, 0.0, r);
        let ring = self.tactile_points - 1;
        let polar = std::f64::consts::FRAC_PI_6;
        std::iter::once(*bottom)
            .chain((0..ring).map(|k| {
                let az = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
                center
                    + nalgebra::Vector3::new(
                        r * polar.sin() * az.cos(),
                        r * polar.sin() * az.sin(),
                        -r * polar.cos(),
                    )
            }))
            .collect()
    }
}

/// Declarative scenario description.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioConfig {
    pub workspace: WorkspaceConfig,
    pub regions: Vec<RegionConfig>,
    pub hardness: HardnessTable,
    pub sensor: SensorModel,
    pub probe: ProbeModel,
    pub solver: SolverParams,
}

impl ScenarioConfig {
    /// Named layouts modelled on the six tabletop setups: one foam, or
    /// foams of different hardness side by side, on a 60 x 40 cm area.
    pub fn preset(name: &str) -> Option<Self> {
        let region = |x0: f64, x1: f64, label: &str| RegionConfig {
            rect: [x0, 0.0, x1, 0.4],
            hardness: Some(label.to_string()),
            beta: None,
        };
        let regions = match name {
            "homogeneous-60" => vec![region(0.0, 0.6, "60")],
            "homogeneous-110" => vec![region(0.0, 0.6, "110")],
            "two-region" | "heterogeneous-60-150" => vec![region(0.0, 0.25, "60"), region(0.25, 0.6, "150")],
            "heterogeneous-110-150" => vec![region(0.0, 0.25, "110"), region(0.25, 0.6, "150")],
            "heterogeneous-150-rigid" => vec![region(0.0, 0.25, "150"), region(0.25, 0.6, "rigid")],
            "heterogeneous-60-110-rigid" => vec![
                region(0.0, 0.2, "60"),
                region(0.2, 0.4, "110"),
                region(0.4, 0.6, "rigid"),
            ],
            _ => return None,
        };
        Some(Self {
            workspace: WorkspaceConfig {
                name: name.to_string(),
                ..Default::default()
            },
            regions,
            ..Default::default()
        })
    }

    pub const PRESETS: [&'static str; 6] = [
        "homogeneous-60",
        "homogeneous-110",
        "two-region",
        "heterogeneous-110-150",
        "heterogeneous-150-rigid",
        "heterogeneous-60-110-rigid",
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub rect: Rect,
    pub label: String,
    pub beta: f64,
}

/// Validated ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub workspace: Rect,
    pub regions: Vec<Region>,
    pub base_height: f64,
    pub particle_spacing: f64,
    pub support_half_width: f64,
    pub cluster_size: usize,
    pub cluster_stride: usize,
    pub sensor: SensorModel,
    pub probe: ProbeModel,
    pub solver: SolverParams,
}

/// Lattice counts for `length / spacing` when it is an integer.
fn lattice_count(length: f64, spacing: f64) -> Option<usize> {
    let k = (length / spacing).round();
    ((length / spacing - k).abs() < 1e-6).then_some(k as usize + 1)
}

pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    let ws = &config.workspace;
    let [w, h] = ws.size;
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(invalid("workspace.size", "both sides must be positive"));
    }
    if !(ws.origin[0].is_finite() && ws.origin[1].is_finite()) {
        return Err(invalid("workspace.origin", "must be finite"));
    }
    if !ws.base_height.is_finite() {
        return Err(invalid("workspace.base_height", "must be finite"));
    }
    let s = ws.particle_spacing;
    if !(s > 0.0 && s <= 0.01 + 1e-12) {
        return Err(invalid("workspace.particle_spacing", "must lie in (0, 0.01] m"));
    }
    match (lattice_count(w, s), lattice_count(h, s)) {
        (Some(nx), Some(ny)) if nx >= 3 && ny >= 3 => {}
        _ => {
            return Err(invalid(
                "workspace.particle_spacing",
                "must divide both workspace sides into at least 2 steps",
            ))
        }
    }
    if !(ws.support_half_width >= s) {
        return Err(invalid("workspace.support_half_width", "must be at least one particle spacing"));
    }
    if ws.cluster_size < 2 {
        return Err(invalid("workspace.cluster_size", "must be at least 2"));
    }
    if ws.cluster_stride == 0 || ws.cluster_stride > ws.cluster_size {
        return Err(invalid("workspace.cluster_stride", "must lie in [1, cluster_size]"));
    }
    config.sensor.validate()?;
    config.probe.validate()?;
    validate_solver(&config.solver)?;

    let workspace = Rect::new(ws.origin[0], ws.origin[1], ws.origin[0] + w, ws.origin[1] + h);
    if config.regions.is_empty() {
        return Err(WorldError::BadLayout("no regions given".into()));
    }
    let mut regions = Vec::with_capacity(config.regions.len());
    for (i, r) in config.regions.iter().enumerate() {
        let rect = Rect::new(r.rect[0], r.rect[1], r.rect[2], r.rect[3]);
        if !rect.is_finite() || rect.width() <= 0.0 || rect.height() <= 0.0 {
            return Err(WorldError::BadLayout(format!("region {i} has no area")));
        }
        let (label, beta) = match (&r.hardness, r.beta) {
            (_, Some(b)) => (r.hardness.clone().unwrap_or_else(|| format!("beta={b}")), b),
            (Some(label), None) => match config.hardness.0.get(label) {
                Some(&b) => (label.clone(), b),
                None => return Err(invalid(&format!("regions[{i}].hardness"), format!("unknown label `{label}`"))),
            },
            (None, None) => return Err(invalid(&format!("regions[{i}]"), "needs `hardness` or `beta`")),
        };
        if !(0.0..1.0).contains(&beta) {
            return Err(invalid(&format!("regions[{i}].beta"), "must lie in [0, 1)"));
        }
        regions.push(Region { rect, label, beta });
    }
    check_tiling(&workspace, &regions)?;
    Ok(Scenario {
        name: ws.name.clone(),
        workspace,
        regions,
        base_height: ws.base_height,
        particle_spacing: s,
        support_half_width: ws.support_half_width,
        cluster_size: ws.cluster_size,
        cluster_stride: ws.cluster_stride,
        sensor: config.sensor,
        probe: config.probe,
        solver: config.solver,
    })
}

pub(crate) fn validate_solver(p: &SolverParams) -> Result<()> {
    if !(p.alpha > 0.0 && p.alpha <= 1.0) {
        return Err(invalid("solver.alpha", "must lie in (0, 1]"));
    }
    if !(p.eps > 0.0 && p.eps.is_finite()) {
        return Err(invalid("solver.eps", "must be positive"));
    }
    if p.max_iters == 0 {
        return Err(invalid("solver.max_iters", "must be at least 1"));
    }
    Ok(())
}

fn check_tiling(workspace: &Rect, regions: &[Region]) -> Result<()> {
    let tol = 1e-9 * workspace.area();
    for (i, r) in regions.iter().enumerate() {
        if r.rect.overlap_area(workspace) < r.rect.area() - tol {
            return Err(WorldError::BadLayout(format!("region {i} extends outside the workspace")));
        }
        for (j, q) in regions.iter().enumerate().skip(i + 1) {
            if r.rect.overlap_area(&q.rect) > tol {
                return Err(WorldError::BadLayout(format!("regions {i} and {j} overlap")));
            }
        }
    }
    let covered: f64 = regions.iter().map(|r| r.rect.area()).sum();
    if (covered - workspace.area()).abs() > tol {
        return Err(WorldError::BadLayout("regions leave part of the workspace uncovered".into()));
    }
    Ok(())
}

impl Scenario {
    /// Distinct ground-truth β values, ascending.
    pub fn distinct_betas(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.regions.iter().map(|r| r.beta).collect();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }
}

/// β of the first region containing `xy`; shared edges go to the lower index.
pub fn true_beta_at(scenario: &Scenario, xy: &Point2<f64>) -> Result<f64> {
    if !scenario.workspace.contains(xy) {
        return Err(WorldError::OutOfWorkspace(xy.x, xy.y));
    }
    scenario
        .regions
        .iter()
        .find(|r| r.rect.contains(xy))
        .map(|r| r.beta)
        .ok_or(WorldError::OutOfWorkspace(xy.x, xy.y))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points whose xy falls inside `rect`.
    pub fn crop(&self, rect: &Rect) -> PointCloud {
        PointCloud::new(
            self.points
                .iter()
                .filter(|p| rect.contains(&p.xy()))
                .copied()
                .collect(),
        )
    }
}

/// Square window of the particle lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub col0: usize,
    pub row0: usize,
    pub nx: usize,
    pub ny: usize,
}

/// An active press.
#[derive(Debug, Clone, PartialEq)]
pub struct Press {
    pub target: [f64; 2],
    /// Lowest point of the probe tip.
    pub contact: Point3<f64>,
    pub particle: usize,
    pub beta: f64,
    pub depth: f64,
    pub window: Window,
    pub constraints: Vec<Constraint>,
    pub iterations: usize,
    pub converged: bool,
}

/// Result of a poke as seen by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct PokeOutcome {
    pub contact: Point3<f64>,
    pub tactile: Vec<Point3<f64>>,
    pub beta: f64,
    pub depth: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// True surface and its current deformation.
#[derive(Debug, Clone)]
pub struct WorldState {
    scenario: Scenario,
    nx: usize,
    ny: usize,
    rest: Vec<Point3<f64>>,
    current: Vec<Point3<f64>>,
    press: Option<Press>,
}

impl WorldState {
    pub fn new(scenario: &Scenario) -> Self {
        let s = scenario.particle_spacing;
        let nx = lattice_count(scenario.workspace.width(), s).expect("validated scenario");
        let ny = lattice_count(scenario.workspace.height(), s).expect("validated scenario");
        let o = scenario.workspace.min;
        let rest: Vec<Point3<f64>> = (0..ny)
            .flat_map(|r| (0..nx).map(move |c| (r, c)))
            .map(|(r, c)| Point3::new(o[0] + c as f64 * s, o[1] + r as f64 * s, scenario.base_height))
            .collect();
        Self {
            scenario: scenario.clone(),
            nx,
            ny,
            current: rest.clone(),
            rest,
            press: None,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn rest_positions(&self) -> &[Point3<f64>] {
        &self.rest
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.current
    }

    pub fn press(&self) -> Option<&Press> {
        self.press.as_ref()
    }

    /// Height of the current surface at `xy`, bilinear over the lattice.
    pub fn height_at(&self, xy: &Point2<f64>) -> f64 {
        let s = self.scenario.particle_spacing;
        let o = self.scenario.workspace.min;
        let u = ((xy.x - o[0]) / s).clamp(0.0, (self.nx - 1) as f64);
        let v = ((xy.y - o[1]) / s).clamp(0.0, (self.ny - 1) as f64);
        let c0 = (u.floor() as usize).min(self.nx - 2);
        let r0 = (v.floor() as usize).min(self.ny - 2);
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let z = |r: usize, c: usize| self.current[r * self.nx + c].z;
        (1.0 - fv) * ((1.0 - fu) * z(r0, c0) + fu * z(r0, c0 + 1))
            + fv * ((1.0 - fu) * z(r0 + 1, c0) + fu * z(r0 + 1, c0 + 1))
    }

    /// Nearest interior particle to `xy`.
    fn contact_particle(&self, xy: &Point2<f64>) -> usize {
        let s = self.scenario.particle_spacing;
        let o = self.scenario.workspace.min;
        let snap = |v: f64, o: f64, n: usize| (((v - o) / s).round() as i64).clamp(1, n as i64 - 2) as usize;
        snap(xy.y, o[1], self.ny) * self.nx + snap(xy.x, o[0], self.nx)
    }

    fn window_around(&self, particle: usize) -> Window {
        let half = (self.scenario.support_half_width / self.scenario.particle_spacing).round() as usize;
        let (r, c) = (particle / self.nx, particle % self.nx);
        let col0 = c.saturating_sub(half);
        let row0 = r.saturating_sub(half);
        Window {
            col0,
            row0,
            nx: (c + half).min(self.nx - 1) - col0 + 1,
            ny: (r + half).min(self.ny - 1) - row0 + 1,
        }
    }

    fn window_indices(&self, w: &Window) -> Vec<usize> {
        (w.row0..w.row0 + w.ny)
            .flat_map(|r| (w.col0..w.col0 + w.nx).map(move |c| r * self.nx + c))
            .collect()
    }

    fn window_shape(&self, w: &Window) -> Result<RestShape> {
        let idx = self.window_indices(w);
        let heights: Vec<f64> = idx.iter().map(|&i| self.rest[i].z).collect();
        let o = self.rest[idx[0]];
        Ok(RestShape::from_heightmap(
            [o.x, o.y],
            self.scenario.particle_spacing,
            w.nx,
            w.ny,
            &heights,
            self.scenario.cluster_size,
            self.scenario.cluster_stride,
        )?)
    }

    /// Press the probe into the surface near `target`, relaxing the true
    /// surface with the local ground-truth β. Replaces any active press.
    pub fn poke(&mut self, target: &Point2<f64>) -> Result<PokeOutcome> {
        let beta = true_beta_at(&self.scenario, target)?;
        self.current.clone_from(&self.rest);
        self.press = None;

        let probe = self.scenario.probe;
        let particle = self.contact_particle(target);
        let depth = probe.depth_for(beta);
        let top = self.rest[particle];
        let bottom = Point3::new(top.x, top.y, top.z - depth);
        let window = self.window_around(particle);
        let shape = self.window_shape(&window)?;
        let constraints = press_constraints(&shape, &bottom, probe.tip_radius);

        let solver = MsmSolver::new(&shape)?;
        let relaxed = solver.relax(&constraints, beta, &self.scenario.solver)?;
        for (k, &i) in self.window_indices(&window).iter().enumerate() {
            self.current[i] = relaxed.positions[k];
        }
        let tactile = probe.tactile_points(&bottom);
        self.press = Some(Press {
            target: [target.x, target.y],
            contact: bottom,
            particle,
            beta,
            depth,
            window,
            constraints,
            iterations: relaxed.iterations,
            converged: relaxed.converged,
        });
        Ok(PokeOutcome {
            contact: bottom,
            tactile,
            beta,
            depth,
            iterations: relaxed.iterations,
            converged: relaxed.converged,
        })
    }

    /// Lift the probe and let the surface relax without constraints.
    pub fn release(&mut self) -> Result<bool> {
        let Some(press) = self.press.take() else {
            return Ok(true);
        };
        let shape = self.window_shape(&press.window)?;
        let idx = self.window_indices(&press.window);
        let start: Vec<Point3<f64>> = idx.iter().map(|&i| self.current[i]).collect();
        // the tail of the relaxation is slow, so settle much tighter than a
        // poke needs before calling the surface back at rest
        let params = SolverParams {
            eps: self.scenario.solver.eps * 1e-2,
            max_iters: self.scenario.solver.max_iters * 5,
            ..self.scenario.solver
        };
        let relaxed = MsmSolver::new(&shape)?.relax_from(Some(&start), &[], press.beta, &params)?;
        for (k, &i) in idx.iter().enumerate() {
            self.current[i] = relaxed.positions[k];
        }
        Ok(relaxed.converged)
    }
}

/// Constraints pinning every particle strictly inside the tip radius onto
/// the sphere resting with its lowest point at `bottom`.
pub fn press_constraints(shape: &RestShape, bottom: &Point3<f64>, tip_radius: f64) -> Vec<Constraint> {
    let mut out = Vec::new();
    for (i, p) in shape.positions().iter().enumerate() {
        let r = (p.xy() - bottom.xy()).norm();
        if r >= tip_radius * (1.0 - 1e-9) {
            continue;
        }
        let z = bottom.z + tip_radius - (tip_radius * tip_radius - r * r).sqrt();
        if z < p.z {
            out.push(Constraint {
                index: i,
                position: Point3::new(p.x, p.y, z),
            });
        }
    }
    out
}
