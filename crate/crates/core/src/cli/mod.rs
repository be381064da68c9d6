//! Config-driven experiments and their file outputs.

mod config;
mod export;

pub use config::{Config, ConfigError, StudyConfig, Validated};
pub use export::{
    export_field, field_from_csv, field_to_csv, field_to_pgm, format_value, import_csv, ExportError, FieldFormat,
    CSV_HEADER,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::estimator::{CandidateSet, EstimatorConfig};
use crate::explorer::{
    classification_accuracy, count_regions, fit_world, patch_shape, reconstruct_touch, run_exploration, truth_field,
    ExplorationResult, ExplorerParams, InteractionRecord, Termination,
};
use crate::world::{observe, press_constraints, statistical_outlier_filter, Region, Scenario, WorldState};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("run aborted: {0}")]
    Runtime(String),
    #[error("output error: {0}")]
    Export(#[from] ExportError),
}

impl CliError {
    /// 1 for anything wrong with the config, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Options shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub format: FieldFormat,
}

/// Parse and check the config, applying the seed override.
pub fn load(inv: &Invocation) -> Result<Validated, CliError> {
    let mut config = Config::load(&inv.config)?;
    if let Some(seed) = inv.seed {
        config.explorer.seed = seed;
    }
    Ok(config.validate()?)
}

fn create_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|source| {
        CliError::Export(ExportError::Io {
            path: out.to_path_buf(),
            source,
        })
    })
}

fn write_text(out: &Path, name: &str, text: &str) -> Result<String, CliError> {
    export::write_file(&out.join(name), text.as_bytes())?;
    Ok(name.to_string())
}

fn write_json(out: &Path, name: &str, value: &impl Serialize) -> Result<String, CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_text(out, name, &(text + "\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSummary {
    pub index: usize,
    pub target: [f64; 2],
    pub contact: [f64; 3],
    pub beta_hat: f64,
    pub true_beta: f64,
    pub residual: f64,
    pub converged: bool,
    pub variance_at_selection: f64,
    pub variance_before: f64,
    pub variance_after: f64,
}

impl From<&InteractionRecord> for InteractionSummary {
    fn from(r: &InteractionRecord) -> Self {
        Self {
            index: r.index,
            target: r.target,
            contact: [r.contact.x, r.contact.y, r.contact.z],
            beta_hat: r.sample.beta_hat,
            true_beta: r.true_beta,
            residual: r.sample.min_error(),
            converged: r.converged,
            variance_at_selection: r.variance_at_selection,
            variance_before: r.variance_before,
            variance_after: r.variance_after,
        }
    }
}

/// Summary of one exploration run. File names are relative to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub termination: Termination,
    pub interaction_count: usize,
    pub interactions: Vec<InteractionSummary>,
    pub files: BTreeMap<String, String>,
    pub segmentation_accuracy: f64,
    pub regions_found: usize,
    pub beta_mean_std: f64,
    pub max_variance: f64,
    pub timings_ms: BTreeMap<String, f64>,
}

fn interactions_csv(records: &[InteractionRecord]) -> String {
    let mut out = String::from(
        "index,target_x,target_y,contact_x,contact_y,contact_z,beta_hat,true_beta,residual,deformed_cells,\
         variance_at_selection,variance_before,variance_after,max_variance_after,converged\n",
    );
    for r in records {
        let f = |v: f64| format_value(v);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            f(r.target[0]),
            f(r.target[1]),
            f(r.contact.x),
            f(r.contact.y),
            f(r.contact.z),
            f(r.sample.beta_hat),
            f(r.true_beta),
            f(r.sample.min_error()),
            r.deformed_cells,
            f(r.variance_at_selection),
            f(r.variance_before),
            f(r.variance_after),
            f(r.max_variance_after),
            r.converged
        );
    }
    out
}

/// Full audit trail of one interaction, including the cropped clouds.
#[derive(Serialize)]
struct RecordDump<'a> {
    index: usize,
    target: [f64; 2],
    contact: [f64; 3],
    true_beta: f64,
    sample: &'a crate::estimator::BetaSample,
    tactile: Vec<[f64; 3]>,
    pre_cloud: Vec<[f64; 3]>,
    post_cloud: Vec<[f64; 3]>,
}

fn xyz(points: &[nalgebra::Point3<f64>]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// Explore the configured scenario and write fields, records and report.
pub fn cmd_run(inv: &Invocation) -> Result<RunReport, CliError> {
    let v = load(inv)?;
    let result = run_exploration(&v.scenario, &v.config.explorer, &v.config.estimator).map_err(runtime)?;
    write_run(&v, &result, &inv.out, inv.format)
}

pub fn write_run(v: &Validated, result: &ExplorationResult, out: &Path, format: FieldFormat) -> Result<RunReport, CliError> {
    let spec = *result.field.spec();
    let mean = result.field.clamped_mean();
    let truth = truth_field(&v.scenario, &spec).map_err(runtime)?;
    let world = result.world_model.infer_mean_grid(&spec);
    let params = &v.config.explorer;

    create_out_dir(out)?;
    let mut files = BTreeMap::new();
    for (name, field) in [
        ("beta_mean", &mean),
        ("beta_variance", &result.field.variance),
        ("beta_truth", &truth),
        ("world_height", &world),
    ] {
        let path = export_field(field, &out.join(name), format)?;
        files.insert(name.to_string(), file_name(&path));
    }
    files.insert(
        "interactions".into(),
        write_text(out, "interactions.csv", &interactions_csv(&result.records))?,
    );
    let dump: Vec<RecordDump> = result
        .records
        .iter()
        .map(|r| RecordDump {
            index: r.index,
            target: r.target,
            contact: [r.contact.x, r.contact.y, r.contact.z],
            true_beta: r.true_beta,
            sample: &r.sample,
            tactile: xyz(&r.tactile),
            pre_cloud: xyz(&r.pre_cloud.points),
            post_cloud: xyz(&r.post_cloud.points),
        })
        .collect();
    files.insert("records".into(), write_json(out, "records.json", &dump)?);

    let report = RunReport {
        scenario: v.scenario.name.clone(),
        seed: params.seed,
        termination: result.termination,
        interaction_count: result.records.len(),
        interactions: result.records.iter().map(InteractionSummary::from).collect(),
        files,
        segmentation_accuracy: classification_accuracy(&result.field.mean, &v.scenario).map_err(runtime)?,
        regions_found: count_regions(&result.field.mean, params.region_contrast),
        beta_mean_std: result.field.mean.std_dev(),
        max_variance: result.field.variance.max(),
        timings_ms: result
            .timings
            .iter()
            .map(|(k, d)| (k.clone(), d.as_secs_f64() * 1e3))
            .collect(),
    };
    write_json(out, "report.json", &report)?;
    Ok(report)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// The scenario with one region of uniform β covering the workspace.
fn homogeneous(scenario: &Scenario, beta: f64) -> Scenario {
    Scenario {
        regions: vec![Region {
            rect: scenario.workspace,
            label: format!("beta={beta}"),
            beta,
        }],
        ..scenario.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaStudyRow {
    pub true_beta: f64,
    pub trial: usize,
    pub seed: u64,
    pub beta_hat: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaStudyReport {
    pub rows: Vec<BetaStudyRow>,
    /// β̂ strictly increases with the true β within every trial.
    pub increasing_in_every_trial: bool,
    /// Fraction of estimates within one grid step of the truth.
    pub within_one_step: f64,
}

/// One poke per true β level and trial on a uniform surface, estimating β
/// from the reconstructed indentation exactly as during exploration.
pub fn beta_study(v: &Validated) -> Result<BetaStudyReport, CliError> {
    let study = &v.config.study;
    let levels = if study.betas.is_empty() {
        v.scenario.distinct_betas()
    } else {
        study.betas.clone()
    };
    let step = 1.0 / v.config.estimator.beta_samples as f64;
    let mut rows = Vec::new();
    for trial in 0..study.trials {
        let seed = v.config.explorer.seed.wrapping_add(trial as u64);
        for &beta in &levels {
            let params = ExplorerParams {
                seed,
                max_interactions: 1,
                ..v.config.explorer.clone()
            };
            let r = run_exploration(&homogeneous(&v.scenario, beta), &params, &v.config.estimator).map_err(runtime)?;
            let sample = &r.records[0].sample;
            rows.push(BetaStudyRow {
                true_beta: beta,
                trial,
                seed,
                beta_hat: sample.beta_hat,
                residual: sample.min_error(),
            });
        }
    }
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by(|&a, &b| levels[a].total_cmp(&levels[b]));
    let increasing = rows.chunks(levels.len()).all(|trial| {
        order.windows(2).all(|w| levels[w[0]] == levels[w[1]] || trial[w[1]].beta_hat > trial[w[0]].beta_hat)
    });
    let close = rows
        .iter()
        .filter(|r| (r.beta_hat - r.true_beta).abs() <= step + 1e-9)
        .count();
    Ok(BetaStudyReport {
        within_one_step: close as f64 / rows.len() as f64,
        increasing_in_every_trial: increasing,
        rows,
    })
}

pub fn cmd_beta_study(inv: &Invocation) -> Result<BetaStudyReport, CliError> {
    let v = load(inv)?;
    let report = beta_study(&v)?;
    create_out_dir(&inv.out)?;
    let mut csv = String::from("true_beta,trial,seed,beta_hat,residual\n");
    for r in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            format_value(r.true_beta),
            r.trial,
            r.seed,
            format_value(r.beta_hat),
            format_value(r.residual)
        );
    }
    write_text(&inv.out, "beta_study.csv", &csv)?;
    write_json(&inv.out, "beta_study.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStudyRow {
    pub cluster_size: usize,
    pub beta_hat: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStudyReport {
    pub truth_cluster_size: usize,
    pub truth_beta: f64,
    pub rows: Vec<ClusterStudyRow>,
    pub best_cluster_size: usize,
}

/// Poke a uniform surface simulated with the truth cluster size, then fit
/// the reconstruction with each candidate cluster size.
pub fn cluster_study(v: &Validated) -> Result<ClusterStudyReport, CliError> {
    let study = &v.config.study;
    let params = &v.config.explorer;
    let scenario = Scenario {
        cluster_size: study.truth_cluster_size,
        cluster_stride: 1,
        ..homogeneous(&v.scenario, study.truth_beta)
    };
    let bounds = scenario.workspace;
    let seed = params.seed;
    let mut world = WorldState::new(&scenario);
    let cloud = statistical_outlier_filter(
        &observe(&world, &scenario.sensor, seed.wrapping_mul(2).wrapping_add(1)),
        params.filter_k,
        params.filter_std_ratio,
    )
    .map_err(runtime)?;
    let world_model = fit_world(&cloud, params.world_gpr, params.max_world_points).map_err(runtime)?;
    let target = params.initial_target.unwrap_or(bounds.center());
    let poke = world.poke(&Point2::new(target[0], target[1])).map_err(runtime)?;
    let post = statistical_outlier_filter(
        &observe(&world, &scenario.sensor, seed.wrapping_mul(2).wrapping_add(2)),
        params.filter_k,
        params.filter_std_ratio,
    )
    .map_err(runtime)?;
    let touch = reconstruct_touch(&post, &poke.tactile, &poke.contact.xy(), &bounds, params).map_err(runtime)?;

    let mut rows = Vec::new();
    for &size in &study.cluster_sizes {
        let est = EstimatorConfig {
            cluster_size: size,
            cluster_stride: 1,
            ..v.config.estimator.clone()
        };
        let shape = patch_shape(&world_model, &poke.contact, &bounds, params, &est).map_err(runtime)?;
        let cons = press_constraints(&shape, &poke.contact, scenario.probe.tip_radius);
        let set = CandidateSet::simulate(&shape, &cons, &est.beta_grid(), &scenario.solver, est.warm_start)
            .map_err(runtime)?;
        let sample = set.score(&touch.observed);
        rows.push(ClusterStudyRow {
            cluster_size: size,
            beta_hat: sample.beta_hat,
            residual: sample.min_error(),
        });
    }
    let best = rows
        .iter()
        .fold(&rows[0], |b, r| if r.residual < b.residual { r } else { b })
        .cluster_size;
    Ok(ClusterStudyReport {
        truth_cluster_size: study.truth_cluster_size,
        truth_beta: study.truth_beta,
        rows,
        best_cluster_size: best,
    })
}

pub fn cmd_cluster_study(inv: &Invocation) -> Result<ClusterStudyReport, CliError> {
    let v = load(inv)?;
    let report = cluster_study(&v)?;
    create_out_dir(&inv.out)?;
    let mut csv = String::from("cluster_size,beta_hat,residual\n");
    for r in &report.rows {
        let _ = writeln!(csv, "{},{},{}", r.cluster_size, format_value(r.beta_hat), format_value(r.residual));
    }
    write_text(&inv.out, "cluster_study.csv", &csv)?;
    write_json(&inv.out, "cluster_study.json", &report)?;
    Ok(report)
}
