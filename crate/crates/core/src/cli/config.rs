use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::estimator::EstimatorConfig;
use crate::explorer::ExplorerParams;
use crate::msm::SolverParams;
use crate::world::{
    build_scenario, HardnessTable, ProbeModel, RegionConfig, Scenario, ScenarioConfig, SensorModel, WorkspaceConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(String),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Settings for the two calibration studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// True β levels for the recovery study; the scenario's distinct
    /// region values when empty.
    pub betas: Vec<f64>,
    pub trials: usize,
    pub cluster_sizes: Vec<usize>,
    /// Cluster size and β used to generate the cluster-study truth.
    pub truth_cluster_size: usize,
    pub truth_beta: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            betas: Vec::new(),
            trials: 5,
            cluster_sizes: vec![3, 5, 7, 9],
            truth_cluster_size: 3,
            truth_beta: 0.5,
        }
    }
}

/// Everything one invocation needs. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Built-in layout used when `regions` is empty.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub workspace: WorkspaceConfig,
    pub regions: Vec<RegionConfig>,
    pub hardness: HardnessTable,
    pub sensor: SensorModel,
    pub probe: ProbeModel,
    pub solver: SolverParams,
    pub estimator: EstimatorConfig,
    pub explorer: ExplorerParams,
    pub study: StudyConfig,
}

/// A config that passed every check.
#[derive(Debug, Clone)]
pub struct Validated {
    pub config: Config,
    pub scenario: Scenario,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig, ConfigError> {
        let mut workspace = self.workspace.clone();
        let regions = match (&self.preset, self.regions.is_empty()) {
            (Some(name), true) => {
                let preset = ScenarioConfig::preset(name).ok_or_else(|| {
                    invalid("preset", format!("unknown preset `{name}`; known: {}", ScenarioConfig::PRESETS.join(", ")))
                })?;
                if workspace.name == WorkspaceConfig::default().name {
                    workspace.name = preset.workspace.name;
                }
                preset.regions
            }
            (Some(_), false) => return Err(invalid("preset", "give either a preset or explicit regions, not both")),
            (None, _) => self.regions.clone(),
        };
        Ok(ScenarioConfig {
            workspace,
            regions,
            hardness: self.hardness.clone(),
            sensor: self.sensor,
            probe: self.probe,
            solver: self.solver,
        })
    }

    /// Full validation; nothing is written before this succeeds.
    pub fn validate(self) -> Result<Validated, ConfigError> {
        let scenario = build_scenario(&self.scenario_config()?).map_err(|e| match e {
            crate::world::WorldError::InvalidConfig { field, reason } => ConfigError::Invalid { field, reason },
            other => invalid("regions", other.to_string()),
        })?;
        self.explorer.validate().map_err(|e| match e {
            crate::explorer::ExploreError::InvalidParams { field, reason } => ConfigError::Invalid { field, reason },
            other => invalid("explorer", other.to_string()),
        })?;
        let est = &self.estimator;
        if est.beta_samples == 0 {
            return Err(invalid("estimator.beta_samples", "must be at least 1"));
        }
        if est.cluster_size < 2 {
            return Err(invalid("estimator.cluster_size", "must be at least 2"));
        }
        if est.cluster_stride == 0 || est.cluster_stride > est.cluster_size {
            return Err(invalid("estimator.cluster_stride", "must lie in 1..=cluster_size"));
        }
        let study = &self.study;
        if let Some(b) = study.betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(invalid("study.betas", format!("{b} is outside [0, 1)")));
        }
        if study.trials == 0 {
            return Err(invalid("study.trials", "must be at least 1"));
        }
        if study.cluster_sizes.is_empty() || study.cluster_sizes.iter().any(|&k| k < 2) {
            return Err(invalid("study.cluster_sizes", "needs one or more sizes, each at least 2"));
        }
        if study.truth_cluster_size < 2 {
            return Err(invalid("study.truth_cluster_size", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&study.truth_beta) {
            return Err(invalid("study.truth_beta", "must lie in [0, 1)"));
        }
        Ok(Validated { config: self, scenario })
    }
}
