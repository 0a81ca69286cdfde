use std::path::Path;

use atlas_core::dynamics::{cartpole, drone2d_with, from_linear, ControlAffineModel, ControlCost, ThrustLimit};
use atlas_core::learn::{DataRegime, LossKind, TrainConfig};
use atlas_core::network::{Initializer, NetworkKind};
use atlas_core::LinearSystem;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use crate::{CliError, CliResult};

/// Overlays the keys of `overrides` (an object, or null) onto `base`.
pub fn overlay<T: serde::Serialize + DeserializeOwned>(base: &T, overrides: &Value) -> CliResult<T> {
    let mut merged = serde_json::to_value(base)?;
    match overrides {
        Value::Null => {}
        Value::Object(map) => {
            let target = merged.as_object_mut().expect("configs serialize to objects");
            for (k, v) in map {
                target.insert(k.clone(), v.clone());
            }
        }
        _ => return Err(CliError::Validation("overrides must be a JSON object".into())),
    }
    Ok(serde_json::from_value(merged)?)
}

pub fn parse<T: DeserializeOwned>(value: Value) -> CliResult<T> {
    Ok(serde_json::from_value(value)?)
}

/// A linear system given inline or as a path relative to the config file.
pub fn load_system(spec: &Value, base: &Path) -> CliResult<LinearSystem> {
    let sys: LinearSystem = match spec {
        Value::String(path) => {
            let full = base.join(path);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", full.display())))?;
            LinearSystem::from_json(&text)?
        }
        Value::Object(_) => serde_json::from_value(spec.clone())?,
        _ => return Err(CliError::Validation("system must be a path or an object".into())),
    };
    sys.check()?;
    Ok(sys)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `cartpole`, `drone2d`, or `linear:<path>`.
    pub system: String,
    #[serde(default)]
    pub thrust_limit: ThrustLimit,
    #[serde(default)]
    pub control_cost: ControlCost,
}

impl ModelSpec {
    pub fn build(&self, base: &Path) -> CliResult<ControlAffineModel> {
        match self.system.as_str() {
            "cartpole" => Ok(cartpole()),
            "drone2d" => Ok(drone2d_with(self.thrust_limit, self.control_cost)),
            s => match s.strip_prefix("linear:") {
                Some(path) => Ok(from_linear(&load_system(&Value::String(path.into()), base)?)?),
                None => Err(CliError::Validation(format!("unknown system {s:?}"))),
            },
        }
    }

    /// The linear system behind a `linear:` model.
    pub fn linear(&self, base: &Path) -> CliResult<Option<LinearSystem>> {
        match self.system.strip_prefix("linear:") {
            Some(path) => Ok(Some(load_system(&Value::String(path.into()), base)?)),
            None => Ok(None),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub radius_sq: Option<f64>,
    pub points: Option<Vec<Vec<f64>>>,
    pub value: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumerateConfig {
    pub system: Value,
    #[serde(default = "EnumerateConfig::default_samples")]
    pub family_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub boundaries: Vec<BoundarySpec>,
    #[serde(default)]
    pub allow_offset: bool,
}

impl EnumerateConfig {
    fn default_samples() -> usize {
        16
    }
}

/// Training defaults of the linear-quadratic failure-mode study.
pub fn failure_mode_train_defaults() -> TrainConfig {
    TrainConfig {
        kind: NetworkKind::Generic,
        widths: vec![128, 128, 128],
        regime: DataRegime::Uniform,
        loss: LossKind::Mse,
        samples: 10_000,
        epochs: 1000,
        max_batches_per_epoch: None,
        target_mse: Some(1e-4),
        eval_every: 100,
        eval_rollouts: 10,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureModeConfig {
    #[serde(default)]
    pub system: Option<Value>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "FailureModeConfig::default_initializers")]
    pub initializers: Vec<Initializer>,
    #[serde(default)]
    pub train: Value,
    #[serde(default = "FailureModeConfig::default_rollouts")]
    pub eval_rollouts: usize,
    /// Long enough for an unstable closed loop to reach the divergence bound.
    #[serde(default = "FailureModeConfig::default_steps")]
    pub eval_steps: usize,
    #[serde(default = "FailureModeConfig::default_grid")]
    pub grid: usize,
    #[serde(default = "FailureModeConfig::default_half_width")]
    pub half_width: f64,
}

impl FailureModeConfig {
    fn default_initializers() -> Vec<Initializer> {
        vec![Initializer::LecunNormal]
    }
    fn default_rollouts() -> usize {
        10
    }
    fn default_steps() -> usize {
        2000
    }
    fn default_grid() -> usize {
        41
    }
    fn default_half_width() -> f64 {
        2.0
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    #[serde(flatten)]
    pub model: ModelSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: Value,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(flatten)]
    pub model: ModelSpec,
    /// The training overrides the checkpoints were produced with.
    #[serde(default)]
    pub train: Value,
    /// Checkpoint files, relative to the config file.
    pub checkpoints: Vec<String>,
    #[serde(default = "EvalConfig::default_rollouts")]
    pub rollouts: usize,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub write_trajectories: bool,
}

impl EvalConfig {
    fn default_rollouts() -> usize {
        20
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularConfig {
    /// A single MDP file; otherwise random MDPs are generated.
    #[serde(default)]
    pub mdp: Option<String>,
    #[serde(default = "TabularConfig::default_mdps")]
    pub mdps: usize,
    #[serde(default = "TabularConfig::default_states")]
    pub max_states: usize,
    #[serde(default = "TabularConfig::default_actions")]
    pub max_actions: usize,
    #[serde(default = "TabularConfig::default_gamma")]
    pub gamma: f64,
    #[serde(default = "TabularConfig::default_inits")]
    pub inits: usize,
    #[serde(default = "TabularConfig::default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TabularConfig {
    fn default_mdps() -> usize {
        50
    }
    fn default_states() -> usize {
        64
    }
    fn default_actions() -> usize {
        8
    }
    fn default_gamma() -> f64 {
        0.9
    }
    fn default_inits() -> usize {
        20
    }
    fn default_tol() -> f64 {
        1e-10
    }
}
