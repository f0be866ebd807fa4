//! JSON configuration files.
//!
//! Every document may carry a top-level `"version"` (currently 1). Unknown
//! keys are rejected, and errors carry the JSON pointer of the offending value.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lab::ExperimentConfig;
use crate::network::{Activation, Aggregation, Loss, Task, TrainConfig};

pub const CONFIG_VERSION: u64 = 1;

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Parses a versioned JSON document into `T`.
pub fn parse_versioned<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config {
        pointer: "/".into(),
        message: e.to_string(),
    })?;
    if let Some(obj) = value.as_object_mut() {
        if let Some(v) = obj.remove("version") {
            if v.as_u64() != Some(CONFIG_VERSION) {
                return Err(Error::Config {
                    pointer: "/version".into(),
                    message: format!("unsupported config version {v}, expected {CONFIG_VERSION}"),
                });
            }
        }
    }
    serde_path_to_error::deserialize(value).map_err(|e| Error::Config {
        pointer: pointer_of(e.path()),
        message: e.into_inner().to_string(),
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config {
        pointer: "/".into(),
        message: format!("cannot read {}: {e}", path.display()),
    })
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = parse_versioned(&read(path)?)?;
    cfg.validate().map_err(as_config_error)?;
    Ok(cfg)
}

pub fn load_train_recipe(path: &Path) -> Result<TrainRecipe> {
    let recipe: TrainRecipe = parse_versioned(&read(path)?)?;
    recipe.validate()?;
    Ok(recipe)
}

fn as_config_error(e: Error) -> Error {
    match e {
        Error::InvalidArgument(message) => Error::Config {
            pointer: "/".into(),
            message,
        },
        other => other,
    }
}

/// Flat training recipe mirroring the usual hyperparameter tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRecipe {
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(alias = "batch")]
    pub batch_size: usize,
    #[serde(alias = "hidden")]
    pub hidden_dim: usize,
    #[serde(alias = "layers")]
    pub num_layers: usize,
    /// Filter bank activation; the head uses `head_activation`.
    pub activation: Activation,
    pub head_activation: Option<Activation>,
    pub dropout: f64,
    pub betas: Option<Vec<f64>>,
    pub betas_learnable: bool,
    pub beta_init: Option<Vec<f64>>,
    /// Polynomial order `K` of every filter.
    pub order: usize,
    pub aggregation: Aggregation,
    pub skip_k0: bool,
    pub task: Task,
    pub loss: Option<Loss>,
    pub seed: u64,
    /// Time points per input window.
    pub window: usize,
    /// Steps ahead of the window end to forecast.
    pub horizon: usize,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            hidden_dim: 64,
            num_layers: 1,
            activation: Activation::Tanh,
            head_activation: None,
            dropout: 0.0,
            betas: None,
            betas_learnable: false,
            beta_init: None,
            order: 2,
            aggregation: Aggregation::Concatenate,
            skip_k0: false,
            task: Task::Regression,
            loss: None,
            seed: 0,
            window: 10,
            horizon: 1,
        }
    }
}

impl TrainRecipe {
    /// Initial β values: `beta_init` when β is learnable, else `betas`.
    pub fn initial_betas(&self) -> Result<Vec<f64>> {
        let chosen = if self.betas_learnable {
            self.beta_init.as_ref().or(self.betas.as_ref())
        } else {
            self.betas.as_ref()
        };
        match chosen {
            Some(b) if !b.is_empty() => Ok(b.clone()),
            _ => Err(Error::Config {
                pointer: "/betas".into(),
                message: if self.betas_learnable {
                    "learnable betas need beta_init or betas".into()
                } else {
                    "betas are required unless betas_learnable is set with beta_init".into()
                },
            }),
        }
    }

    pub fn loss(&self) -> Loss {
        self.loss.unwrap_or(match self.task {
            Task::Regression => Loss::Mse,
            Task::Classification => Loss::CrossEntropy,
        })
    }

    pub fn head_activation(&self) -> Activation {
        self.head_activation.unwrap_or(self.activation)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: self.loss(),
            dropout: self.dropout,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |pointer: &str, message: &str| {
            Err(Error::Config {
                pointer: pointer.into(),
                message: message.into(),
            })
        };
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("/learning_rate", "must be finite and nonnegative");
        }
        if self.epochs == 0 {
            return fail("/epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("/batch_size", "must be at least 1");
        }
        if self.hidden_dim == 0 {
            return fail("/hidden_dim", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("/dropout", "must lie in [0, 1)");
        }
        if self.window == 0 {
            return fail("/window", "must be at least 1");
        }
        if self.horizon == 0 {
            return fail("/horizon", "must be at least 1");
        }
        if self.num_layers > 0 {
            let betas = self.initial_betas()?;
            if betas.iter().any(|b| !b.is_finite()) {
                return fail("/betas", "must be finite");
            }
        }
        if self.loss() == Loss::CrossEntropy && self.task != Task::Classification {
            return fail("/loss", "cross_entropy requires task classification");
        }
        Ok(())
    }
}
