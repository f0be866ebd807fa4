//! Seeded, configurable experiments producing [`TrialRecord`]s.
//!
//! Trials run in parallel on independent ChaCha streams derived from
//! `(seed, trial)`, and results are collected in trial order, so every
//! experiment is reproducible bit for bit from its config.

mod experiments;
mod records;

pub use experiments::{
    run_betafit_demo, run_discrimination, run_entropy_curve, run_lipschitz, run_regression,
    run_stability, run_surrogate, BetafitDemoConfig, EntropyCurveConfig, LipschitzConfig,
    RegressionConfig, StabilityConfig, SurrogateConfig,
};
pub use records::{
    read_records_csv, records_from_json, records_to_json, summarize, write_records_csv, SummaryRow,
    TrialRecord,
};

use serde::{Deserialize, Serialize};

use crate::entropy::DiscriminationConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Stability(StabilityConfig),
    Lipschitz(LipschitzConfig),
    Surrogate(SurrogateConfig),
    Regression(RegressionConfig),
    EntropyCurve(EntropyCurveConfig),
    Discrimination(DiscriminationConfig),
    BetafitDemo(BetafitDemoConfig),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Stability(_) => "stability",
            ExperimentConfig::Lipschitz(_) => "lipschitz",
            ExperimentConfig::Surrogate(_) => "surrogate",
            ExperimentConfig::Regression(_) => "regression",
            ExperimentConfig::EntropyCurve(_) => "entropy_curve",
            ExperimentConfig::Discrimination(_) => "discrimination",
            ExperimentConfig::BetafitDemo(_) => "betafit_demo",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::Stability(c) => c.seed,
            ExperimentConfig::Lipschitz(c) => c.seed,
            ExperimentConfig::Surrogate(c) => c.seed,
            ExperimentConfig::Regression(c) => c.seed,
            ExperimentConfig::EntropyCurve(c) => c.seed,
            ExperimentConfig::Discrimination(c) => c.seed,
            ExperimentConfig::BetafitDemo(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::Stability(c) => c.seed = seed,
            ExperimentConfig::Lipschitz(c) => c.seed = seed,
            ExperimentConfig::Surrogate(c) => c.seed = seed,
            ExperimentConfig::Regression(c) => c.seed = seed,
            ExperimentConfig::EntropyCurve(c) => c.seed = seed,
            ExperimentConfig::Discrimination(c) => c.seed = seed,
            ExperimentConfig::BetafitDemo(c) => c.seed = seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::Stability(c) => c.validate(),
            ExperimentConfig::Lipschitz(c) => c.validate(),
            ExperimentConfig::Surrogate(c) => c.validate(),
            ExperimentConfig::Regression(c) => c.validate(),
            ExperimentConfig::EntropyCurve(c) => c.validate(),
            ExperimentConfig::Discrimination(_) => Ok(()),
            ExperimentConfig::BetafitDemo(c) => c.validate(),
        }
    }
}

/// Records plus an aggregated JSON summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<TrialRecord>,
    pub summary: serde_json::Value,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg {
        ExperimentConfig::Stability(c) => run_stability(c),
        ExperimentConfig::Lipschitz(c) => run_lipschitz(c),
        ExperimentConfig::Surrogate(c) => run_surrogate(c),
        ExperimentConfig::Regression(c) => run_regression(c),
        ExperimentConfig::EntropyCurve(c) => run_entropy_curve(c),
        ExperimentConfig::Discrimination(c) => run_discrimination(c),
        ExperimentConfig::BetafitDemo(c) => run_betafit_demo(c),
    }
}
