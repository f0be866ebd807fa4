//! Windowed training and prediction on multichannel time series.
//!
//! Rows of the input are time points and columns are channels (graph nodes).
//! Regression windows forecast every channel `horizon` steps after the
//! window; classification windows predict the label column at the window end.
//! The covariance is estimated once on the normalized training rows and
//! stays fixed.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::TrainRecipe;
use crate::covariance::{sample_covariance, CovarianceMatrix, DataMatrix};
use crate::error::{Error, Result};
use crate::network::{
    evaluate_loss, model_predict, train, ModelParams, ModelSpec, Sample, Task, TrainOutcome,
};

pub const CHECKPOINT_VERSION: u32 = 1;
const TRAIN_FRACTION: f64 = 0.6;
const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesData {
    /// `T × m` channel values.
    pub values: DMatrix<f64>,
    /// Class label per time point (classification only).
    pub labels: Option<Vec<usize>>,
}

/// Reads a time series CSV. A first row that does not parse as numbers is
/// treated as a header. For classification the last column holds labels.
pub fn read_series<R: Read>(mut reader: R, task: Task) -> Result<SeriesData> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let has_header = first.split(',').any(|f| f.trim().parse::<f64>().is_err());
    let rows = crate::covariance::read_csv_rows(text.as_bytes(), has_header)?;
    let data = DataMatrix::from_rows(&rows)?;
    let values = data.values();
    match task {
        Task::Regression => Ok(SeriesData {
            values: values.clone(),
            labels: None,
        }),
        Task::Classification => {
            if values.ncols() < 2 {
                return Err(Error::invalid("classification input needs channels plus a label column"));
            }
            let last = values.ncols() - 1;
            let labels = values
                .column(last)
                .iter()
                .map(|v| {
                    if *v >= 0.0 && v.fract() == 0.0 {
                        Ok(*v as usize)
                    } else {
                        Err(Error::invalid(format!("label {v} is not a class index")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SeriesData {
                values: values.columns(0, last).into_owned(),
                labels: Some(labels),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    fn fit(rows: &DMatrix<f64>) -> Self {
        let n = rows.nrows() as f64;
        let mut mean = Vec::with_capacity(rows.ncols());
        let mut std = Vec::with_capacity(rows.ncols());
        for col in rows.column_iter() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            mean.push(mu);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    fn apply(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if values.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: values.ncols(),
            });
        }
        Ok(DMatrix::from_fn(values.nrows(), values.ncols(), |i, j| {
            (values[(i, j)] - self.mean[j]) / self.std[j]
        }))
    }

    fn invert(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Everything `predict` needs, serialized as `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelParams,
    pub covariance: Vec<Vec<f64>>,
    pub window: usize,
    pub horizon: usize,
    pub normalization: Normalization,
    pub recipe: TrainRecipe,
}

impl Checkpoint {
    pub fn covariance_matrix(&self) -> Result<CovarianceMatrix> {
        let m = self.covariance.len();
        if self.covariance.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("checkpoint covariance is not square"));
        }
        CovarianceMatrix::from_matrix(DMatrix::from_fn(m, m, |i, j| self.covariance[i][j]))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("version").and_then(serde_json::Value::as_u64);
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Config {
                pointer: "/version".into(),
                message: format!("unsupported checkpoint version {version:?}"),
            });
        }
        let cp: Checkpoint = serde_json::from_value(value)?;
        cp.model.validate()?;
        cp.recipe.validate()?;
        Ok(cp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
    pub test_metrics: BTreeMap<String, f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

fn build_samples(
    normalized: &DMatrix<f64>,
    labels: Option<&[usize]>,
    window: usize,
    horizon: usize,
) -> Vec<Sample> {
    let t_len = normalized.nrows();
    let m = normalized.ncols();
    let mut samples = Vec::new();
    let lead = if labels.is_some() { 0 } else { horizon };
    if t_len < window + lead {
        return samples;
    }
    for start in 0..=(t_len - window - lead) {
        let x = DMatrix::from_fn(m, window, |i, t| normalized[(start + t, i)]);
        let y = match labels {
            Some(l) => vec![l[start + window - 1] as f64],
            None => normalized.row(start + window - 1 + horizon).iter().copied().collect(),
        };
        samples.push(Sample { x, y });
    }
    samples
}

/// Splits windows chronologically 60/20/20, trains and evaluates on the test split.
pub fn train_forecaster(series: &SeriesData, recipe: &TrainRecipe) -> Result<TrainReport> {
    recipe.validate()?;
    let task = recipe.task;
    if (task == Task::Classification) != series.labels.is_some() {
        return Err(Error::invalid("labels must be present exactly for classification"));
    }
    let t_len = series.values.nrows();
    let m = series.values.ncols();
    let lead = if task == Task::Classification { 0 } else { recipe.horizon };
    let n_windows = (t_len + 1).saturating_sub(recipe.window + lead);
    if n_windows < 5 {
        return Err(Error::InsufficientData(n_windows));
    }
    let n_train = ((n_windows as f64) * TRAIN_FRACTION).floor() as usize;
    let n_val = ((n_windows as f64) * VAL_FRACTION).floor() as usize;
    let n_test = n_windows - n_train - n_val;

    let train_rows = (n_train + recipe.window + lead - 1).min(t_len);
    let raw_train = series.values.rows(0, train_rows).into_owned();
    let normalization = Normalization::fit(&raw_train);
    let normalized = normalization.apply(&series.values)?;
    let covariance = sample_covariance(&DataMatrix::new(normalized.rows(0, train_rows).into_owned())?)?;

    let samples = build_samples(&normalized, series.labels.as_deref(), recipe.window, recipe.horizon);
    debug_assert_eq!(samples.len(), n_windows);
    let (train_set, rest) = samples.split_at(n_train);
    let (val_set, test_set) = rest.split_at(n_val);

    let n_outputs = match &series.labels {
        Some(l) => (l.iter().copied().max().unwrap_or(0) + 1).max(2),
        None => m,
    };
    let betas = if recipe.num_layers > 0 {
        recipe.initial_betas()?
    } else {
        Vec::new()
    };
    let spec = ModelSpec {
        n_nodes: m,
        n_time: recipe.window,
        num_layers: recipe.num_layers,
        order: recipe.order,
        betas,
        betas_learnable: recipe.betas_learnable,
        aggregation: recipe.aggregation,
        activation: recipe.activation,
        skip_k0: recipe.skip_k0,
        hidden_dim: recipe.hidden_dim,
        n_outputs,
        head_activation: recipe.head_activation(),
        task,
    };
    let model = ModelParams::init(&spec, recipe.seed)?;
    let outcome = train(&model, &covariance, train_set, val_set, &recipe.train_config())?;

    let mut test_metrics = BTreeMap::new();
    let loss = recipe.loss();
    test_metrics.insert("test_loss".to_string(), evaluate_loss(&outcome.params, &covariance, test_set, loss)?);
    let xs: Vec<DMatrix<f64>> = test_set.iter().map(|s| s.x.clone()).collect();
    let preds = model_predict(&outcome.params, &covariance, &xs)?;
    match task {
        Task::Classification => {
            let hits = preds
                .iter()
                .zip(test_set)
                .filter(|(p, s)| argmax(p) == s.y[0] as usize)
                .count();
            test_metrics.insert("test_accuracy".to_string(), hits as f64 / test_set.len() as f64);
        }
        Task::Regression => {
            let mut abs = 0.0;
            let mut abs_raw = 0.0;
            for (p, s) in preds.iter().zip(test_set) {
                for (j, (pv, yv)) in p.iter().zip(&s.y).enumerate() {
                    abs += (pv - yv).abs();
                    abs_raw += (normalization.invert(j, *pv) - normalization.invert(j, *yv)).abs();
                }
            }
            let count = (test_set.len() * m) as f64;
            test_metrics.insert("test_mae".to_string(), abs / count);
            test_metrics.insert("test_mae_original_scale".to_string(), abs_raw / count);
        }
    }

    let cm = covariance.matrix();
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: outcome.params.clone(),
        covariance: (0..m).map(|i| (0..m).map(|j| cm[(i, j)]).collect()).collect(),
        window: recipe.window,
        horizon: recipe.horizon,
        normalization,
        recipe: recipe.clone(),
    };
    Ok(TrainReport {
        checkpoint,
        outcome,
        test_metrics,
        n_train,
        n_val,
        n_test,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if *x > best.1 { (i, *x) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub window_start: usize,
    /// Forecast in the original scale, or class scores for classification.
    pub outputs: Vec<f64>,
    /// Observed target when it lies inside the series.
    pub target: Option<Vec<f64>>,
}

/// Predictions for every complete window of `series`, including the final
/// window whose forecast target lies beyond the data.
pub fn predict(cp: &Checkpoint, series: &SeriesData) -> Result<Vec<Prediction>> {
    let task = cp.model.task;
    let normalized = cp.normalization.apply(&series.values)?;
    let t_len = normalized.nrows();
    if t_len < cp.window {
        return Err(Error::InsufficientData(t_len));
    }
    let m = normalized.ncols();
    let starts: Vec<usize> = (0..=(t_len - cp.window)).collect();
    let xs: Vec<DMatrix<f64>> = starts
        .iter()
        .map(|&s| DMatrix::from_fn(m, cp.window, |i, t| normalized[(s + t, i)]))
        .collect();
    let covariance = cp.covariance_matrix()?;
    let outputs = model_predict(&cp.model, &covariance, &xs)?;
    Ok(starts
        .into_iter()
        .zip(outputs)
        .map(|(s, out)| match task {
            Task::Regression => {
                let target_row = s + cp.window - 1 + cp.horizon;
                Prediction {
                    window_start: s,
                    outputs: out.iter().enumerate().map(|(j, v)| cp.normalization.invert(j, *v)).collect(),
                    target: (target_row < t_len).then(|| series.values.row(target_row).iter().copied().collect()),
                }
            }
            Task::Classification => Prediction {
                window_start: s,
                outputs: out,
                target: series
                    .labels
                    .as_ref()
                    .map(|l| vec![l[s + cp.window - 1] as f64]),
            },
        })
        .collect())
}
