use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_gradients, Engine, Loss, ModelParams, Sample};
use crate::covariance::CovarianceMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub loss: Loss,
    /// Drop probability on the hidden units of the head.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            loss: Loss::Mse,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and nonnegative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch the returned parameters come from.
    pub best_epoch: usize,
}

/// Mean loss over `samples` without dropout.
pub fn evaluate_loss(m: &ModelParams, c: &CovarianceMatrix, samples: &[Sample], loss: Loss) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate a loss on zero samples"));
    }
    let engine = Engine::new(m, c.decomposition())?;
    let mut total = 0.0;
    for s in samples {
        let out = engine.forward(&s.x, None)?.output;
        total += super::loss_and_grad(loss, m.task, &out, &s.y)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Adam over shuffled minibatches. The covariance stays fixed throughout.
/// Without validation samples, selection falls back to the training loss.
pub fn train(
    m: &ModelParams,
    c: &CovarianceMatrix,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    m.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = m.clone();
    let mut theta = params.to_vec();
    let mut first = vec![0.0; theta.len()];
    let mut second = vec![0.0; theta.len()];
    let (b1, b2) = cfg.adam_betas;
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_loss = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let hidden = params.head.hidden_dim();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let masks: Option<Vec<Vec<f64>>> = (cfg.dropout > 0.0).then(|| {
                let keep = 1.0 - cfg.dropout;
                (0..batch.len())
                    .map(|_| {
                        (0..hidden)
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect()
                    })
                    .collect()
            });
            let (loss, grad) = batch_gradients(&params, c.decomposition(), &batch, cfg.loss, masks.as_deref())
                .map_err(|e| diverged(epoch, e.to_string(), &params))?;
            if !loss.is_finite() {
                return Err(diverged(epoch, format!("non-finite batch loss {loss}"), &params));
            }
            epoch_total += loss * batch.len() as f64;
            step += 1;
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            let g = grad.to_vec();
            let mut next = theta.clone();
            for i in 0..theta.len() {
                first[i] = b1 * first[i] + (1.0 - b1) * g[i];
                second[i] = b2 * second[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = first[i] / c1;
                let v_hat = second[i] / c2;
                next[i] = theta[i] - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(diverged(epoch, "non-finite parameter update".into(), &params));
            }
            theta = next;
            params.set_from_slice(&theta)?;
        }
        let tl = epoch_total / train_set.len() as f64;
        let selection = if val_set.is_empty() {
            evaluate_loss(&params, c, train_set, cfg.loss)
        } else {
            evaluate_loss(&params, c, val_set, cfg.loss)
        }
        .map_err(|e| diverged(epoch, e.to_string(), &params))?;
        if !selection.is_finite() {
            return Err(diverged(epoch, format!("non-finite validation loss {selection}"), &params));
        }
        train_loss.push(tl);
        val_loss.push(selection);
        if best.as_ref().is_none_or(|(b, _, _)| selection < *b) {
            best = Some((selection, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        train_loss,
        val_loss,
        best_epoch,
    })
}

fn diverged(epoch: usize, message: String, last: &ModelParams) -> Error {
    Error::Divergence {
        epoch,
        message,
        last_finite: Box::new(last.clone()),
    }
}
