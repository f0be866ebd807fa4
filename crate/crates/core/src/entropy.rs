//! Multiscale von Neumann entropy of covariance matrices (CVNE).
//!
//! `S_β(C)` is the Shannon entropy of the eigenvalues of `ρ(C)`. Internally
//! everything is in nats; bits are derived for reporting.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{sample_covariance, CovarianceMatrix, DataMatrix};
use crate::density::density_operator;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub beta: f64,
    pub entropy_nats: f64,
    pub entropy_bits: f64,
    pub gibbs_form_nats: f64,
    pub source_dim: usize,
    pub source_rank_estimate: usize,
}

fn rank_estimate(c: &CovarianceMatrix) -> usize {
    let tol = 1e-10 * c.norm().max(1.0);
    c.eigenvalues().iter().filter(|l| **l > tol).count()
}

/// `-Σ ρᵢ ln ρᵢ` over the density eigenvalues, alongside the Gibbs form.
pub fn cvne(c: &CovarianceMatrix, beta: f64) -> Result<EntropyReport> {
    let rho = density_operator(c, beta)?;
    let entropy_nats: f64 = -rho
        .density_eigenvalues()
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    let entropy_nats = entropy_nats.max(0.0);
    Ok(EntropyReport {
        beta,
        entropy_nats,
        entropy_bits: entropy_nats / std::f64::consts::LN_2,
        gibbs_form_nats: beta * rho.mean_energy() + rho.log_partition(),
        source_dim: c.dim(),
        source_rank_estimate: rank_estimate(c),
    })
}

/// `β Tr[Cρ] + ln Z`.
pub fn gibbs_entropy(c: &CovarianceMatrix, beta: f64) -> Result<f64> {
    let rho = density_operator(c, beta)?;
    Ok(beta * rho.mean_energy() + rho.log_partition())
}

/// Shannon entropy (bits) of the trace-normalized spectrum `λᵢ / tr C`.
pub fn naive_entropy(c: &CovarianceMatrix) -> Result<f64> {
    let clipped: Vec<f64> = c.eigenvalues().iter().map(|l| l.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateCovariance(total));
    }
    let h: f64 = -clipped
        .iter()
        .map(|l| l / total)
        .filter(|p| *p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubadditivityCheck {
    /// Entropy of the sum, nats.
    pub lhs: f64,
    /// Sum of individual entropies, nats.
    pub rhs: f64,
    pub holds: bool,
    /// Minimum-eigenvalue shifts applied to each input.
    pub shifts: Vec<f64>,
}

/// Compares `S(Σ Cⱼ)` with `Σ S(Cⱼ)` after shifting each matrix to minimum eigenvalue zero.
pub fn check_subadditivity(cs: &[CovarianceMatrix], beta: f64) -> Result<SubadditivityCheck> {
    let first = cs
        .first()
        .ok_or_else(|| Error::invalid("need at least one covariance matrix"))?;
    let dim = first.dim();
    let mut shifted = Vec::with_capacity(cs.len());
    for c in cs {
        if c.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: c.dim(),
            });
        }
        shifted.push(c.shift_regularize());
    }
    let mut sum = shifted[0].clone();
    for c in &shifted[1..] {
        sum = sum.add(c)?;
    }
    let lhs = cvne(&sum.shift_regularize(), beta)?.entropy_nats;
    let rhs = shifted
        .iter()
        .map(|c| cvne(c, beta).map(|r| r.entropy_nats))
        .sum::<Result<f64>>()?;
    Ok(SubadditivityCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
        shifts: shifted.iter().map(|c| c.min_eig_shift()).collect(),
    })
}

/// Area under the ROC curve of a 1-D score, oriented so the better of the
/// two threshold directions is reported (result is in `[0.5, 1]`).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over ties
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    let auc = u / (n_pos as f64 * n_neg as f64);
    Ok(auc.max(1.0 - auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminationConfig {
    pub window: usize,
    pub n_windows: usize,
    pub beta: f64,
    pub regime_scale: [f64; 3],
    /// Diagonal spectrum of regime 1; regime 2 multiplies it by `regime_scale`.
    pub base_spectrum: [f64; 3],
    pub seed: u64,
}

impl Default for DiscriminationConfig {
    fn default() -> Self {
        Self {
            window: 128,
            n_windows: 500,
            beta: 2.0,
            regime_scale: [1.3, 1.2, 1.1],
            base_spectrum: [1.0, 1.0, 0.0],
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window_index: usize,
    pub regime: u8,
    pub s_naive_bits: f64,
    pub s_vne_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationResult {
    pub auc_naive: f64,
    pub auc_vne: f64,
    pub windows: Vec<WindowRecord>,
}

/// Classifies windows of two 3-dimensional Gaussian regimes by naive entropy
/// and by CVNE, reporting the threshold-sweep AUC of each score.
pub fn discrimination_experiment(config: &DiscriminationConfig) -> Result<DiscriminationResult> {
    const DIM: usize = 3;
    if config.window < DIM + 1 {
        return Err(Error::invalid(format!(
            "window {} too small, need at least {}",
            config.window,
            DIM + 1
        )));
    }
    if config.n_windows == 0 {
        return Err(Error::invalid("n_windows must be positive"));
    }
    if config
        .base_spectrum
        .iter()
        .chain(config.regime_scale.iter())
        .any(|v| !v.is_finite() || *v < 0.0)
    {
        return Err(Error::invalid("spectrum and scales must be finite and nonnegative"));
    }
    let regime_sd = |regime: u8| -> [f64; DIM] {
        let mut sd = [0.0; DIM];
        for i in 0..DIM {
            let var = if regime == 0 {
                config.base_spectrum[i]
            } else {
                config.base_spectrum[i] * config.regime_scale[i]
            };
            sd[i] = var.sqrt();
        }
        sd
    };

    let total = 2 * config.n_windows;
    let windows = (0..total)
        .into_par_iter()
        .map(|window_index| {
            let regime = u8::from(window_index >= config.n_windows);
            let sd = regime_sd(regime);
            let mut rng = stream_rng(config.seed, window_index as u64);
            let mut rows = Vec::with_capacity(config.window);
            for _ in 0..config.window {
                rows.push(
                    (0..DIM)
                        .map(|i| sd[i] * rng.sample::<f64, _>(StandardNormal))
                        .collect::<Vec<f64>>(),
                );
            }
            let c = sample_covariance(&DataMatrix::from_rows(&rows)?)?;
            Ok(WindowRecord {
                window_index,
                regime,
                s_naive_bits: naive_entropy(&c)?,
                s_vne_bits: cvne(&c, config.beta)?.entropy_bits,
            })
        })
        .collect::<Result<Vec<WindowRecord>>>()?;

    let labels: Vec<bool> = windows.iter().map(|w| w.regime == 1).collect();
    let naive: Vec<f64> = windows.iter().map(|w| w.s_naive_bits).collect();
    let vne: Vec<f64> = windows.iter().map(|w| w.s_vne_bits).collect();
    Ok(DiscriminationResult {
        auc_naive: roc_auc(&naive, &labels)?,
        auc_vne: roc_auc(&vne, &labels)?,
        windows,
    })
}
