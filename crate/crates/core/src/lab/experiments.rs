use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::records::{summarize, TrialRecord};
use super::ExperimentOutput;
use crate::betafit::{fit_beta, kl_to_gibbs, FitConfig};
use crate::covariance::{
    gen_gaussian_data, gen_graph_stationary, sample_covariance, CovarianceMatrix, DataMatrix,
    SpectrumFamily,
};
use crate::density::{density_error_report, density_operator};
use crate::entropy::{cvne, discrimination_experiment, DiscriminationConfig};
use crate::error::{Error, Result};
use crate::filtering::{frequency_response, lipschitz_alpha, FilterSpec};
use crate::rng::{stream_rng, sub_seed};
use crate::spectral::{eigh, operator_norm};

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(msg))
    }
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// Runs `trial` for `0..trials` in parallel and concatenates in trial order.
fn par_trials<F>(trials: usize, trial: F) -> Result<Vec<TrialRecord>>
where
    F: Fn(usize) -> Result<Vec<TrialRecord>> + Sync,
{
    let per_trial = (0..trials)
        .into_par_iter()
        .map(&trial)
        .collect::<Result<Vec<_>>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn mean_by<K: Ord>(
    records: &[TrialRecord],
    metric: &str,
    key: impl Fn(&TrialRecord) -> Option<K>,
) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let (Some(k), Some(v)) = (key(r), r.metrics.get(metric)) {
            let e = acc.entry(k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn count_where(records: &[TrialRecord], pred: impl Fn(&TrialRecord) -> bool) -> usize {
    records.iter().filter(|r| pred(r)).count()
}

fn output<C: Serialize>(
    name: &str,
    cfg: &C,
    records: Vec<TrialRecord>,
    group_params: &[&str],
    extra: serde_json::Value,
) -> Result<ExperimentOutput> {
    for r in &records {
        r.validate()?;
    }
    let summary = json!({
        "experiment": name,
        "config": cfg,
        "n_records": records.len(),
        "groups": summarize(&records, group_params),
        "results": extra,
    });
    Ok(ExperimentOutput { records, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub dim: usize,
    pub n_samples: usize,
    pub betas: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub trials: usize,
    /// Adds the trace-normalized covariance as a β-free baseline.
    pub include_baseline: bool,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            dim: 20,
            n_samples: 100,
            betas: vec![-1.0, -0.1, 0.1, 1.0, 5.0],
            noise_levels: vec![0.01, 0.05, 0.1, 0.2, 0.5],
            trials: 100,
            include_baseline: true,
            seed: 0,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.dim >= 1 && self.n_samples >= 2 && self.trials >= 1, "stability needs dim >= 1, n_samples >= 2, trials >= 1")?;
        require(all_finite(&self.betas) && all_finite(&self.noise_levels), "betas and noise levels must be finite")?;
        require(self.noise_levels.iter().all(|e| *e >= 0.0), "noise levels must be nonnegative")
    }
}

/// Perturbs the data `X' = X + εW` and compares `ρ(C')` with `ρ(C)` under the
/// operator norm, next to the perturbation bound.
pub fn run_stability(cfg: &StabilityConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let records = par_trials(cfg.trials, |trial| {
        let mut rng = stream_rng(cfg.seed, trial as u64);
        let x = gaussian_matrix(&mut rng, cfg.n_samples, cfg.dim);
        let w = gaussian_matrix(&mut rng, cfg.n_samples, cfg.dim);
        let c = sample_covariance(&DataMatrix::new(x.clone())?)?;
        let c_reg = c.shift_regularize();
        let mut out = Vec::new();
        for &noise in &cfg.noise_levels {
            let cp = sample_covariance(&DataMatrix::new(&x + &w * noise)?)?;
            let cp_reg = cp.shift_regularize();
            let dc = cp_reg.matrix() - c_reg.matrix();
            let base = |variant: String| {
                TrialRecord::new("stability", variant, trial, cfg.seed)
                    .param("noise", noise)
                    .param("dim", cfg.dim as f64)
                    .param("n_samples", cfg.n_samples as f64)
            };
            for &beta in &cfg.betas {
                let r = density_error_report(c_reg.matrix(), &dc, beta)?;
                out.push(
                    base(format!("beta={beta}"))
                        .param("beta", beta)
                        .metric("delta_c_norm", r.delta_c_norm)
                        .metric("delta_rho_norm", r.measured_error)
                        .metric("bound", r.bound)
                        .metric("r_ratio", r.r_ratio)
                        .metric("f_factor", r.f_factor)
                        .metric("bound_dominates", f64::from(u8::from(r.dominates())))
                        .metric("r_at_least_one", f64::from(u8::from(r.r_ratio >= 1.0))),
                );
            }
            if cfg.include_baseline {
                let tn = c.trace_normalize()?;
                let tnp = cp.trace_normalize()?;
                out.push(
                    base("trace_normalized".to_string())
                        .metric("delta_c_norm", operator_norm(&(cp.matrix() - c.matrix()))?)
                        .metric("delta_rho_norm", operator_norm(&(tnp.matrix() - tn.matrix()))?),
                );
            }
        }
        Ok(out)
    })?;
    let positive = |r: &TrialRecord| r.params.get("beta").is_some_and(|b| *b > 0.0);
    let flag = |r: &TrialRecord, m: &str| r.metrics.get(m) == Some(&1.0);
    let covered = count_where(&records, |r| positive(r) && flag(r, "r_at_least_one"));
    let dominated = count_where(&records, |r| positive(r) && flag(r, "r_at_least_one") && flag(r, "bound_dominates"));
    let extra = json!({
        "positive_beta_trials_r_at_least_one": covered,
        "positive_beta_bound_dominates": dominated,
        "positive_beta_trials_r_below_one": count_where(&records, |r| positive(r) && !flag(r, "r_at_least_one")),
        "mean_delta_rho_norm": mean_by(&records, "delta_rho_norm", |r| Some(r.variant.clone())),
    });
    output("stability", cfg, records, &["noise"], extra)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzConfig {
    pub pairs: usize,
    pub max_order: usize,
    /// β is drawn uniformly from `[-beta_max, beta_max]`.
    pub beta_max: f64,
    pub max_dim: usize,
    /// Eigenvalues are drawn uniformly from `[0, lambda_max]`.
    pub lambda_max: f64,
    pub seed: u64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            pairs: 10_000,
            max_order: 5,
            beta_max: 2.0,
            max_dim: 8,
            lambda_max: 5.0,
            seed: 0,
        }
    }
}

impl LipschitzConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.pairs >= 1 && self.max_dim >= 2, "lipschitz needs pairs >= 1 and max_dim >= 2")?;
        require(
            self.beta_max.is_finite() && self.beta_max >= 0.0 && self.lambda_max.is_finite() && self.lambda_max > 0.0,
            "beta_max must be finite and nonnegative, lambda_max finite and positive",
        )
    }
}

/// Samples two eigenvalues of one spectrum and a random filter, and records
/// `|h(ρ(λ₂)) − h(ρ(λ₁))| / (α|λ₂ − λ₁|)`. Identical pairs are skipped.
pub fn run_lipschitz(cfg: &LipschitzConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let records = par_trials(cfg.pairs, |trial| {
        let mut rng = stream_rng(cfg.seed, trial as u64);
        let m = rng.random_range(2..=cfg.max_dim);
        let spectrum: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..=cfg.lambda_max)).collect();
        let picks = sample_indices(&mut rng, m, 2);
        let (l1, l2) = (spectrum[picks.index(0)], spectrum[picks.index(1)]);
        let order = rng.random_range(0..=cfg.max_order);
        let coeffs: Vec<f64> = (0..=order).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = if cfg.beta_max > 0.0 {
            rng.random_range(-cfg.beta_max..=cfg.beta_max)
        } else {
            0.0
        };
        let delta_lambda = (l2 - l1).abs();
        if delta_lambda == 0.0 {
            return Ok(Vec::new());
        }
        let z: f64 = spectrum.iter().map(|l| (-beta * l).exp()).sum();
        let f = FilterSpec::new(coeffs, beta)?;
        let delta_response = (frequency_response(&f, l2, z)? - frequency_response(&f, l1, z)?).abs();
        let alpha = lipschitz_alpha(&f);
        let ratio = if alpha > 0.0 {
            delta_response / (alpha * delta_lambda)
        } else if delta_response <= 1e-15 {
            0.0
        } else {
            return Err(Error::invalid(format!(
                "zero-alpha filter changed its response by {delta_response}"
            )));
        };
        let within = delta_response <= alpha * delta_lambda + 1e-12;
        Ok(vec![TrialRecord::new("lipschitz", "random_filter", trial, cfg.seed)
            .param("beta", beta)
            .param("order", order as f64)
            .param("dim", m as f64)
            .metric("alpha", alpha)
            .metric("delta_lambda", delta_lambda)
            .metric("delta_response", delta_response)
            .metric("ratio", ratio)
            .metric("within_bound", f64::from(u8::from(within)))])
    })?;
    let max_ratio = records.iter().map(|r| r.metrics["ratio"]).fold(0.0, f64::max);
    let violations = records.iter().filter(|r| r.metrics["within_bound"] == 0.0).count();
    let extra = json!({
        "max_ratio": max_ratio,
        "evaluated_pairs": records.len(),
        "skipped_pairs": cfg.pairs - records.len(),
        "violations": violations,
    });
    output("lipschitz", cfg, records, &[], extra)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub dim: usize,
    pub sample_sizes: Vec<usize>,
    pub edge_prob: f64,
    /// `a₀..a_K` of the graph filter `g(L) = Σ a_k L^k`.
    pub filter_coeffs: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            sample_sizes: vec![100, 1_000, 10_000, 20_000],
            edge_prob: 0.5,
            filter_coeffs: vec![1.0, 0.5],
            trials: 20,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.dim >= 2 && self.trials >= 1, "surrogate needs dim >= 2 and trials >= 1")?;
        require(
            !self.sample_sizes.is_empty() && self.sample_sizes.iter().all(|n| *n >= 2),
            "sample sizes must be nonempty and at least 2",
        )?;
        require(!self.filter_coeffs.is_empty() && all_finite(&self.filter_coeffs), "filter coefficients must be nonempty and finite")
    }
}

/// Mean matched-eigenvector alignment `|⟨uᵢ, vᵢ⟩|` between the sample
/// covariance of graph-stationary signals and the graph Laplacian.
///
/// The population covariance is `g(L)²`, so Laplacian eigenvectors are
/// matched to covariance eigenvectors by sorting on `g(μ)²`.
pub fn run_surrogate(cfg: &SurrogateConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let records = par_trials(cfg.trials, |trial| {
        let graph_seed = sub_seed(cfg.seed, trial as u64);
        let mut out = Vec::new();
        for &n in &cfg.sample_sizes {
            let (data, laplacian) =
                gen_graph_stationary(cfg.dim, n, cfg.edge_prob, &cfg.filter_coeffs, graph_seed)?;
            let rec = TrialRecord::new("surrogate", format!("n={n}"), trial, graph_seed)
                .param("n_samples", n as f64)
                .param("dim", cfg.dim as f64)
                .param("order", (cfg.filter_coeffs.len() - 1) as f64);
            let lap = eigh(&laplacian)?;
            let h: Vec<f64> = lap
                .eigenvalues()
                .iter()
                .map(|mu| {
                    let g = cfg.filter_coeffs.iter().rev().fold(0.0, |acc, a| acc * mu + a);
                    g * g
                })
                .collect();
            let mut order: Vec<usize> = (0..cfg.dim).collect();
            order.sort_by(|&a, &b| h[a].total_cmp(&h[b]));
            let scale = h.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-300);
            let tied = order.windows(2).any(|w| (h[w[1]] - h[w[0]]).abs() <= 1e-9 * scale);
            if cfg.filter_coeffs.len() == 1 || tied {
                out.push(rec.metric("degenerate", 1.0));
                continue;
            }
            let c = sample_covariance(&data)?;
            let cv = c.decomposition().eigenvectors();
            let alignments: Vec<f64> = order
                .iter()
                .enumerate()
                .map(|(i, &j)| cv.column(i).dot(&lap.eigenvectors().column(j)).abs())
                .collect();
            let mean = alignments.iter().sum::<f64>() / cfg.dim as f64;
            let min = alignments.iter().copied().fold(f64::INFINITY, f64::min);
            out.push(
                rec.metric("degenerate", 0.0)
                    .metric("alignment", mean)
                    .metric("min_alignment", min),
            );
        }
        Ok(out)
    })?;
    let by_n = mean_by(&records, "alignment", |r| r.params.get("n_samples").map(|n| *n as u64));
    let extra = json!({
        "mean_alignment": by_n.iter().map(|(n, a)| (n.to_string(), *a)).collect::<BTreeMap<_, _>>(),
        "degenerate_trials": count_where(&records, |r| r.metrics.get("degenerate") == Some(&1.0)),
    });
    output("surrogate", cfg, records, &["n_samples"], extra)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub dim: usize,
    pub informative: usize,
    /// True weights of informative features are drawn from `U(0, weight_scale)`.
    pub weight_scale: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub cov_sample_sizes: Vec<usize>,
    pub betas: Vec<f64>,
    pub noise_levels: Vec<f64>,
    pub ridge: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            informative: 3,
            weight_scale: 100.0,
            n_train: 100,
            n_test: 500,
            cov_sample_sizes: vec![20, 100, 1_000],
            betas: vec![0.1, 1.0, 5.0, 15.0],
            noise_levels: vec![0.0, 5.0],
            ridge: 1.0,
            trials: 100,
            seed: 0,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        require(
            self.dim >= 1 && self.informative <= self.dim && self.n_train >= 2 && self.n_test >= 1 && self.trials >= 1,
            "regression needs dim >= 1, informative <= dim, n_train >= 2, n_test >= 1, trials >= 1",
        )?;
        require(self.cov_sample_sizes.iter().all(|n| *n >= 2), "covariance sample sizes must be at least 2")?;
        require(
            all_finite(&self.betas) && self.betas.iter().all(|b| *b != 0.0),
            "regression betas must be finite and nonzero",
        )?;
        require(
            all_finite(&self.noise_levels) && self.noise_levels.iter().all(|e| *e >= 0.0),
            "noise levels must be finite and nonnegative",
        )?;
        require(
            self.ridge.is_finite() && self.ridge > 0.0 && self.weight_scale.is_finite() && self.weight_scale >= 0.0,
            "ridge must be positive and weight_scale nonnegative",
        )
    }
}

/// Ridge regression on centered features; returns test predictions.
fn ridge_predict(train: &DMatrix<f64>, y: &DVector<f64>, test: &DMatrix<f64>, ridge: f64) -> Result<DVector<f64>> {
    let mean = train.row_mean();
    let y_mean = y.mean();
    let mut centered = train.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let d = train.ncols();
    let gram = centered.tr_mul(&centered) + DMatrix::identity(d, d) * ridge;
    let rhs = centered.tr_mul(&y.add_scalar(-y_mean));
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("ridge system is not positive definite"))?
        .solve(&rhs);
    let mut test_centered = test.clone();
    for mut row in test_centered.row_iter_mut() {
        row -= &mean;
    }
    Ok((test_centered * coef).add_scalar(y_mean))
}

fn mae(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).abs().mean()
}

/// Feature transform `x ↦ T x / ||T||` with `T = ρ_β(Ĉ) − I/Z`.
fn shifted_density_transform(c: &CovarianceMatrix, beta: f64) -> Result<DMatrix<f64>> {
    let rho = density_operator(c, beta)?;
    let inv_z = (-rho.log_partition()).exp();
    let shifted = rho.density_eigenvalues().map(|p| p - inv_z);
    let norm = shifted.amax();
    if !(norm > 0.0) {
        return Err(Error::DegenerateCovariance(norm));
    }
    Ok(rho.basis().matrix_from_values(&(shifted / norm)))
}

/// Linear regression on covariance-filtered features. The raw-covariance
/// variant uses `Ĉ/||Ĉ||`; the density variants use `ρ_β(Ĉ) − I/Z`, also
/// normalized. All variants of a trial share the same data.
pub fn run_regression(cfg: &RegressionConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let records = par_trials(cfg.trials, |trial| {
        let mut rng = stream_rng(cfg.seed, trial as u64);
        let mut w = DVector::zeros(cfg.dim);
        for i in sample_indices(&mut rng, cfg.dim, cfg.informative) {
            w[i] = if cfg.weight_scale > 0.0 {
                rng.random_range(0.0..cfg.weight_scale)
            } else {
                0.0
            };
        }
        let x_train = gaussian_matrix(&mut rng, cfg.n_train, cfg.dim);
        let x_test = gaussian_matrix(&mut rng, cfg.n_test, cfg.dim);
        let e_train = gaussian_matrix(&mut rng, cfg.n_train, 1).column(0).into_owned();
        let e_test = gaussian_matrix(&mut rng, cfg.n_test, 1).column(0).into_owned();
        let covs = cfg
            .cov_sample_sizes
            .iter()
            .map(|&n| sample_covariance(&DataMatrix::new(gaussian_matrix(&mut rng, n, cfg.dim))?))
            .collect::<Result<Vec<_>>>()?;

        let mut out = Vec::new();
        for &noise in &cfg.noise_levels {
            let y_train = &x_train * &w + &e_train * noise;
            let y_test = &x_test * &w + &e_test * noise;
            let baseline = mae(&DVector::from_element(cfg.n_test, y_train.mean()), &y_test);
            let y_mean = y_test.mean();
            let target_std = (y_test.map(|v| (v - y_mean).powi(2)).sum() / cfg.n_test as f64).sqrt();
            for (&n_cov, c) in cfg.cov_sample_sizes.iter().zip(&covs) {
                let mut transforms = vec![("vnn".to_string(), f64::NAN, {
                    let norm = c.norm();
                    if !(norm > 0.0) {
                        return Err(Error::DegenerateCovariance(norm));
                    }
                    c.matrix() / norm
                })];
                for &beta in &cfg.betas {
                    transforms.push((format!("cdnn_beta={beta}"), beta, shifted_density_transform(c, beta)?));
                }
                for (variant, beta, t) in transforms {
                    let pred = ridge_predict(&(&x_train * &t), &y_train, &(&x_test * &t), cfg.ridge)?;
                    let mut rec = TrialRecord::new("regression", variant, trial, cfg.seed)
                        .param("noise", noise)
                        .param("n_cov", n_cov as f64);
                    if beta.is_finite() {
                        rec = rec.param("beta", beta);
                    }
                    out.push(
                        rec.metric("mae", mae(&pred, &y_test))
                            .metric("baseline_mae", baseline)
                            .metric("target_std", target_std),
                    );
                }
            }
        }
        Ok(out)
    })?;
    let means = mean_by(&records, "mae", |r| {
        Some((format!("noise={}", r.params["noise"]), format!("n_cov={}", r.params["n_cov"]), r.variant.clone()))
    });
    let mut table: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
    for ((noise, n_cov, variant), v) in means {
        table.entry(noise).or_default().entry(n_cov).or_default().insert(variant, v);
    }
    output("regression", cfg, records, &["noise", "n_cov"], json!({ "mean_mae": table }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyCurveConfig {
    pub dim: usize,
    pub n_samples: usize,
    pub betas: Vec<f64>,
    pub families: Vec<SpectrumFamily>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for EntropyCurveConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            n_samples: 200,
            betas: (0..=30).map(|i| i as f64 * 0.5).collect(),
            families: SpectrumFamily::ALL.to_vec(),
            trials: 10,
            seed: 0,
        }
    }
}

impl EntropyCurveConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.dim >= 1 && self.n_samples >= 2 && self.trials >= 1, "entropy curve needs dim >= 1, n_samples >= 2, trials >= 1")?;
        require(!self.betas.is_empty() && all_finite(&self.betas), "betas must be nonempty and finite")?;
        require(!self.families.is_empty(), "at least one spectrum family is required")
    }
}

/// CVNE over a β grid for sample covariances of each data family. Each curve
/// is checked for being nonincreasing over its `β >= 0` points.
pub fn run_entropy_curve(cfg: &EntropyCurveConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let n_fam = cfg.families.len() as u64;
    let records = par_trials(cfg.trials, |trial| {
        let mut out = Vec::new();
        for (fi, &family) in cfg.families.iter().enumerate() {
            let seed = sub_seed(cfg.seed, trial as u64 * n_fam + fi as u64);
            let c = sample_covariance(&gen_gaussian_data(cfg.dim, cfg.n_samples, family, seed)?)?;
            let mut points = cfg
                .betas
                .iter()
                .map(|&beta| cvne(&c, beta))
                .collect::<Result<Vec<_>>>()?;
            let mut sorted: Vec<(f64, f64)> = points
                .iter()
                .filter(|r| r.beta >= 0.0)
                .map(|r| (r.beta, r.entropy_nats))
                .collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let monotone = sorted.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12);
            let max_entropy = (cfg.dim as f64).ln();
            for r in points.drain(..) {
                out.push(
                    TrialRecord::new("entropy_curve", family.name(), trial, seed)
                        .param("beta", r.beta)
                        .param("dim", cfg.dim as f64)
                        .metric("entropy_nats", r.entropy_nats)
                        .metric("entropy_bits", r.entropy_bits)
                        .metric("within_bounds", f64::from(u8::from(r.entropy_nats >= 0.0 && r.entropy_nats <= max_entropy + 1e-12)))
                        .metric("curve_nonincreasing", f64::from(u8::from(monotone))),
                );
            }
        }
        Ok(out)
    })?;
    let extra = json!({
        "points": records.len(),
        "out_of_bounds": count_where(&records, |r| r.metrics["within_bounds"] != 1.0),
        "increasing_curves": count_where(&records, |r| r.metrics["curve_nonincreasing"] != 1.0) / cfg.betas.len(),
    });
    output("entropy_curve", cfg, records, &["beta"], extra)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BetafitDemoConfig {
    pub dim: usize,
    /// Samples behind the noisy covariance estimate.
    pub n_samples: usize,
    /// True eigenvalues are drawn from `U(lambda_min, lambda_max)`.
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub grid_checks: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BetafitDemoConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            n_samples: 50,
            lambda_min: 0.5,
            lambda_max: 5.0,
            grid_checks: 50,
            trials: 20,
            seed: 0,
        }
    }
}

impl BetafitDemoConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.dim >= 2 && self.n_samples >= 2 && self.trials >= 1, "betafit demo needs dim >= 2, n_samples >= 2, trials >= 1")?;
        require(
            self.lambda_min.is_finite() && self.lambda_max.is_finite() && 0.0 < self.lambda_min && self.lambda_min < self.lambda_max,
            "need 0 < lambda_min < lambda_max",
        )
    }
}

/// Fits β on a noisy eigenvalue estimate against the trace-normalized true
/// spectrum and compares the fitted KL divergence with random other β.
pub fn run_betafit_demo(cfg: &BetafitDemoConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let records = par_trials(cfg.trials, |trial| {
        let mut rng = stream_rng(cfg.seed, trial as u64);
        let mut truth: Vec<f64> = (0..cfg.dim)
            .map(|_| rng.random_range(cfg.lambda_min..cfg.lambda_max))
            .collect();
        truth.sort_by(f64::total_cmp);
        let total: f64 = truth.iter().sum();
        let target: Vec<f64> = truth.iter().map(|l| l / total).collect();
        let z = gaussian_matrix(&mut rng, cfg.n_samples, cfg.dim);
        let x = DMatrix::from_fn(cfg.n_samples, cfg.dim, |i, j| z[(i, j)] * truth[j].sqrt());
        let noisy = sample_covariance(&DataMatrix::new(x)?)?;
        let spectrum: Vec<f64> = noisy.eigenvalues().iter().copied().collect();
        let fit = fit_beta(&spectrum, &target, &FitConfig::default())?;
        let kl_star = kl_to_gibbs(&spectrum, &target, fit.beta_star)?;
        let span = 4.0 * fit.beta_star.abs().max(1.0);
        let mut minimal = true;
        for _ in 0..cfg.grid_checks {
            let b = rng.random_range(-span..span);
            if kl_to_gibbs(&spectrum, &target, b)? < kl_star - 1e-12 {
                minimal = false;
            }
        }
        Ok(vec![TrialRecord::new("betafit_demo", "noisy_spectrum", trial, cfg.seed)
            .param("dim", cfg.dim as f64)
            .param("n_samples", cfg.n_samples as f64)
            .metric("beta_star", fit.beta_star)
            .metric("objective", fit.objective_value)
            .metric("gradient", fit.gradient_at_solution)
            .metric("curvature", fit.curvature_at_solution)
            .metric("iterations", fit.iterations as f64)
            .metric("kl_at_beta_star", kl_star)
            .metric("kl_at_zero", kl_to_gibbs(&spectrum, &target, 0.0)?)
            .metric("beats_random_betas", f64::from(u8::from(minimal)))])
    })?;
    let extra = json!({
        "max_abs_gradient": records.iter().map(|r| r.metrics["gradient"].abs()).fold(0.0, f64::max),
        "beats_random_betas": count_where(&records, |r| r.metrics["beats_random_betas"] == 1.0),
        "trials": records.len(),
    });
    output("betafit_demo", cfg, records, &[], extra)
}

/// Windowed two-regime classification by naive entropy and CVNE.
pub fn run_discrimination(cfg: &DiscriminationConfig) -> Result<ExperimentOutput> {
    let result = discrimination_experiment(cfg)?;
    let records = result
        .windows
        .iter()
        .map(|w| {
            TrialRecord::new("discrimination", format!("regime={}", w.regime), w.window_index, cfg.seed)
                .param("regime", f64::from(w.regime))
                .param("beta", cfg.beta)
                .param("window", cfg.window as f64)
                .metric("s_naive_bits", w.s_naive_bits)
                .metric("s_vne_bits", w.s_vne_bits)
        })
        .collect();
    let extra = json!({ "auc_naive": result.auc_naive, "auc_vne": result.auc_vne });
    output("discrimination", cfg, records, &[], extra)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group_mean(out: &ExperimentOutput, variant: &str, metric: &str, filter: &[(&str, f64)]) -> f64 {
        let vals: Vec<f64> = out
            .records
            .iter()
            .filter(|r| r.variant == variant && filter.iter().all(|(k, v)| r.params.get(*k) == Some(v)))
            .map(|r| r.metrics[metric])
            .collect();
        assert!(!vals.is_empty(), "no records for {variant}");
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn stability_trivial_rows() {
        let cfg = StabilityConfig {
            dim: 6,
            n_samples: 30,
            betas: vec![-0.5, 0.0, 1.0],
            noise_levels: vec![0.0, 0.1],
            trials: 4,
            ..Default::default()
        };
        let out = run_stability(&cfg).unwrap();
        assert_eq!(out.records.len(), 4 * 2 * 4);
        for r in &out.records {
            if r.params["noise"] == 0.0 {
                assert_eq!(r.metrics["delta_c_norm"], 0.0);
                assert_eq!(r.metrics["delta_rho_norm"], 0.0);
            }
            if r.params.get("beta") == Some(&0.0) {
                assert_eq!(r.metrics["delta_rho_norm"], 0.0);
            }
            if r.params.get("beta").is_some_and(|b| *b > 0.0) {
                assert_eq!(r.metrics["bound_dominates"], 1.0);
            }
        }
    }

    #[test]
    fn stability_trend_over_trials() {
        let cfg = StabilityConfig {
            trials: 100,
            ..Default::default()
        };
        let out = run_stability(&cfg).unwrap();
        for &noise in &cfg.noise_levels {
            let m = |b: f64| group_mean(&out, &format!("beta={b}"), "delta_rho_norm", &[("noise", noise)]);
            assert!(m(0.1) <= m(1.0) && m(1.0) <= m(5.0), "noise {noise}");
            assert!(m(-0.1) <= m(-1.0), "noise {noise}");
            assert!(m(-1.0) >= m(1.0) && m(-0.1) >= m(0.1), "noise {noise}");
        }
    }

    #[test]
    fn lipschitz_sweep_is_bounded() {
        let out = run_lipschitz(&LipschitzConfig {
            pairs: 2_000,
            ..Default::default()
        })
        .unwrap();
        assert!(out.summary["results"]["max_ratio"].as_f64().unwrap() <= 1.0 + 1e-9);
        assert_eq!(out.summary["results"]["violations"], 0);
        // order-0 filters have α = 0 and a flat response
        assert!(out
            .records
            .iter()
            .filter(|r| r.params["order"] == 0.0)
            .all(|r| r.metrics["delta_response"] == 0.0 && r.metrics["ratio"] == 0.0));
    }

    #[test]
    fn surrogate_flags_constant_filter() {
        let out = run_surrogate(&SurrogateConfig {
            filter_coeffs: vec![2.0],
            sample_sizes: vec![50],
            trials: 2,
            ..Default::default()
        })
        .unwrap();
        assert!(out.records.iter().all(|r| r.metrics["degenerate"] == 1.0 && !r.metrics.contains_key("alignment")));
    }

    #[test]
    fn surrogate_converges() {
        let out = run_surrogate(&SurrogateConfig {
            sample_sizes: vec![100, 100_000],
            trials: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(group_mean(&out, "n=100000", "alignment", &[]) >= 0.95);
    }

    #[test]
    fn regression_zero_weights_match_baseline() {
        let out = run_regression(&RegressionConfig {
            weight_scale: 0.0,
            noise_levels: vec![0.0],
            trials: 3,
            ..Default::default()
        })
        .unwrap();
        for r in &out.records {
            assert_eq!(r.metrics["mae"], 0.0);
            assert_eq!(r.metrics["baseline_mae"], 0.0);
            assert_eq!(r.metrics["target_std"], 0.0);
        }
    }

    #[test]
    fn entropy_curves_are_monotone() {
        let out = run_entropy_curve(&EntropyCurveConfig {
            trials: 3,
            ..Default::default()
        })
        .unwrap();
        for r in &out.records {
            assert_eq!(r.metrics["curve_nonincreasing"], 1.0);
            assert_eq!(r.metrics["within_bounds"], 1.0);
            if r.params["beta"] == 0.0 {
                assert!((r.metrics["entropy_nats"] - 10f64.ln()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn betafit_demo_finds_kl_minimum() {
        let out = run_betafit_demo(&BetafitDemoConfig {
            trials: 5,
            ..Default::default()
        })
        .unwrap();
        for r in &out.records {
            assert_eq!(r.metrics["beats_random_betas"], 1.0);
            assert!(r.metrics["kl_at_beta_star"] <= r.metrics["kl_at_zero"] + 1e-12);
        }
    }

    #[test]
    fn experiments_are_reproducible() {
        let cfg = RegressionConfig {
            trials: 4,
            ..Default::default()
        };
        assert_eq!(run_regression(&cfg).unwrap(), run_regression(&cfg).unwrap());
        let cfg = LipschitzConfig {
            pairs: 300,
            ..Default::default()
        };
        assert_eq!(run_lipschitz(&cfg).unwrap(), run_lipschitz(&cfg).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(run_stability(&StabilityConfig { trials: 0, ..Default::default() }).is_err());
        assert!(run_regression(&RegressionConfig { informative: 11, ..Default::default() }).is_err());
        assert!(run_entropy_curve(&EntropyCurveConfig { betas: vec![], ..Default::default() }).is_err());
    }
}
