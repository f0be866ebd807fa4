//! Trainable covariance density networks: perceptrons, multi-scale filter
//! bank layers, a flatten + MLP head, analytic gradients and Adam training.
//!
//! Inputs are `n_nodes × n_time` signal matrices. Every time point is filtered
//! independently as a graph signal over the fixed covariance eigenbasis; the
//! layer outputs for all time points are then flattened into the head.

mod train;

pub use train::{evaluate_loss, train, TrainConfig, TrainOutcome};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceMatrix;
use crate::density::{check_overflow, gibbs_weights, DensityOperator};
use crate::error::{Error, Result};
use crate::filtering::{filter_apply, FilterSpec};
use crate::spectral::SpectralDecomposition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Elu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Concatenate,
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Mae,
    CrossEntropy,
}

/// One multi-scale filter bank layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    pub f_in: usize,
    pub f_out: usize,
    /// `coeffs[s][g]` holds `h₀..h_K` of the filter from input `g` to scale `s`.
    pub coeffs: Vec<Vec<Vec<f64>>>,
    pub betas: Vec<f64>,
    pub betas_learnable: bool,
    pub aggregation: Aggregation,
    pub activation: Activation,
    #[serde(default)]
    pub skip_k0: bool,
}

impl LayerParams {
    pub fn output_channels(&self) -> usize {
        match self.aggregation {
            Aggregation::Concatenate => self.f_out,
            Aggregation::Sum | Aggregation::Mean => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_in == 0 || self.f_out == 0 {
            return Err(Error::invalid("layer needs f_in >= 1 and f_out >= 1"));
        }
        if self.betas.len() != self.f_out {
            return Err(Error::DimensionMismatch {
                expected: self.f_out,
                got: self.betas.len(),
            });
        }
        if self.betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer betas"));
        }
        if self.coeffs.len() != self.f_out || self.coeffs.iter().any(|row| row.len() != self.f_in) {
            return Err(Error::invalid(format!(
                "layer coefficients must be shaped {}x{}",
                self.f_out, self.f_in
            )));
        }
        let order = self.coeffs[0][0].len();
        for h in self.coeffs.iter().flatten() {
            if h.is_empty() || h.len() != order {
                return Err(Error::invalid("all filters of a layer need the same nonzero length"));
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("layer coefficients"));
            }
        }
        Ok(())
    }

    fn first_k(&self) -> usize {
        usize::from(self.skip_k0)
    }

    fn filter(&self, s: usize, g: usize) -> Result<FilterSpec> {
        Ok(FilterSpec::new(self.coeffs[s][g].clone(), self.betas[s])?.with_skip_k0(self.skip_k0))
    }

    fn poly(&self, h: &[f64], p: f64) -> f64 {
        let mut acc = 0.0;
        let mut power = 1.0;
        for (k, hk) in h.iter().enumerate() {
            if k >= self.first_k() {
                acc += hk * power;
            }
            power *= p;
        }
        acc
    }

    fn poly_derivative(&self, h: &[f64], p: f64) -> f64 {
        let mut acc = 0.0;
        let mut power = 1.0;
        for (k, hk) in h.iter().enumerate().skip(1) {
            acc += k as f64 * hk * power;
            power *= p;
        }
        acc
    }
}

/// Fully-connected head: `out = W₂ σ(W₁ f + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Head {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

impl Head {
    pub fn hidden_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.b2.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub n_nodes: usize,
    pub n_time: usize,
    pub layers: Vec<LayerParams>,
    pub head: Head,
    pub task: Task,
}

/// Architecture description used to initialize a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n_nodes: usize,
    pub n_time: usize,
    pub num_layers: usize,
    /// Coefficients per filter are `h₀..h_order`.
    pub order: usize,
    pub betas: Vec<f64>,
    pub betas_learnable: bool,
    pub aggregation: Aggregation,
    pub activation: Activation,
    pub skip_k0: bool,
    pub hidden_dim: usize,
    pub n_outputs: usize,
    pub head_activation: Activation,
    pub task: Task,
}

/// A training example: `x` is `n_nodes × n_time`; `y` holds regression
/// targets or, for classification, the class index in `y[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl ModelParams {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.num_layers > 0 && spec.betas.is_empty() {
            return Err(Error::invalid("a filter bank layer needs at least one beta"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.num_layers);
        let mut channels = 1;
        for _ in 0..spec.num_layers {
            let f_out = spec.betas.len();
            let bound = 1.0 / ((channels * (spec.order + 1)) as f64).sqrt();
            let coeffs = (0..f_out)
                .map(|_| {
                    (0..channels)
                        .map(|_| {
                            (0..=spec.order)
                                .map(|_| rng.random_range(-bound..bound))
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let layer = LayerParams {
                f_in: channels,
                f_out,
                coeffs,
                betas: spec.betas.clone(),
                betas_learnable: spec.betas_learnable,
                aggregation: spec.aggregation,
                activation: spec.activation,
                skip_k0: spec.skip_k0,
            };
            channels = layer.output_channels();
            layers.push(layer);
        }
        let features = channels * spec.n_nodes * spec.n_time;
        let mut dense = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            (0..rows)
                .map(|_| (0..cols).map(|_| rng.random_range(-bound..bound)).collect())
                .collect()
        };
        let w1 = dense(spec.hidden_dim, features);
        let w2 = dense(spec.n_outputs, spec.hidden_dim);
        let model = ModelParams {
            n_nodes: spec.n_nodes,
            n_time: spec.n_time,
            layers,
            head: Head {
                w1,
                b1: vec![0.0; spec.hidden_dim],
                w2,
                b2: vec![0.0; spec.n_outputs],
                activation: spec.head_activation,
            },
            task: spec.task,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(1, LayerParams::output_channels)
    }

    pub fn feature_dim(&self) -> usize {
        self.output_channels() * self.n_nodes * self.n_time
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.n_time == 0 {
            return Err(Error::invalid("model needs n_nodes >= 1 and n_time >= 1"));
        }
        let mut channels = 1;
        for layer in &self.layers {
            layer.validate()?;
            if layer.f_in != channels {
                return Err(Error::DimensionMismatch {
                    expected: channels,
                    got: layer.f_in,
                });
            }
            channels = layer.output_channels();
        }
        let h = &self.head;
        let features = self.feature_dim();
        if h.hidden_dim() == 0 || h.n_outputs() == 0 {
            return Err(Error::invalid("head needs hidden_dim >= 1 and at least one output"));
        }
        if h.w1.len() != h.hidden_dim() || h.w1.iter().any(|r| r.len() != features) {
            return Err(Error::invalid(format!(
                "head w1 must be {}x{features}",
                h.hidden_dim()
            )));
        }
        if h.w2.len() != h.n_outputs() || h.w2.iter().any(|r| r.len() != h.hidden_dim()) {
            return Err(Error::invalid(format!(
                "head w2 must be {}x{}",
                h.n_outputs(),
                h.hidden_dim()
            )));
        }
        if self.task == Task::Classification && h.n_outputs() < 2 {
            return Err(Error::invalid("classification needs at least two outputs"));
        }
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    /// Visits every trainable scalar in a fixed order (layer coefficients,
    /// learnable betas, then head weights and biases).
    fn visit<F: FnMut(&mut f64)>(&mut self, mut f: F) {
        for layer in &mut self.layers {
            for h in layer.coeffs.iter_mut().flatten().flatten() {
                f(h);
            }
            if layer.betas_learnable {
                for b in &mut layer.betas {
                    f(b);
                }
            }
        }
        let head = &mut self.head;
        for v in head.w1.iter_mut().flatten() {
            f(v);
        }
        for v in &mut head.b1 {
            f(v);
        }
        for v in head.w2.iter_mut().flatten() {
            f(v);
        }
        for v in &mut head.b2 {
            f(v);
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.clone().visit(|_| n += 1);
        n
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().visit(|v| out.push(*v));
        out
    }

    pub fn set_from_slice(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.num_parameters();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        let mut it = values.iter();
        self.visit(|v| *v = *it.next().expect("length checked"));
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit(|v| *v = 0.0);
        z
    }
}

/// `σ(H(ρ)x)`.
pub fn perceptron_forward(
    f: &FilterSpec,
    rho: &DensityOperator,
    activation: Activation,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(filter_apply(f, rho, x)?.map(|v| activation.apply(v)))
}

/// One filter bank layer: `y_s = σ(Σ_g H_{s,g}(ρ_s) x_g)` aggregated over scales.
pub fn layer_forward(
    p: &LayerParams,
    rho_per_beta: &[DensityOperator],
    x_in: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    p.validate()?;
    if rho_per_beta.len() != p.f_out {
        return Err(Error::DimensionMismatch {
            expected: p.f_out,
            got: rho_per_beta.len(),
        });
    }
    if x_in.len() != p.f_in {
        return Err(Error::DimensionMismatch {
            expected: p.f_in,
            got: x_in.len(),
        });
    }
    let mut scales = Vec::with_capacity(p.f_out);
    for (s, rho) in rho_per_beta.iter().enumerate() {
        let mut z = DVector::zeros(rho.dim());
        for (g, x) in x_in.iter().enumerate() {
            z += filter_apply(&p.filter(s, g)?, rho, x)?;
        }
        scales.push(z.map(|v| p.activation.apply(v)));
    }
    Ok(aggregate(p, scales))
}

fn aggregate(p: &LayerParams, scales: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    match p.aggregation {
        Aggregation::Concatenate => scales,
        Aggregation::Sum | Aggregation::Mean => {
            let mut total = scales[0].clone();
            for y in &scales[1..] {
                total += y;
            }
            if p.aggregation == Aggregation::Mean {
                total /= p.f_out as f64;
            }
            vec![total]
        }
    }
}

/// Density eigenvalues and their means `E_ρ[λ]` for every layer and scale.
struct Densities {
    rho: Vec<Vec<DVector<f64>>>,
    mean_energy: Vec<Vec<f64>>,
}

struct Engine<'a> {
    model: &'a ModelParams,
    basis: &'a SpectralDecomposition,
    densities: Densities,
}

struct LayerCache {
    x_spec: Vec<DVector<f64>>,
    z: Vec<DVector<f64>>,
}

pub(crate) struct ForwardCache {
    layers: Vec<Vec<LayerCache>>,
    features: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pub(crate) output: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(model: &'a ModelParams, basis: &'a SpectralDecomposition) -> Result<Self> {
        if basis.dim() != model.n_nodes {
            return Err(Error::DimensionMismatch {
                expected: model.n_nodes,
                got: basis.dim(),
            });
        }
        let lambdas = basis.eigenvalues();
        let norm = lambdas.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
        let mut rho = Vec::with_capacity(model.layers.len());
        let mut mean_energy = Vec::with_capacity(model.layers.len());
        for layer in &model.layers {
            let mut rl = Vec::with_capacity(layer.f_out);
            let mut ml = Vec::with_capacity(layer.f_out);
            for &beta in &layer.betas {
                check_overflow(beta, norm)?;
                let (p, _) = gibbs_weights(lambdas, beta);
                ml.push(p.dot(lambdas));
                rl.push(p);
            }
            rho.push(rl);
            mean_energy.push(ml);
        }
        Ok(Self {
            model,
            basis,
            densities: Densities { rho, mean_energy },
        })
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.model.n_nodes || x.ncols() != self.model.n_time {
            return Err(Error::invalid(format!(
                "input must be {}x{}, got {}x{}",
                self.model.n_nodes,
                self.model.n_time,
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn feature_index(&self, t: usize, channel: usize, node: usize) -> usize {
        (channel * self.model.n_nodes + node) * self.model.n_time + t
    }

    fn forward(&self, x: &DMatrix<f64>, dropout_mask: Option<&[f64]>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let m = self.model;
        let v = self.basis.eigenvectors();
        let mut features = vec![0.0; m.feature_dim()];
        let mut caches = Vec::with_capacity(m.n_time);
        for t in 0..m.n_time {
            let mut channels: Vec<DVector<f64>> = vec![x.column(t).into_owned()];
            let mut layer_caches = Vec::with_capacity(m.layers.len());
            for (l, layer) in m.layers.iter().enumerate() {
                let x_spec: Vec<DVector<f64>> = channels.iter().map(|c| v.tr_mul(c)).collect();
                let mut z = Vec::with_capacity(layer.f_out);
                let mut scales = Vec::with_capacity(layer.f_out);
                for s in 0..layer.f_out {
                    let p = &self.densities.rho[l][s];
                    let mut zt = DVector::zeros(m.n_nodes);
                    for (g, xs) in x_spec.iter().enumerate() {
                        let h = &layer.coeffs[s][g];
                        for i in 0..m.n_nodes {
                            zt[i] += layer.poly(h, p[i]) * xs[i];
                        }
                    }
                    let zs = v * zt;
                    scales.push(zs.map(|val| layer.activation.apply(val)));
                    z.push(zs);
                }
                channels = aggregate(layer, scales);
                layer_caches.push(LayerCache { x_spec, z });
            }
            for (c, ch) in channels.iter().enumerate() {
                for i in 0..m.n_nodes {
                    features[self.feature_index(t, c, i)] = ch[i];
                }
            }
            caches.push(layer_caches);
        }
        let head = &m.head;
        let hidden_pre: Vec<f64> = head
            .w1
            .iter()
            .zip(&head.b1)
            .map(|(row, b)| b + row.iter().zip(&features).map(|(w, f)| w * f).sum::<f64>())
            .collect();
        let mut hidden: Vec<f64> = hidden_pre.iter().map(|z| head.activation.apply(*z)).collect();
        if let Some(mask) = dropout_mask {
            for (h, keep) in hidden.iter_mut().zip(mask) {
                *h *= keep;
            }
        }
        let output = head
            .w2
            .iter()
            .zip(&head.b2)
            .map(|(row, b)| b + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>())
            .collect();
        Ok(ForwardCache {
            layers: caches,
            features,
            hidden_pre,
            hidden,
            output,
        })
    }

    /// Accumulates `∂L/∂θ` for one sample into `grad`, given `∂L/∂output`.
    fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &[f64],
        dropout_mask: Option<&[f64]>,
        grad: &mut ModelParams,
    ) {
        let m = self.model;
        let head = &m.head;
        let v = self.basis.eigenvectors();
        let lambdas = self.basis.eigenvalues();

        let mut d_hidden = vec![0.0; head.hidden_dim()];
        for (o, d) in d_out.iter().enumerate() {
            grad.head.b2[o] += d;
            for (h, hv) in cache.hidden.iter().enumerate() {
                grad.head.w2[o][h] += d * hv;
                d_hidden[h] += head.w2[o][h] * d;
            }
        }
        let mut d_features = vec![0.0; cache.features.len()];
        for h in 0..head.hidden_dim() {
            let keep = dropout_mask.map_or(1.0, |mask| mask[h]);
            let d_pre = d_hidden[h] * keep * head.activation.derivative(cache.hidden_pre[h]);
            if d_pre == 0.0 {
                continue;
            }
            grad.head.b1[h] += d_pre;
            for (f, fv) in cache.features.iter().enumerate() {
                grad.head.w1[h][f] += d_pre * fv;
                d_features[f] += head.w1[h][f] * d_pre;
            }
        }
        if m.layers.is_empty() {
            return;
        }

        for t in 0..m.n_time {
            let channels = m.output_channels();
            let mut d_channels: Vec<DVector<f64>> = (0..channels)
                .map(|c| DVector::from_fn(m.n_nodes, |i, _| d_features[self.feature_index(t, c, i)]))
                .collect();
            for (l, layer) in m.layers.iter().enumerate().rev() {
                let lc = &cache.layers[t][l];
                let mut d_x_spec: Vec<DVector<f64>> =
                    vec![DVector::zeros(m.n_nodes); layer.f_in];
                for s in 0..layer.f_out {
                    let d_y = match layer.aggregation {
                        Aggregation::Concatenate => d_channels[s].clone(),
                        Aggregation::Sum => d_channels[0].clone(),
                        Aggregation::Mean => &d_channels[0] / layer.f_out as f64,
                    };
                    let d_z = d_y.zip_map(&lc.z[s], |d, z| d * layer.activation.derivative(z));
                    let d_zt = v.tr_mul(&d_z);
                    let p = &self.densities.rho[l][s];
                    let mut d_p = DVector::<f64>::zeros(m.n_nodes);
                    for g in 0..layer.f_in {
                        let h = &layer.coeffs[s][g];
                        let xs = &lc.x_spec[g];
                        let gh = &mut grad.layers[l].coeffs[s][g];
                        for i in 0..m.n_nodes {
                            let a = d_zt[i] * xs[i];
                            let mut power = 1.0;
                            for (k, gk) in gh.iter_mut().enumerate() {
                                if k >= layer.first_k() {
                                    *gk += a * power;
                                }
                                power *= p[i];
                            }
                            d_x_spec[g][i] += d_zt[i] * layer.poly(h, p[i]);
                            d_p[i] += a * layer.poly_derivative(h, p[i]);
                        }
                    }
                    if layer.betas_learnable {
                        let mean = self.densities.mean_energy[l][s];
                        let db: f64 = (0..m.n_nodes)
                            .map(|i| d_p[i] * p[i] * (mean - lambdas[i]))
                            .sum();
                        grad.layers[l].betas[s] += db;
                    }
                }
                if l > 0 {
                    d_channels = d_x_spec.iter().map(|d| v * d).collect();
                }
            }
        }
    }
}

/// Raw model outputs (logits for classification).
pub fn model_forward(m: &ModelParams, c: &CovarianceMatrix, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let engine = Engine::new(m, c.decomposition())?;
    Ok(DVector::from_vec(engine.forward(x, None)?.output))
}

/// Outputs for many samples, sharing one density evaluation.
pub fn model_predict(m: &ModelParams, c: &CovarianceMatrix, xs: &[DMatrix<f64>]) -> Result<Vec<Vec<f64>>> {
    let engine = Engine::new(m, c.decomposition())?;
    xs.iter()
        .map(|x| engine.forward(x, None).map(|cache| cache.output))
        .collect()
}

/// Per-sample loss and `∂loss/∂output`.
pub(crate) fn loss_and_grad(loss: Loss, task: Task, output: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    match loss {
        Loss::Mse | Loss::Mae => {
            if y.len() != output.len() {
                return Err(Error::DimensionMismatch {
                    expected: output.len(),
                    got: y.len(),
                });
            }
            let n = output.len() as f64;
            let mut value = 0.0;
            let mut grad = Vec::with_capacity(output.len());
            for (o, t) in output.iter().zip(y) {
                let r = o - t;
                if loss == Loss::Mse {
                    value += r * r / n;
                    grad.push(2.0 * r / n);
                } else {
                    value += r.abs() / n;
                    grad.push(if r == 0.0 { 0.0 } else { r.signum() / n });
                }
            }
            Ok((value, grad))
        }
        Loss::CrossEntropy => {
            if task != Task::Classification {
                return Err(Error::invalid("cross entropy needs a classification model"));
            }
            let class = class_index(y, output.len())?;
            let max = output.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = max + output.iter().map(|o| (o - max).exp()).sum::<f64>().ln();
            let grad = output
                .iter()
                .enumerate()
                .map(|(k, o)| (o - log_norm).exp() - if k == class { 1.0 } else { 0.0 })
                .collect();
            Ok((log_norm - output[class], grad))
        }
    }
}

fn class_index(y: &[f64], n_classes: usize) -> Result<usize> {
    match y.first() {
        Some(&c) if c >= 0.0 && c.fract() == 0.0 && (c as usize) < n_classes => Ok(c as usize),
        _ => Err(Error::invalid(format!(
            "classification target must be a class index below {n_classes}, got {y:?}"
        ))),
    }
}

/// Mean batch loss and its analytic gradient with respect to every
/// trainable parameter, returned in the shape of the model.
pub fn model_gradients(
    m: &ModelParams,
    c: &CovarianceMatrix,
    batch: &[Sample],
    loss: Loss,
) -> Result<(f64, ModelParams)> {
    batch_gradients(m, c.decomposition(), batch, loss, None)
}

pub(crate) fn batch_gradients(
    m: &ModelParams,
    basis: &SpectralDecomposition,
    batch: &[Sample],
    loss: Loss,
    dropout_masks: Option<&[Vec<f64>]>,
) -> Result<(f64, ModelParams)> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let engine = Engine::new(m, basis)?;
    let scale = 1.0 / batch.len() as f64;
    let per_sample = batch
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let mask = dropout_masks.map(|masks| masks[i].as_slice());
            let cache = engine.forward(&sample.x, mask)?;
            let (value, mut d_out) = loss_and_grad(loss, m.task, &cache.output, &sample.y)?;
            d_out.iter_mut().for_each(|d| *d *= scale);
            let mut grad = m.zeros_like();
            engine.backward(&cache, &d_out, mask, &mut grad);
            Ok((value, grad.to_vec()))
        })
        .collect::<Result<Vec<(f64, Vec<f64>)>>>()?;
    let mut total = 0.0;
    let mut flat = vec![0.0; m.num_parameters()];
    for (value, g) in per_sample {
        total += value;
        for (acc, v) in flat.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let mut grad = m.zeros_like();
    grad.set_from_slice(&flat)?;
    Ok((total * scale, grad))
}
