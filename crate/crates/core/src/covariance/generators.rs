//! Seeded synthetic data generators.

use std::collections::VecDeque;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DataMatrix;
use crate::error::{Error, Result};

/// Innovation equicorrelation of the AR(1) panel generator.
pub const AR_EQUICORRELATION: f64 = 0.6;

const GRAPH_RETRY_BUDGET: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumFamily {
    /// Standard normal.
    Gaussian,
    /// Rate 1.
    Exponential,
    /// Shape 2, scale 1.
    Gamma,
}

impl SpectrumFamily {
    pub const ALL: [SpectrumFamily; 3] = [
        SpectrumFamily::Gaussian,
        SpectrumFamily::Exponential,
        SpectrumFamily::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpectrumFamily::Gaussian => "gaussian",
            SpectrumFamily::Exponential => "exponential",
            SpectrumFamily::Gamma => "gamma",
        }
    }
}

impl FromStr for SpectrumFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(SpectrumFamily::Gaussian),
            "exponential" => Ok(SpectrumFamily::Exponential),
            "gamma" => Ok(SpectrumFamily::Gamma),
            _ => Err(Error::UnknownFamily(s.to_string())),
        }
    }
}

fn check_shape(dim: usize, n_samples: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::invalid("dim must be at least 1"));
    }
    if n_samples < 2 {
        return Err(Error::InsufficientData(n_samples));
    }
    Ok(())
}

/// `n_samples x dim` matrix with i.i.d. entries from `family`.
pub fn gen_gaussian_data(
    dim: usize,
    n_samples: usize,
    family: SpectrumFamily,
    seed: u64,
) -> Result<DataMatrix> {
    check_shape(dim, n_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = DMatrix::zeros(n_samples, dim);
    match family {
        SpectrumFamily::Gaussian => {
            for i in 0..n_samples {
                for j in 0..dim {
                    values[(i, j)] = rng.sample(StandardNormal);
                }
            }
        }
        SpectrumFamily::Exponential => {
            let dist = Exp::new(1.0).expect("valid rate");
            for i in 0..n_samples {
                for j in 0..dim {
                    values[(i, j)] = rng.sample(dist);
                }
            }
        }
        SpectrumFamily::Gamma => {
            let dist = Gamma::new(2.0, 1.0).expect("valid shape/scale");
            for i in 0..n_samples {
                for j in 0..dim {
                    values[(i, j)] = rng.sample(dist);
                }
            }
        }
    }
    DataMatrix::new(values)
}

/// Combinatorial Laplacian `D - A` of a symmetric 0/1 adjacency matrix.
pub fn laplacian_from_adjacency(adjacency: &DMatrix<f64>) -> DMatrix<f64> {
    let n = adjacency.nrows();
    let mut lap = -adjacency.clone();
    for i in 0..n {
        lap[(i, i)] = adjacency.row(i).sum();
    }
    lap
}

fn is_connected(adjacency: &DMatrix<f64>) -> bool {
    let n = adjacency.nrows();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if adjacency[(u, v)] != 0.0 && !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Graph-stationary signals `x = Σ a_k L^k w` on a connected Erdős–Rényi graph.
///
/// Returns the data and the Laplacian `L`. Retries graph sampling up to 100
/// times until the graph is connected.
pub fn gen_graph_stationary(
    dim: usize,
    n_samples: usize,
    edge_prob: f64,
    filter_coeffs: &[f64],
    seed: u64,
) -> Result<(DataMatrix, DMatrix<f64>)> {
    check_shape(dim, n_samples)?;
    if !(edge_prob > 0.0 && edge_prob <= 1.0) {
        return Err(Error::invalid(format!(
            "edge probability must be in (0, 1], got {edge_prob}"
        )));
    }
    if filter_coeffs.is_empty() || filter_coeffs.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("filter coefficients must be non-empty and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut laplacian = None;
    for _ in 0..GRAPH_RETRY_BUDGET {
        let mut adjacency = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in (i + 1)..dim {
                if rng.random::<f64>() < edge_prob {
                    adjacency[(i, j)] = 1.0;
                    adjacency[(j, i)] = 1.0;
                }
            }
        }
        if is_connected(&adjacency) {
            laplacian = Some(laplacian_from_adjacency(&adjacency));
            break;
        }
    }
    let laplacian = laplacian.ok_or(Error::GraphGeneration {
        attempts: GRAPH_RETRY_BUDGET,
        edge_prob,
    })?;

    // Horner evaluation of g(L)
    let identity = DMatrix::<f64>::identity(dim, dim);
    let k = filter_coeffs.len() - 1;
    let mut filter = &identity * filter_coeffs[k];
    for a in filter_coeffs[..k].iter().rev() {
        filter = &filter * &laplacian + &identity * *a;
    }

    let white = DMatrix::from_fn(dim, n_samples, |_, _| rng.sample::<f64, _>(StandardNormal));
    let signals = (&filter * white).transpose();
    Ok((DataMatrix::new(signals)?, laplacian))
}

/// AR(1) panel with equicorrelated innovations (correlation [`AR_EQUICORRELATION`]).
pub fn gen_ar_process(
    dim: usize,
    n_samples: usize,
    ar_coefficient: f64,
    seed: u64,
) -> Result<DataMatrix> {
    gen_ar_process_with(dim, n_samples, ar_coefficient, AR_EQUICORRELATION, seed)
}

/// `x_t = φ x_{t-1} + ε_t` with `ε_t = sqrt(r) g_t + sqrt(1 - r) z_t`, started
/// from the stationary distribution.
pub fn gen_ar_process_with(
    dim: usize,
    n_samples: usize,
    ar_coefficient: f64,
    equicorrelation: f64,
    seed: u64,
) -> Result<DataMatrix> {
    check_shape(dim, n_samples)?;
    if !ar_coefficient.is_finite() || ar_coefficient.abs() >= 1.0 {
        return Err(Error::Nonstationary(ar_coefficient));
    }
    if !(0.0..1.0).contains(&equicorrelation) {
        return Err(Error::invalid(format!(
            "equicorrelation must be in [0, 1), got {equicorrelation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common = equicorrelation.sqrt();
    let idio = (1.0 - equicorrelation).sqrt();
    let innovation = |rng: &mut ChaCha8Rng| {
        let g: f64 = rng.sample(StandardNormal);
        (0..dim)
            .map(|_| common * g + idio * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<f64>>()
    };

    let mut values = DMatrix::zeros(n_samples, dim);
    let stationary_scale = 1.0 / (1.0 - ar_coefficient * ar_coefficient).sqrt();
    let first = innovation(&mut rng);
    for j in 0..dim {
        values[(0, j)] = first[j] * stationary_scale;
    }
    for t in 1..n_samples {
        let eps = innovation(&mut rng);
        for j in 0..dim {
            values[(t, j)] = ar_coefficient * values[(t - 1, j)] + eps[j];
        }
    }
    DataMatrix::new(values)
}
