//! Fitting the inverse temperature β so the Gibbs distribution of a spectrum
//! matches a target probability vector.
//!
//! The objective `f(β) = β Σ pᵢλᵢ + ln Σ e^{-βλⱼ}` is `D_KL(p ‖ q_β)` minus a
//! constant, strictly convex whenever the spectrum is not constant.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceMatrix;
use crate::density::{density_operator, gibbs_weights, DensityOperator};
use crate::error::{Error, Result};

const PROBABILITY_TOLERANCE: f64 = 1e-10;
const MAX_POLISH_STEPS: usize = 4;
const MAX_DOUBLINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub bracket_growth: f64,
    /// Half-width of the first bracket `[-b, b]`.
    pub initial_bracket: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-10,
            bracket_growth: 2.0,
            initial_bracket: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaFitResult {
    pub beta_star: f64,
    pub objective_value: f64,
    pub gradient_at_solution: f64,
    pub curvature_at_solution: f64,
    pub iterations: usize,
    pub degenerate: bool,
}

fn validate(spectrum: &[f64], target_p: &[f64]) -> Result<()> {
    if spectrum.is_empty() {
        return Err(Error::invalid("spectrum must be nonempty"));
    }
    if spectrum.len() != target_p.len() {
        return Err(Error::DimensionMismatch {
            expected: spectrum.len(),
            got: target_p.len(),
        });
    }
    if spectrum.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("spectrum"));
    }
    if let Some(p) = target_p.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidProbability(format!("entry {p} is not a nonnegative number")));
    }
    let total: f64 = target_p.iter().sum();
    if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(Error::InvalidProbability(format!("entries sum to {total}")));
    }
    Ok(())
}

fn target_mean(spectrum: &[f64], target_p: &[f64]) -> f64 {
    spectrum.iter().zip(target_p).map(|(l, p)| l * p).sum()
}

/// Mean and variance of λ under `q_β`.
fn gibbs_moments(spectrum: &[f64], beta: f64) -> (f64, f64) {
    let (q, _) = gibbs_weights(&DVector::from_column_slice(spectrum), beta);
    let mean: f64 = spectrum.iter().zip(q.iter()).map(|(l, q)| l * q).sum();
    let var: f64 = spectrum
        .iter()
        .zip(q.iter())
        .map(|(l, q)| q * (l - mean) * (l - mean))
        .sum();
    (mean, var.max(0.0))
}

pub fn moment_objective(spectrum: &[f64], target_p: &[f64], beta: f64) -> Result<f64> {
    validate(spectrum, target_p)?;
    let (_, log_z) = gibbs_weights(&DVector::from_column_slice(spectrum), beta);
    Ok(beta * target_mean(spectrum, target_p) + log_z)
}

/// `(f′(β), f″(β))`.
pub fn moment_derivatives(spectrum: &[f64], target_p: &[f64], beta: f64) -> Result<(f64, f64)> {
    validate(spectrum, target_p)?;
    let (mean, var) = gibbs_moments(spectrum, beta);
    Ok((target_mean(spectrum, target_p) - mean, var))
}

/// `q_β`, the Gibbs distribution of the spectrum.
pub fn gibbs_distribution(spectrum: &[f64], beta: f64) -> Vec<f64> {
    gibbs_weights(&DVector::from_column_slice(spectrum), beta).0.iter().copied().collect()
}

/// `D_KL(p ‖ q_β)` in nats.
pub fn kl_to_gibbs(spectrum: &[f64], target_p: &[f64], beta: f64) -> Result<f64> {
    validate(spectrum, target_p)?;
    let q = gibbs_distribution(spectrum, beta);
    Ok(target_p
        .iter()
        .zip(&q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q).ln())
        .sum())
}

pub fn fit_beta(spectrum: &[f64], target_p: &[f64], config: &FitConfig) -> Result<BetaFitResult> {
    validate(spectrum, target_p)?;
    if !(config.bracket_growth > 1.0) || !(config.initial_bracket > 0.0) || !(config.tol > 0.0) {
        return Err(Error::invalid(
            "fit config needs bracket_growth > 1, initial_bracket > 0, tol > 0",
        ));
    }
    let lo_l = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_l = spectrum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t = target_mean(spectrum, target_p);
    let grad = |beta: f64| t - gibbs_moments(spectrum, beta).0;
    let finish = |beta: f64, iterations: usize, degenerate: bool| -> Result<BetaFitResult> {
        let (g, c) = moment_derivatives(spectrum, target_p, beta)?;
        Ok(BetaFitResult {
            beta_star: beta,
            objective_value: moment_objective(spectrum, target_p, beta)?,
            gradient_at_solution: g,
            curvature_at_solution: c,
            iterations,
            degenerate,
        })
    };

    if hi_l - lo_l <= 1e-12 * hi_l.abs().max(lo_l.abs()).max(1.0) {
        return finish(0.0, 0, true);
    }
    let infeasible = || Error::InfeasibleTarget {
        target_mean: t,
        min: lo_l,
        max: hi_l,
    };
    if t <= lo_l || t >= hi_l {
        return Err(infeasible());
    }

    // f′ is increasing: negative for small β, positive for large β
    let mut lo = -config.initial_bracket;
    let mut hi = config.initial_bracket;
    let mut g_lo = grad(lo);
    let mut doublings = 0;
    while g_lo > 0.0 {
        if doublings == MAX_DOUBLINGS {
            return Err(infeasible());
        }
        hi = lo;
        lo *= config.bracket_growth;
        g_lo = grad(lo);
        doublings += 1;
    }
    let mut g_hi = grad(hi);
    doublings = 0;
    while g_hi < 0.0 {
        if doublings == MAX_DOUBLINGS {
            return Err(infeasible());
        }
        lo = hi;
        g_lo = grad(lo);
        hi *= config.bracket_growth;
        g_hi = grad(hi);
        doublings += 1;
    }
    if g_lo.abs() <= config.tol {
        return finish(lo, 0, false);
    }
    if g_hi.abs() <= config.tol {
        return finish(hi, 0, false);
    }

    let mut beta = 0.5 * (lo + hi);
    let mut polish = 0;
    for iter in 1..=config.max_iter {
        let (g, c) = moment_derivatives(spectrum, target_p, beta)?;
        if g.abs() <= config.tol {
            // a small gradient can still leave β loose when the curvature is small
            let step = if c > 0.0 { (g / c).abs() } else { 0.0 };
            if step <= 1e-13 * beta.abs().max(1.0) || polish == MAX_POLISH_STEPS {
                return finish(beta, iter, false);
            }
            polish += 1;
        }
        if g < 0.0 {
            lo = beta;
        } else {
            hi = beta;
        }
        let newton = if c > 0.0 { beta - g / c } else { f64::NAN };
        beta = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * beta.abs().max(1.0) {
            let g = grad(beta);
            if g.abs() <= config.tol {
                return finish(beta, iter, false);
            }
            break;
        }
    }
    Err(Error::invalid(format!(
        "beta fit did not converge within {} iterations",
        config.max_iter
    )))
}

/// `ρ(C)` at the fitted inverse temperature.
pub fn reconstruct_density(c: &CovarianceMatrix, beta_star: f64) -> Result<DensityOperator> {
    density_operator(c, beta_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let m = rng.random_range(2..10);
        let spectrum: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..5.0)).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        (spectrum, raw.iter().map(|v| v / s).collect())
    }

    #[test]
    fn objective_examples() {
        let p = [1.0 / 3.0, 2.0 / 3.0];
        assert_abs_diff_eq!(moment_objective(&[1.0, 2.0], &p, 0.0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let expected = 5.0 / 3.0 + ((-1f64).exp() + (-2f64).exp()).ln();
        assert_abs_diff_eq!(moment_objective(&[1.0, 2.0], &p, 1.0).unwrap(), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(expected, 0.9800, epsilon = 1e-4);
        for beta in [-5.0, 0.3, 40.0] {
            assert_abs_diff_eq!(
                moment_objective(&[2.5; 4], &[0.25; 4], beta).unwrap(),
                4f64.ln(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn objective_is_stable_for_large_beta() {
        let f = moment_objective(&[0.0, 1000.0], &[0.5, 0.5], 50.0).unwrap();
        assert!(f.is_finite());
        assert_abs_diff_eq!(f, 25_000.0, epsilon = 1e-6);
    }

    #[test]
    fn invalid_probabilities() {
        assert!(moment_objective(&[1.0, 2.0], &[0.5, 0.6], 0.0).is_err());
        assert!(moment_objective(&[1.0, 2.0], &[1.5, -0.5], 0.0).is_err());
        assert!(moment_objective(&[1.0, 2.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (s, p) = random_instance(&mut rng);
            let beta = rng.random_range(-2.0..2.0);
            let h = 1e-5;
            let fd = (moment_objective(&s, &p, beta + h).unwrap()
                - moment_objective(&s, &p, beta - h).unwrap())
                / (2.0 * h);
            let (g, c) = moment_derivatives(&s, &p, beta).unwrap();
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0), "{fd} vs {g}");
            let gp = moment_derivatives(&s, &p, beta + h).unwrap().0;
            let gm = moment_derivatives(&s, &p, beta - h).unwrap().0;
            assert!(((gp - gm) / (2.0 * h) - c).abs() <= 1e-6 * c.max(1.0));
        }
    }

    #[test]
    fn gradient_vanishes_at_gibbs_target() {
        let s = [0.5, 1.0, 4.0];
        let q = gibbs_distribution(&s, 0.7);
        let (g, _) = moment_derivatives(&s, &q, 0.7).unwrap();
        assert!(g.abs() <= 1e-14);
        assert_eq!(moment_derivatives(&[3.0; 3], &[0.2, 0.3, 0.5], 1.1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn convexity_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let (s, p) = random_instance(&mut rng);
            let beta = rng.random_range(-2.0..2.0);
            let (_, c) = moment_derivatives(&s, &p, beta).unwrap();
            assert!(c >= -1e-12);
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let var = s.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / s.len() as f64;
            assert!(c > 1e-12 * var);
        }
    }

    #[test]
    fn closed_form_fit() {
        let r = fit_beta(&[1.0, 2.0], &[1.0 / 3.0, 2.0 / 3.0], &FitConfig::default()).unwrap();
        assert!(!r.degenerate);
        assert_abs_diff_eq!(r.beta_star, -(2f64.ln()), epsilon = 1e-9);
        assert!(r.gradient_at_solution.abs() <= 1e-10);
        assert!(r.curvature_at_solution > 0.0);
    }

    #[test]
    fn uniform_target_gives_zero() {
        let r = fit_beta(&[0.3, 1.0, 7.0, 2.0], &[0.25; 4], &FitConfig::default()).unwrap();
        assert!(r.beta_star.abs() <= 1e-9);
    }

    #[test]
    fn degenerate_spectrum() {
        let r = fit_beta(&[2.0; 3], &[0.1, 0.2, 0.7], &FitConfig::default()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.beta_star, 0.0);
    }

    #[test]
    fn infeasible_targets() {
        let cfg = FitConfig::default();
        assert!(matches!(
            fit_beta(&[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0], &cfg),
            Err(Error::InfeasibleTarget { .. })
        ));
        assert!(matches!(
            fit_beta(&[1.0, 2.0, 3.0], &[1.0, 0.0, 0.0], &cfg),
            Err(Error::InfeasibleTarget { .. })
        ));
    }

    #[test]
    fn random_fits_satisfy_optimality_and_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let (s, p) = random_instance(&mut rng);
            let r = fit_beta(&s, &p, &FitConfig::default()).unwrap();
            assert!(r.gradient_at_solution.abs() <= 1e-8);
            assert!(r.curvature_at_solution > 0.0);
            for _ in 0..10 {
                let cfg = FitConfig {
                    initial_bracket: rng.random_range(1e-3..50.0),
                    ..FitConfig::default()
                };
                let other = fit_beta(&s, &p, &cfg).unwrap();
                assert!((other.beta_star - r.beta_star).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn reconstruction_matches_closed_form() {
        let c = CovarianceMatrix::from_diagonal(&[1.0, 2.0]).unwrap();
        let rho = reconstruct_density(&c, -(2f64.ln())).unwrap();
        let d = rho.density_eigenvalues();
        assert_abs_diff_eq!(d[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d[1], 2.0 / 3.0, epsilon = 1e-14);
        let flat = reconstruct_density(&CovarianceMatrix::from_diagonal(&[4.0; 3]).unwrap(), 0.0).unwrap();
        for v in flat.density_eigenvalues().iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn fitted_beta_minimizes_kl_against_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let true_spec: Vec<f64> = (0..8).map(|i| 0.2 + i as f64 * 0.5).collect();
        let total: f64 = true_spec.iter().sum();
        let p: Vec<f64> = true_spec.iter().map(|l| l / total).collect();
        let noisy: Vec<f64> = true_spec
            .iter()
            .map(|l| l + rng.random_range(-0.1..0.1))
            .collect();
        let r = fit_beta(&noisy, &p, &FitConfig::default()).unwrap();
        let best = kl_to_gibbs(&noisy, &p, r.beta_star).unwrap();
        for _ in 0..50 {
            let b = rng.random_range(-5.0..5.0);
            assert!(best <= kl_to_gibbs(&noisy, &p, b).unwrap() + 1e-12);
        }
    }
}
