//! Covariance density operators `ρ(C) = exp(-βC) / Tr exp(-βC)`.
//!
//! A density operator is stored spectrally: the eigenbasis of `C` plus the
//! density eigenvalues `exp(-βλᵢ)/Z`. It is never materialized as a dense
//! exponential unless asked for.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::covariance::CovarianceMatrix;
use crate::error::{Error, Result};
use crate::spectral::{eigh, operator_norm, SpectralDecomposition};

/// Largest admissible `|β| * ||C||` before `exp` overflows.
pub const OVERFLOW_LIMIT: f64 = 700.0;

fn spectral_norm(eigenvalues: &DVector<f64>) -> f64 {
    eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub(crate) fn check_overflow(beta: f64, norm: f64) -> Result<()> {
    if !beta.is_finite() {
        return Err(Error::NonFinite("beta"));
    }
    let product = beta.abs() * norm;
    if product > OVERFLOW_LIMIT {
        return Err(Error::Overflow {
            product,
            limit: OVERFLOW_LIMIT,
        });
    }
    Ok(())
}

/// Gibbs weights of a spectrum: `(exp(-βλᵢ)/Z, ln Z)` with max-subtraction.
pub(crate) fn gibbs_weights(eigenvalues: &DVector<f64>, beta: f64) -> (DVector<f64>, f64) {
    let exponents = eigenvalues.map(|l| -beta * l);
    let shift = exponents.max();
    let weights = exponents.map(|e| (e - shift).exp());
    let total = weights.sum();
    (weights / total, shift + total.ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    beta: f64,
    basis: Arc<SpectralDecomposition>,
    density_eigenvalues: DVector<f64>,
    log_partition: f64,
}

impl DensityOperator {
    pub fn from_decomposition(basis: Arc<SpectralDecomposition>, beta: f64) -> Result<Self> {
        check_overflow(beta, spectral_norm(basis.eigenvalues()))?;
        let (density_eigenvalues, log_partition) = gibbs_weights(basis.eigenvalues(), beta);
        Ok(Self {
            beta,
            basis,
            density_eigenvalues,
            log_partition,
        })
    }

    /// Density operator of an arbitrary symmetric matrix (not necessarily PSD).
    pub fn from_symmetric(matrix: &DMatrix<f64>, beta: f64) -> Result<Self> {
        Self::from_decomposition(Arc::new(eigh(matrix)?), beta)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn basis(&self) -> &SpectralDecomposition {
        &self.basis
    }

    pub fn shared_basis(&self) -> Arc<SpectralDecomposition> {
        Arc::clone(&self.basis)
    }

    /// `ρᵢ`, aligned with the source eigenvalues.
    pub fn density_eigenvalues(&self) -> &DVector<f64> {
        &self.density_eigenvalues
    }

    pub fn source_spectrum(&self) -> &DVector<f64> {
        self.basis.eigenvalues()
    }

    pub fn partition_function(&self) -> f64 {
        self.log_partition.exp()
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    /// `E_ρ[λ] = Σ ρᵢ λᵢ = Tr(Cρ)`.
    pub fn mean_energy(&self) -> f64 {
        self.density_eigenvalues.dot(self.basis.eigenvalues())
    }

    pub fn trace(&self) -> f64 {
        self.density_eigenvalues.sum()
    }

    /// `ρ` as a dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let first = self.density_eigenvalues[0];
        if self.density_eigenvalues.iter().all(|p| *p == first) {
            return DMatrix::identity(self.dim(), self.dim()) * first;
        }
        self.basis.matrix_from_values(&self.density_eigenvalues)
    }

    /// `ρ x`.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut coeffs = self.basis.to_spectral(x)?;
        coeffs.component_mul_assign(&self.density_eigenvalues);
        self.basis.from_spectral(&coeffs)
    }
}

pub fn density_operator(c: &CovarianceMatrix, beta: f64) -> Result<DensityOperator> {
    DensityOperator::from_decomposition(Arc::new(c.decomposition().clone()), beta)
}

/// `Z = Σ exp(-βλᵢ)`.
pub fn partition_function(c: &CovarianceMatrix, beta: f64) -> Result<f64> {
    check_overflow(beta, c.norm())?;
    Ok(c.eigenvalues().iter().map(|l| (-beta * l).exp()).sum())
}

/// Perturbation amplification factor; 1 for `β >= 0`.
pub fn f_factor(beta: f64, norm_c: f64, norm_c_plus_dc: f64) -> f64 {
    if beta >= 0.0 {
        return 1.0;
    }
    let b = beta.abs();
    let x = b * (norm_c_plus_dc - norm_c);
    let ratio = if x.abs() < 1e-8 { 1.0 } else { x.exp_m1() / x };
    (b * norm_c).exp() * ratio
}

/// Both sides of the density perturbation bound for one `(C, δC, β)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityErrorReport {
    pub bound: f64,
    pub measured_error: f64,
    pub delta_c_norm: f64,
    /// `R = Z(C + δC) / Z(C)`.
    pub r_ratio: f64,
    pub f_factor: f64,
    pub partition_function: f64,
    pub perturbed_partition_function: f64,
}

impl DensityErrorReport {
    pub fn dominates(&self) -> bool {
        self.bound >= self.measured_error
    }
}

pub fn density_error_report(
    c: &DMatrix<f64>,
    dc: &DMatrix<f64>,
    beta: f64,
) -> Result<DensityErrorReport> {
    if c.shape() != dc.shape() {
        return Err(Error::DimensionMismatch {
            expected: c.nrows(),
            got: dc.nrows(),
        });
    }
    let perturbed = c + dc;
    let rho = DensityOperator::from_symmetric(c, beta)?;
    let rho_p = DensityOperator::from_symmetric(&perturbed, beta)?;

    let norm_c = spectral_norm(rho.source_spectrum());
    let norm_cp = spectral_norm(rho_p.source_spectrum());
    let delta_c_norm = operator_norm(dc)?;
    let r_ratio = (rho_p.log_partition() - rho.log_partition()).exp();
    let f = f_factor(beta, norm_c, norm_cp);
    let m = c.nrows() as f64;
    let penalty = if beta < 0.0 {
        (beta.abs() * norm_c).exp()
    } else {
        1.0
    };
    let bound = beta.abs() * delta_c_norm * f / r_ratio * (1.0 + m * penalty);
    let measured_error = operator_norm(&(rho_p.to_dense() - rho.to_dense()))?;

    Ok(DensityErrorReport {
        bound,
        measured_error,
        delta_c_norm,
        r_ratio,
        f_factor: f,
        partition_function: rho.partition_function(),
        perturbed_partition_function: rho_p.partition_function(),
    })
}

/// Upper bound on `||ρ(C + δC) - ρ(C)||` with `R` measured from the two partition functions.
pub fn density_error_bound(c: &DMatrix<f64>, dc: &DMatrix<f64>, beta: f64) -> Result<f64> {
    Ok(density_error_report(c, dc, beta)?.bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(values: &[f64]) -> CovarianceMatrix {
        CovarianceMatrix::from_diagonal(values).unwrap()
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> CovarianceMatrix {
        let g = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        CovarianceMatrix::from_matrix(&g * g.transpose() / rank as f64).unwrap()
    }

    #[test]
    fn beta_zero_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_psd(&mut rng, 5, 5);
        let rho = density_operator(&c, 0.0).unwrap();
        for v in rho.density_eigenvalues().iter() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(partition_function(&c, 0.0).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn diag_two_zero_zero() {
        let rho = density_operator(&diag(&[2.0, 0.0, 0.0]), 1.0).unwrap();
        let z = (-2.0f64).exp() + 2.0;
        assert_abs_diff_eq!(rho.partition_function(), z, epsilon = 1e-12);
        assert_abs_diff_eq!(z, 2.13534, epsilon = 1e-5);
        // ascending source spectrum (0, 0, 2)
        let e = rho.density_eigenvalues();
        assert_abs_diff_eq!(e[0], 0.46831, epsilon = 1e-5);
        assert_abs_diff_eq!(e[1], 0.46831, epsilon = 1e-5);
        assert_abs_diff_eq!(e[2], 0.06337, epsilon = 1e-5);
        let zp = partition_function(&diag(&[2.0, 0.0, 0.0]), 1.0).unwrap();
        assert!((zp - rho.partition_function()).abs() <= 1e-12 * zp);
    }

    #[test]
    fn scaled_identity_is_uniform() {
        for c in [0.5, 3.0, 40.0] {
            for beta in [-2.0, 0.7, 10.0] {
                let cov = CovarianceMatrix::from_matrix(DMatrix::identity(4, 4) * c).unwrap();
                let rho = density_operator(&cov, beta).unwrap();
                assert!(rho.density_eigenvalues().iter().all(|v| (v - 0.25).abs() < 1e-14));
            }
        }
    }

    #[test]
    fn overflow_guard() {
        let err = density_operator(&diag(&[100.0, 0.0]), 8.0).unwrap_err();
        match err {
            Error::Overflow { product, .. } => assert_abs_diff_eq!(product, 800.0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(partition_function(&diag(&[100.0, 0.0]), -8.0).is_err());
        assert!(density_operator(&diag(&[100.0, 0.0]), 7.0).is_ok());
    }

    #[test]
    fn invariants_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let betas = [-5.0, -1.0, -0.1, 0.0, 0.1, 1.0, 5.0, 15.0];
        for trial in 0..1000 {
            let n = rng.random_range(1..10);
            let rank = if trial % 4 == 0 { 1 } else { rng.random_range(1..=n) };
            let c = random_psd(&mut rng, n, rank);
            let beta = betas[trial % betas.len()];
            let rho = density_operator(&c, beta).unwrap();
            let e = rho.density_eigenvalues();
            assert!((rho.trace() - 1.0).abs() <= 1e-12);
            assert!(e.iter().all(|v| *v > 0.0));
            let det: f64 = e.iter().product();
            assert!(det > 0.0);
            for w in 0..n.saturating_sub(1) {
                let (li, lj) = (c.eigenvalues()[w], c.eigenvalues()[w + 1]);
                if lj - li > 1e-9 {
                    if beta > 0.0 {
                        assert!(e[w] > e[w + 1]);
                    } else if beta < 0.0 {
                        assert!(e[w] < e[w + 1]);
                    }
                }
            }
            if beta > 0.0 {
                let z = density_operator(&c.shift_regularize(), beta)
                    .unwrap()
                    .partition_function();
                assert!(z >= 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn apply_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_psd(&mut rng, 6, 6);
        let rho = density_operator(&c, 1.3).unwrap();
        let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let dense = rho.to_dense() * &x;
        assert!((rho.apply(&x).unwrap() - dense).amax() < 1e-14);
        // dense form equals exp(-βC)/Z computed by a truncated series
        let mut term = DMatrix::<f64>::identity(6, 6);
        let mut exp = term.clone();
        let a = c.matrix() * -1.3;
        for k in 1..60 {
            term = &term * &a / k as f64;
            exp += &term;
        }
        let series = &exp / exp.trace();
        assert!((series - rho.to_dense()).amax() < 1e-12);
    }

    #[test]
    fn f_factor_examples() {
        assert_eq!(f_factor(2.0, 1.0, 3.0), 1.0);
        assert!((f_factor(-1e-9, 1.0, 1.5) - 1.0).abs() < 1e-6);
        let expected = 1f64.exp() * (0.5f64.exp() - 1.0) / 0.5;
        assert_abs_diff_eq!(f_factor(-1.0, 1.0, 1.5), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 3.5268, epsilon = 1e-4);
        // a -> 0 uses the series limit
        assert_abs_diff_eq!(f_factor(-1.0, 1.0, 1.0), 1f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn bound_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_psd(&mut rng, 5, 5);
        let r = density_error_report(c.matrix(), &DMatrix::zeros(5, 5), 1.0).unwrap();
        assert_eq!(r.bound, 0.0);
        assert!(r.measured_error < 1e-15);

        let dc = random_psd(&mut rng, 5, 2);
        let r = density_error_report(c.matrix(), dc.matrix(), 0.0).unwrap();
        assert_eq!(r.bound, 0.0);
        assert_eq!(r.measured_error, 0.0);
    }

    #[test]
    fn bound_dominates_random_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = random_psd(&mut rng, 8, 8);
            let e = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
            let e = (&e + e.transpose()) * 0.5;
            let dc = &e * (0.1 / operator_norm(&e).unwrap());
            let r = density_error_report(c.matrix(), &dc, 1.0).unwrap();
            assert_abs_diff_eq!(r.delta_c_norm, 0.1, epsilon = 1e-12);
            assert!(r.dominates(), "{r:?}");
        }
    }
}
