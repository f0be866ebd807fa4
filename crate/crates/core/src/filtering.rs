//! Polynomial filters over a covariance density operator,
//! `H(ρ)x = Σₖ hₖ ρᵏ x`, with their frequency responses and Lipschitz
//! diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceMatrix;
use crate::density::{density_operator, DensityOperator};
use crate::error::{Error, Result};
use crate::spectral::SpectralDecomposition;

/// Relative eigenvalue gap below which eigenvectors are treated as non-unique.
const REPEATED_EIGENVALUE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    coeffs: Vec<f64>,
    beta: f64,
    #[serde(default)]
    skip_k0: bool,
}

impl FilterSpec {
    pub fn new(coeffs: Vec<f64>, beta: f64) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::invalid("filter needs at least one coefficient"));
        }
        if coeffs.iter().any(|h| !h.is_finite()) {
            return Err(Error::NonFinite("filter coefficients"));
        }
        if !beta.is_finite() {
            return Err(Error::NonFinite("beta"));
        }
        Ok(Self {
            coeffs,
            beta,
            skip_k0: false,
        })
    }

    /// Drops the unfiltered `k = 0` term.
    pub fn with_skip_k0(mut self, skip: bool) -> Self {
        self.skip_k0 = skip;
        self
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn skip_k0(&self) -> bool {
        self.skip_k0
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    fn first_k(&self) -> usize {
        usize::from(self.skip_k0)
    }

    /// `Σₖ hₖ pᵏ` for a density eigenvalue `p`.
    pub fn polynomial(&self, p: f64) -> f64 {
        let mut acc = 0.0;
        let mut power = if self.skip_k0 { p } else { 1.0 };
        for h in &self.coeffs[self.first_k()..] {
            acc += h * power;
            power *= p;
        }
        acc
    }

    /// `Σₖ k hₖ pᵏ⁻¹`.
    pub fn polynomial_derivative(&self, p: f64) -> f64 {
        let mut acc = 0.0;
        let mut power = 1.0;
        for (k, h) in self.coeffs.iter().enumerate().skip(1) {
            acc += k as f64 * h * power;
            power *= p;
        }
        acc
    }
}

fn check_beta(f: &FilterSpec, rho: &DensityOperator) -> Result<()> {
    let tol = 1e-12 * f.beta.abs().max(1.0);
    if (f.beta - rho.beta()).abs() > tol {
        return Err(Error::invalid(format!(
            "filter beta {} does not match density operator beta {}",
            f.beta,
            rho.beta()
        )));
    }
    Ok(())
}

/// `H(ρ)x`, computed in the eigenbasis of the density operator.
pub fn filter_apply(f: &FilterSpec, rho: &DensityOperator, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_beta(f, rho)?;
    let basis = rho.basis();
    let mut coeffs = basis.to_spectral(x)?;
    for (c, p) in coeffs.iter_mut().zip(rho.density_eigenvalues().iter()) {
        *c *= f.polynomial(*p);
    }
    basis.from_spectral(&coeffs)
}

/// `H(ρ)x` through dense matrix powers of `ρ`; independent of the eigenbasis choice.
pub fn filter_apply_dense(
    f: &FilterSpec,
    rho: &DensityOperator,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_beta(f, rho)?;
    rho.basis().check_len(x.len())?;
    let dense = rho.to_dense();
    let mut out = DVector::zeros(x.len());
    let mut term = x.clone();
    for (k, h) in f.coeffs.iter().enumerate() {
        if k > 0 {
            term = &dense * &term;
        }
        if k >= f.first_k() {
            out += &term * *h;
        }
    }
    Ok(out)
}

/// `h(ρ(λ)) = Σₖ hₖ (exp(-βλ)/Z)ᵏ`.
///
/// `Z` belongs to the operator the response is evaluated on, so the response
/// depends on the whole spectrum and not just on `λ`.
pub fn frequency_response(f: &FilterSpec, lambda: f64, partition_function: f64) -> Result<f64> {
    if !(partition_function > 0.0) {
        return Err(Error::invalid(format!(
            "partition function must be positive, got {partition_function}"
        )));
    }
    Ok(f.polynomial((-f.beta * lambda).exp() / partition_function))
}

/// `α = Σₖ |hₖ| |βk|`.
pub fn lipschitz_alpha(f: &FilterSpec) -> f64 {
    f.coeffs
        .iter()
        .enumerate()
        .skip(f.first_k())
        .map(|(k, h)| h.abs() * (f.beta * k as f64).abs())
        .sum()
}

/// Smallest `θ` with `α <= θ / sup |λᵢ + λⱼ|/2` over pairs from `spectrum`.
pub fn integral_lipschitz_theta(f: &FilterSpec, spectrum: &[f64]) -> Result<f64> {
    if spectrum.is_empty() {
        return Err(Error::invalid("spectrum must be non-empty"));
    }
    let max = spectrum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
    let sup_mean = max.abs().max(min.abs());
    Ok(lipschitz_alpha(f) * sup_mean)
}

/// Covariance Fourier transform `Uᵀx`.
pub fn vft(decomp: &SpectralDecomposition, x: &DVector<f64>) -> Result<DVector<f64>> {
    decomp.to_spectral(x)
}

pub fn inverse_vft(decomp: &SpectralDecomposition, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
    decomp.from_spectral(coeffs)
}

/// A permutation `T` of `0..n`, stored as the index map `i -> perm[i]`.
///
/// `Tᵀx` is the vector with entries `x[perm[i]]` and `TᵀCT` has entries
/// `C[perm[i], perm[j]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::InvalidPermutation(format!("{perm:?} is not a permutation of 0..{n}")));
            }
            seen[p] = true;
        }
        Ok(Self(perm))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// `Tᵀx`.
    pub fn permute_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| x[self.0[i]])
    }

    /// `TᵀMT`.
    pub fn conjugate(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.len(), |i, j| m[(self.0[i], self.0[j])])
    }

    /// All permutations of `0..n` (Heap's algorithm order is not guaranteed; lexicographic).
    pub fn all(n: usize) -> Vec<Permutation> {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Permutation>) {
            if prefix.len() == used.len() {
                out.push(Permutation(prefix.clone()));
                return;
            }
            for i in 0..used.len() {
                if !used[i] {
                    used[i] = true;
                    prefix.push(i);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[i] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), &mut vec![false; n], &mut out);
        out
    }
}

/// `||H(ρ(TᵀCT))Tᵀx - TᵀH(ρ(C))x||_∞`.
pub fn check_permutation_equivariance(
    f: &FilterSpec,
    c: &CovarianceMatrix,
    x: &DVector<f64>,
    perm: &Permutation,
) -> Result<f64> {
    if perm.len() != c.dim() {
        return Err(Error::InvalidPermutation(format!(
            "permutation of length {} for dimension {}",
            perm.len(),
            c.dim()
        )));
    }
    if x.len() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            got: x.len(),
        });
    }
    let permuted = CovarianceMatrix::from_matrix(perm.conjugate(c.matrix()))?;
    let rho = density_operator(c, f.beta)?;
    let rho_p = density_operator(&permuted, f.beta)?;
    let x_p = perm.permute_vector(x);

    let dense = c.decomposition().has_repeated_eigenvalues(REPEATED_EIGENVALUE_TOL);
    let (lhs, rhs) = if dense {
        (
            filter_apply_dense(f, &rho_p, &x_p)?,
            filter_apply_dense(f, &rho, x)?,
        )
    } else {
        (filter_apply(f, &rho_p, &x_p)?, filter_apply(f, &rho, x)?)
    };
    Ok((lhs - perm.permute_vector(&rhs)).amax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> CovarianceMatrix {
        let g = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        CovarianceMatrix::from_matrix(&g * g.transpose()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_and_shift_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_psd(&mut rng, 4, 4);
        let rho = density_operator(&c, 0.8).unwrap();
        let x = random_vec(&mut rng, 4);
        let f = FilterSpec::new(vec![1.0], 0.8).unwrap();
        assert!((filter_apply(&f, &rho, &x).unwrap() - &x).amax() < 1e-14);
        let f = FilterSpec::new(vec![0.0, 1.0], 0.8).unwrap();
        assert!((filter_apply(&f, &rho, &x).unwrap() - rho.apply(&x).unwrap()).amax() < 1e-14);
    }

    #[test]
    fn matches_dense_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_psd(&mut rng, 3, 3);
        let rho = density_operator(&c, 1.0).unwrap();
        let x = random_vec(&mut rng, 3);
        let f = FilterSpec::new(vec![1.0, 2.0], 1.0).unwrap();
        let expected = &x + rho.to_dense() * &x * 2.0;
        let got = filter_apply(&f, &rho, &x).unwrap();
        assert!((&got - &expected).norm() <= 1e-9 * expected.norm());

        for _ in 0..100 {
            let n = rng.random_range(1..=16);
            let rank = rng.random_range(1..=n);
            let c = random_psd(&mut rng, n, rank);
            let beta = rng.random_range(-2.0..5.0);
            let k = rng.random_range(0..6);
            let coeffs: Vec<f64> = (0..=k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f = FilterSpec::new(coeffs, beta)
                .unwrap()
                .with_skip_k0(rng.random_bool(0.5));
            let rho = density_operator(&c, beta).unwrap();
            let x = random_vec(&mut rng, n);
            let a = filter_apply(&f, &rho, &x).unwrap();
            let b = filter_apply_dense(&f, &rho, &x).unwrap();
            assert!((&a - &b).norm() <= 1e-9 * b.norm().max(1e-12));
        }
    }

    #[test]
    fn beta_zero_collapses_to_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_psd(&mut rng, 5, 3);
        let rho = density_operator(&c, 0.0).unwrap();
        let f = FilterSpec::new(vec![0.5, 2.0, -1.0], 0.0).unwrap();
        let x = random_vec(&mut rng, 5);
        let scale = 0.5 + 2.0 / 5.0 - 1.0 / 25.0;
        assert!((filter_apply(&f, &rho, &x).unwrap() - &x * scale).amax() < 1e-14);
    }

    #[test]
    fn beta_mismatch_rejected() {
        let c = CovarianceMatrix::from_diagonal(&[1.0, 2.0]).unwrap();
        let rho = density_operator(&c, 1.0).unwrap();
        let f = FilterSpec::new(vec![1.0], 2.0).unwrap();
        assert!(filter_apply(&f, &rho, &DVector::zeros(2)).is_err());
        let f = FilterSpec::new(vec![1.0], 1.0).unwrap();
        assert!(matches!(
            filter_apply(&f, &rho, &DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn frequency_response_examples() {
        let f = FilterSpec::new(vec![0.0, 1.0], 1.0).unwrap();
        let z = (-0.3f64).exp();
        assert_abs_diff_eq!(frequency_response(&f, 0.3, z).unwrap(), 1.0, epsilon = 1e-15);

        let f = FilterSpec::new(vec![0.7, 1.5], 0.0).unwrap();
        for lambda in [0.0, 1.0, 9.0] {
            assert_abs_diff_eq!(
                frequency_response(&f, lambda, 4.0).unwrap(),
                0.7 + 1.5 / 4.0,
                epsilon = 1e-15
            );
        }

        let f = FilterSpec::new(vec![0.0, 1.0], 1.0).unwrap();
        let r = frequency_response(&f, 2.0, 2.13534).unwrap();
        assert_abs_diff_eq!(r, 0.06337, epsilon = 1e-5);

        assert!(frequency_response(&f, 1.0, 0.0).is_err());
    }

    #[test]
    fn spectral_apply_equals_response_at_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_psd(&mut rng, 6, 6);
        let beta = 0.6;
        let rho = density_operator(&c, beta).unwrap();
        let f = FilterSpec::new(vec![0.2, -1.0, 3.0], beta).unwrap();
        for (i, &lambda) in c.eigenvalues().iter().enumerate() {
            let direct = f.polynomial(rho.density_eigenvalues()[i]);
            let resp = frequency_response(&f, lambda, rho.partition_function()).unwrap();
            assert!((direct - resp).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(lipschitz_alpha(&FilterSpec::new(vec![1.0], 7.0).unwrap()), 0.0);
        assert_eq!(lipschitz_alpha(&FilterSpec::new(vec![0.0, 1.0], 2.0).unwrap()), 2.0);
        let f = FilterSpec::new(vec![1.0, 2.0, 3.0], 0.5).unwrap();
        assert_abs_diff_eq!(lipschitz_alpha(&f), 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lipschitz_alpha(&f.clone().with_skip_k0(true)), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn theta_examples() {
        let f = FilterSpec::new(vec![5.0], 1.0).unwrap();
        assert_eq!(integral_lipschitz_theta(&f, &[1.0, 3.0]).unwrap(), 0.0);
        let f = FilterSpec::new(vec![0.0, 2.0], 1.0).unwrap();
        assert_eq!(integral_lipschitz_theta(&f, &[1.0, 3.0]).unwrap(), 6.0);
        assert_eq!(integral_lipschitz_theta(&f, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(integral_lipschitz_theta(&f, &[]).is_err());
    }

    #[test]
    fn vft_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = crate::spectral::eigh(&DMatrix::identity(3, 3)).unwrap();
        let x = random_vec(&mut rng, 3);
        assert!((vft(&id, &x).unwrap() - &x).amax() < 1e-15);

        let c = random_psd(&mut rng, 5, 5);
        let d = c.decomposition();
        let x = random_vec(&mut rng, 5);
        let xt = vft(d, &x).unwrap();
        assert!((xt.norm() - x.norm()).abs() < 1e-12);
        assert!((inverse_vft(d, &xt).unwrap() - &x).amax() < 1e-10);
        let u2 = d.eigenvectors().column(2).into_owned();
        let e = vft(d, &u2).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(e[i], if i == 2 { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        assert_eq!(Permutation::all(3).len(), 6);
        assert_eq!(Permutation::all(4).len(), 24);
        let c = CovarianceMatrix::from_diagonal(&[1.0, 2.0]).unwrap();
        let f = FilterSpec::new(vec![1.0], 1.0).unwrap();
        assert!(matches!(
            check_permutation_equivariance(&f, &c, &DVector::zeros(2), &Permutation::identity(3)),
            Err(Error::InvalidPermutation(_))
        ));
    }

    #[test]
    fn equivariance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_psd(&mut rng, 3, 3);
        let x = random_vec(&mut rng, 3);
        let f = FilterSpec::new(vec![0.3, 1.0, -2.0], 1.5).unwrap();
        assert_eq!(
            check_permutation_equivariance(&f, &c, &x, &Permutation::identity(3)).unwrap(),
            0.0
        );
        for p in Permutation::all(3) {
            assert!(check_permutation_equivariance(&f, &c, &x, &p).unwrap() <= 1e-9);
        }
        // rank one: repeated zero eigenvalues
        let c = random_psd(&mut rng, 4, 1);
        let x = random_vec(&mut rng, 4);
        for p in Permutation::all(4) {
            assert!(check_permutation_equivariance(&f, &c, &x, &p).unwrap() <= 1e-9);
        }
    }
}
