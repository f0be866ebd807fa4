//! Dense symmetric eigendecomposition and spectral matrix functions.
//!
//! Everything downstream (density operators, filters, entropies) is computed
//! in the eigenbasis of a symmetric matrix, so this module pins down a
//! reproducible basis: eigenvalues ascending, and each eigenvector's first
//! nonzero entry positive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance used to accept (and then symmetrize) a nearly symmetric input.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Entries below this magnitude are treated as zero when fixing eigenvector signs.
const SIGN_THRESHOLD: f64 = 1e-12;

/// Orthonormal eigenbasis and ascending eigenvalues of a real symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    /// Builds a decomposition from parts that are already ordered and orthonormal.
    ///
    /// Used when eigenpairs are known analytically; no validation beyond shapes.
    pub fn from_parts(eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>) -> Result<Self> {
        let n = eigenvalues.len();
        if eigenvectors.nrows() != n || eigenvectors.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: eigenvectors.nrows(),
            });
        }
        Ok(Self {
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Columns are unit eigenvectors aligned with [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    /// True when two consecutive eigenvalues are closer than `tol * max(1, max|λ|)`.
    pub fn has_repeated_eigenvalues(&self, tol: f64) -> bool {
        let scale = self
            .eigenvalues
            .iter()
            .fold(1.0_f64, |acc, v| acc.max(v.abs()));
        self.eigenvalues
            .as_slice()
            .windows(2)
            .any(|w| (w[1] - w[0]).abs() <= tol * scale)
    }

    /// `V diag(f(λ)) Vᵀ` as a dense matrix.
    pub fn matrix_function<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let values = self.eigenvalues.map(f);
        self.matrix_from_values(&values)
    }

    /// `V diag(values) Vᵀ` for an explicit vector of spectral values.
    pub fn matrix_from_values(&self, values: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.eigenvectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= values[j];
        }
        &scaled * self.eigenvectors.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.matrix_from_values(&self.eigenvalues)
    }

    /// Projects `x` onto the eigenbasis: `Vᵀx`.
    pub fn to_spectral(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(x.len())?;
        Ok(self.eigenvectors.tr_mul(x))
    }

    /// Maps eigenbasis coefficients back: `V x̃`.
    pub fn from_spectral(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(coeffs.len())?;
        Ok(&self.eigenvectors * coeffs)
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }
}

fn require_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

/// Checks near-symmetry and returns `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    require_square(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix"));
    }
    let scale = m.amax().max(1.0);
    let tolerance = SYMMETRY_TOLERANCE * scale;
    let mut asymmetry = 0.0_f64;
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            asymmetry = asymmetry.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asymmetry > tolerance {
        return Err(Error::NotSymmetric {
            asymmetry,
            tolerance,
        });
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Symmetric eigendecomposition with ascending eigenvalues and a fixed sign convention.
pub fn eigh(m: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    let sym = symmetrize(m)?;
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        if let Some(first) = col.iter().find(|v| v.abs() > SIGN_THRESHOLD) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        eigenvectors.set_column(dst, &col);
    }

    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// `V diag(f(λ)) Vᵀ x` without forming the dense matrix.
pub fn apply_spectral_function<F: Fn(f64) -> f64>(
    decomp: &SpectralDecomposition,
    f: F,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut coeffs = decomp.to_spectral(x)?;
    for (c, &lambda) in coeffs.iter_mut().zip(decomp.eigenvalues.iter()) {
        *c *= f(lambda);
    }
    decomp.from_spectral(&coeffs)
}

/// Largest singular value of a square matrix.
pub fn operator_norm(m: &DMatrix<f64>) -> Result<f64> {
    require_square(m)?;
    if m.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let svd = m.clone().svd(false, false);
    Ok(svd.singular_values.max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let d = eigh(&DMatrix::identity(3, 3)).unwrap();
        for v in d.eigenvalues().iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-14);
        }
        let vtv = d.eigenvectors().transpose() * d.eigenvectors();
        assert!((vtv - DMatrix::identity(3, 3)).amax() < 1e-12);
        for col in d.eigenvectors().column_iter() {
            let first = col.iter().find(|v| v.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn diagonal_eigenvalues_sorted() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0, 0.0]));
        let d = eigh(&m).unwrap();
        assert_eq!(d.eigenvalues().as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn two_by_two_hand_solution() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let d = eigh(&m).unwrap();
        assert_abs_diff_eq!(d.eigenvalues()[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.eigenvalues()[1], 3.0, epsilon = 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = d.eigenvectors();
        assert_abs_diff_eq!(v[(0, 0)], s, epsilon = 1e-14);
        assert_abs_diff_eq!(v[(1, 0)], -s, epsilon = 1e-14);
        assert_abs_diff_eq!(v[(0, 1)], s, epsilon = 1e-14);
        assert_abs_diff_eq!(v[(1, 1)], s, epsilon = 1e-14);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            eigh(&DMatrix::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(eigh(&m), Err(Error::NotSymmetric { .. })));
        // roundoff-level asymmetry is accepted
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5 + 1e-14, 1.0]);
        assert!(eigh(&m).is_ok());
    }

    #[test]
    fn random_symmetric_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = random_symmetric(&mut rng, 8);
            let d = eigh(&m).unwrap();
            let v = d.eigenvectors();
            let orth = (v.transpose() * v - DMatrix::identity(8, 8)).amax();
            assert!(orth <= 1e-10, "orthonormality {orth}");
            let scale = m.amax().max(1.0);
            assert!((d.reconstruct() - &m).amax() <= 1e-8 * scale);
            assert!(d
                .eigenvalues()
                .as_slice()
                .windows(2)
                .all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn deterministic_for_fixed_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_symmetric(&mut rng, 6);
        assert_eq!(eigh(&m).unwrap(), eigh(&m).unwrap());
    }

    #[test]
    fn spectral_function_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_symmetric(&mut rng, 5);
        let d = eigh(&m).unwrap();
        let x = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));

        let y = apply_spectral_function(&d, |l| l, &x).unwrap();
        let dense = &m * &x;
        assert!((&y - &dense).norm() <= 1e-9 * dense.norm().max(1e-300));

        let y = apply_spectral_function(&d, |_| 1.0, &x).unwrap();
        assert!((&y - &x).amax() < 1e-12);

        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let d = eigh(&m).unwrap();
        let y = apply_spectral_function(&d, |l| l * l, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(y[1], 4.0, epsilon = 1e-14);

        assert!(matches!(
            apply_spectral_function(&d, |l| l, &DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn operator_norm_examples() {
        assert_eq!(operator_norm(&DMatrix::zeros(3, 3)).unwrap(), 0.0);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-3.0, 2.0]));
        assert_abs_diff_eq!(operator_norm(&m).unwrap(), 3.0, epsilon = 1e-14);
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(operator_norm(&m).unwrap(), 1.0, epsilon = 1e-14);
        assert!(operator_norm(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn operator_norm_transpose_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let m = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-2.0..2.0));
            let a = operator_norm(&m).unwrap();
            let b = operator_norm(&m.transpose()).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn symmetric_norm_is_max_abs_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_symmetric(&mut rng, 7);
        let d = eigh(&m).unwrap();
        let expected = d.min_eigenvalue().abs().max(d.max_eigenvalue().abs());
        assert_abs_diff_eq!(operator_norm(&m).unwrap(), expected, epsilon = 1e-12);
    }
}
