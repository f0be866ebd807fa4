use cdnn::betafit::{fit_beta, moment_derivatives, FitConfig};
use cdnn::covariance::{sample_covariance, CovarianceMatrix, DataMatrix};
use cdnn::density::density_operator;
use cdnn::entropy::{cvne, gibbs_entropy, naive_entropy};
use cdnn::filtering::{filter_apply, filter_apply_dense, FilterSpec, Permutation};
use cdnn::lab::{read_records_csv, records_from_json, records_to_json, write_records_csv, TrialRecord};
use cdnn::spectral::{apply_spectral_function, eigh, operator_norm};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(n: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0..3.0f64, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v))
}

fn symmetric(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n, n).prop_map(|a| (&a + a.transpose()) * 0.5)
}

/// `G Gᵀ` for a `dim × rank` matrix `G`, so rank-deficient inputs are common.
fn psd(max_dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_dim)
        .prop_flat_map(|n| (Just(n), 1..=n))
        .prop_flat_map(|(n, k)| matrix(n, k))
        .prop_map(|g| &g * g.transpose())
}

fn covariance(max_dim: usize) -> impl Strategy<Value = CovarianceMatrix> {
    psd(max_dim).prop_map(|m| CovarianceMatrix::from_matrix(m).unwrap())
}

fn vector(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-2.0..2.0f64, n).prop_map(DVector::from_vec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn eigh_reconstructs_and_is_orthonormal(m in symmetric(8)) {
        let d = eigh(&m).unwrap();
        let v = d.eigenvectors();
        prop_assert!((d.reconstruct() - &m).amax() <= 1e-10 * m.amax().max(1.0));
        prop_assert!((v.transpose() * v - DMatrix::identity(8, 8)).amax() <= 1e-10);
        prop_assert!(d.eigenvalues().as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn spectral_identity_matches_dense_product(m in symmetric(6), x in vector(6)) {
        let d = eigh(&m).unwrap();
        let y = apply_spectral_function(&d, |l| l, &x).unwrap();
        let dense = &m * &x;
        prop_assert!((y - &dense).amax() <= 1e-9 * dense.amax().max(1.0));
    }

    #[test]
    fn operator_norm_is_transpose_invariant(m in matrix(5, 5)) {
        let a = operator_norm(&m).unwrap();
        let b = operator_norm(&m.transpose()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn sample_covariance_is_psd(x in (2usize..30, 1usize..6).prop_flat_map(|(n, d)| matrix(n, d))) {
        let c = sample_covariance(&DataMatrix::new(x).unwrap()).unwrap();
        prop_assert!(c.eigenvalues().min() >= -1e-10 * c.norm().max(1.0));
    }

    #[test]
    fn shift_regularize_shifts_only_eigenvalues(c in covariance(6)) {
        let s = c.shift_regularize();
        let fresh = eigh(s.matrix()).unwrap();
        let shift = c.eigenvalues().min();
        for (a, b) in fresh.eigenvalues().iter().zip(c.eigenvalues().iter()) {
            prop_assert!((a - (b - shift)).abs() <= 1e-9 * c.norm().max(1.0));
        }
        prop_assert!(s.eigenvalues().min().abs() <= 1e-12 * c.norm().max(1.0));
    }

    #[test]
    fn regularizers_commute_with_permutations(c in covariance(4)) {
        prop_assume!(c.trace() > 1e-9);
        for p in Permutation::all(c.dim()) {
            let permuted = CovarianceMatrix::from_matrix(p.conjugate(c.matrix())).unwrap();
            let a = permuted.shift_regularize();
            let b = p.conjugate(c.shift_regularize().matrix());
            prop_assert!((a.matrix() - b).amax() <= 1e-9 * c.norm().max(1.0));
            let a = permuted.trace_normalize().unwrap();
            let b = p.conjugate(c.trace_normalize().unwrap().matrix());
            prop_assert!((a.matrix() - b).amax() <= 1e-12);
        }
    }

    #[test]
    fn density_has_unit_trace_and_positive_spectrum(
        c in covariance(12),
        beta in prop::sample::select(vec![-5.0f64, -1.0, -0.1, 0.0, 0.1, 1.0, 5.0, 15.0]),
    ) {
        prop_assume!(beta.abs() * c.norm() <= 700.0);
        let rho = density_operator(&c, beta).unwrap();
        let p = rho.density_eigenvalues();
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        prop_assert!((rho.to_dense().trace() - 1.0).abs() <= 1e-12);
        prop_assert!(p.min() > 0.0);
        prop_assert!(p.iter().map(|v| v.ln()).sum::<f64>().is_finite());
    }

    #[test]
    fn density_orders_eigenvalues_by_scale(c in covariance(8), beta in 0.05..3.0f64, sign in prop::bool::ANY) {
        let beta = if sign { beta } else { -beta };
        let rho = density_operator(&c, beta).unwrap();
        let l = rho.source_spectrum();
        let p = rho.density_eigenvalues();
        for i in 0..l.len() {
            for j in 0..l.len() {
                if l[i] < l[j] - 1e-9 {
                    let ordered = if beta > 0.0 { p[i] >= p[j] } else { p[i] <= p[j] };
                    prop_assert!(ordered);
                }
            }
        }
    }

    #[test]
    fn spectral_filter_matches_dense(
        c in covariance(10),
        coeffs in prop::collection::vec(-1.0..1.0f64, 1..5),
        beta in -2.0..2.0f64,
        seed in prop::collection::vec(-1.0..1.0f64, 10),
    ) {
        let x = DVector::from_iterator(c.dim(), seed.into_iter().take(c.dim()));
        let f = FilterSpec::new(coeffs, beta).unwrap();
        let rho = density_operator(&c, beta).unwrap();
        let a = filter_apply(&f, &rho, &x).unwrap();
        let b = filter_apply_dense(&f, &rho, &x).unwrap();
        prop_assert!((&a - &b).amax() <= 1e-9 * b.amax().max(1.0));
    }

    #[test]
    fn zero_beta_filter_is_a_scalar_multiple(
        c in covariance(8),
        coeffs in prop::collection::vec(-1.0..1.0f64, 1..5),
        seed in prop::collection::vec(-1.0..1.0f64, 8),
    ) {
        let m = c.dim();
        let x = DVector::from_iterator(m, seed.into_iter().take(m));
        let f = FilterSpec::new(coeffs.clone(), 0.0).unwrap();
        let y = filter_apply(&f, &density_operator(&c, 0.0).unwrap(), &x).unwrap();
        let gain: f64 = coeffs.iter().enumerate().map(|(k, h)| h / (m as f64).powi(k as i32)).sum();
        prop_assert!((y - &x * gain).amax() <= 1e-12);
    }

    #[test]
    fn naive_entropy_ignores_scale(c in covariance(8), alpha in prop::sample::select(vec![0.1f64, 2.0, 100.0])) {
        prop_assume!(c.trace() > 1e-9);
        let a = naive_entropy(&c).unwrap();
        let b = naive_entropy(&c.scaled(alpha).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn gibbs_form_matches_cvne(c in covariance(10), beta in -3.0..3.0f64) {
        prop_assume!(beta.abs() * c.norm() <= 700.0);
        let r = cvne(&c, beta).unwrap();
        prop_assert!(r.entropy_nats >= 0.0 && r.entropy_nats <= (c.dim() as f64).ln() + 1e-12);
        prop_assert!((r.entropy_nats - gibbs_entropy(&c, beta).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn cvne_decreases_with_beta(c in covariance(8)) {
        let s = c.shift_regularize();
        prop_assume!(s.norm() * 15.0 <= 700.0);
        let curve: Vec<f64> = (0..=30).map(|i| cvne(&s, i as f64 * 0.5).unwrap().entropy_nats).collect();
        prop_assert!(curve.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn rank_one_entropy_is_finite(v in (1usize..=64).prop_flat_map(vector)) {
        let c = CovarianceMatrix::from_matrix(&v * v.transpose()).unwrap();
        prop_assume!(c.norm() <= 700.0);
        let s = cvne(&c, 1.0).unwrap().entropy_nats;
        prop_assert!(s.is_finite() && s >= 0.0);
    }

    #[test]
    fn moment_objective_is_convex(spectrum in prop::collection::vec(-3.0..5.0f64, 2..10), beta in -2.0..2.0f64) {
        let p = vec![1.0 / spectrum.len() as f64; spectrum.len()];
        let (_, curvature) = moment_derivatives(&spectrum, &p, beta).unwrap();
        prop_assert!(curvature >= -1e-12);
    }

    #[test]
    fn beta_fit_is_optimal_and_unique(
        spectrum in prop::collection::vec(0.0..5.0f64, 2..10),
        weights in prop::collection::vec(0.05..1.0f64, 10),
        brackets in prop::collection::vec(1e-3..50.0f64, 10),
    ) {
        let lo = spectrum.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = spectrum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi - lo > 1e-3);
        let w = &weights[..spectrum.len()];
        let total: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / total).collect();
        let fit = fit_beta(&spectrum, &p, &FitConfig::default()).unwrap();
        prop_assert!(fit.gradient_at_solution.abs() <= 1e-8);
        for b in brackets {
            let other = fit_beta(&spectrum, &p, &FitConfig { initial_bracket: b, ..FitConfig::default() }).unwrap();
            prop_assert!((other.beta_star - fit.beta_star).abs() <= 1e-8);
        }
    }
}

fn record() -> impl Strategy<Value = TrialRecord> {
    let name = "[a-z_]{1,8}";
    let value = prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO;
    (
        "[a-z_]{1,10}",
        "[a-z0-9=._,-]{0,12}",
        any::<usize>(),
        any::<u64>(),
        prop::collection::btree_map(name, value, 0..4),
        prop::collection::btree_map(name, value, 0..4),
    )
        .prop_map(|(experiment, variant, trial, seed, params, metrics)| TrialRecord {
            experiment,
            variant,
            trial,
            seed,
            params,
            metrics,
        })
}

proptest! {
    #[test]
    fn records_round_trip(records in prop::collection::vec(record(), 0..6)) {
        let json = records_to_json(&records).unwrap();
        prop_assert_eq!(&records_from_json(&json).unwrap(), &records);
        prop_assume!(!records.is_empty());
        let mut buf = Vec::new();
        write_records_csv(&records, &mut buf).unwrap();
        prop_assert_eq!(read_records_csv(buf.as_slice()).unwrap(), records);
    }
}
