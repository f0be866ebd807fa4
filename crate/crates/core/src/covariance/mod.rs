//! Sample covariance estimation and the two regularizations used throughout:
//! shifting the spectrum so its minimum is zero, and trace normalization.
//!
//! The sample covariance uses divisor `n` (not `n - 1`).

mod generators;

pub use generators::{
    gen_ar_process, gen_ar_process_with, gen_gaussian_data, gen_graph_stationary,
    laplacian_from_adjacency, SpectrumFamily, AR_EQUICORRELATION,
};

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{eigh, symmetrize, SpectralDecomposition};

/// Relative tolerance for the PSD check: `min λ >= -PSD_TOLERANCE * ||C||`.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Observations in rows, variables in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
}

impl DataMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("data matrix must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("data matrix"));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), dim, &flat))
    }

    /// Reads a comma-separated matrix, one observation per row.
    ///
    /// Ragged rows are rejected.
    pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<Self> {
        let rows = read_csv_rows(reader, has_header)?;
        if rows.is_empty() {
            return Err(Error::invalid("csv input has no data rows"));
        }
        Self::from_rows(&rows)
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Rows `start..end` as a new data matrix.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_samples() {
            return Err(Error::invalid(format!(
                "row range {start}..{end} out of bounds for {} samples",
                self.n_samples()
            )));
        }
        Self::new(self.values.rows(start, end - start).into_owned())
    }
}

pub(crate) fn read_csv_rows<R: Read>(reader: R, has_header: bool) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    Error::invalid(format!("row {}: cannot parse '{field}' as a number", line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    Raw,
    ShiftedMinEigZero,
    TraceNormalized,
}

/// A symmetric positive semidefinite matrix together with its eigendecomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    matrix: DMatrix<f64>,
    decomposition: SpectralDecomposition,
    regularization: Regularization,
    min_eig_shift: f64,
}

impl CovarianceMatrix {
    /// Validates symmetry and positive semidefiniteness of a supplied matrix.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let matrix = symmetrize(&matrix)?;
        let decomposition = eigh(&matrix)?;
        let norm = decomposition
            .min_eigenvalue()
            .abs()
            .max(decomposition.max_eigenvalue().abs());
        if decomposition.min_eigenvalue() < -PSD_TOLERANCE * norm {
            return Err(Error::NotPsd {
                min_eigenvalue: decomposition.min_eigenvalue(),
            });
        }
        Ok(Self {
            matrix,
            decomposition,
            regularization: Regularization::Raw,
            min_eig_shift: 0.0,
        })
    }

    pub fn from_diagonal(values: &[f64]) -> Result<Self> {
        Self::from_matrix(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    /// Reads a square symmetric matrix from CSV.
    pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<Self> {
        let rows = read_csv_rows(reader, has_header)?;
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::NotSquare {
                rows: n,
                cols: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::from_matrix(DMatrix::from_row_slice(n, n, &flat))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn decomposition(&self) -> &SpectralDecomposition {
        &self.decomposition
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        self.decomposition.eigenvalues()
    }

    pub fn regularization(&self) -> Regularization {
        self.regularization
    }

    pub fn min_eig_shift(&self) -> f64 {
        self.min_eig_shift
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Spectral norm, `max |λ|`.
    pub fn norm(&self) -> f64 {
        self.decomposition
            .min_eigenvalue()
            .abs()
            .max(self.decomposition.max_eigenvalue().abs())
    }

    /// `C - mI` with `m` the minimum eigenvalue.
    ///
    /// The eigenbasis is reused, so the shifted spectrum is exactly `λ - m`.
    pub fn shift_regularize(&self) -> CovarianceMatrix {
        let m = self.decomposition.min_eigenvalue();
        let mut matrix = self.matrix.clone();
        for i in 0..self.dim() {
            matrix[(i, i)] -= m;
        }
        let eigenvalues = self.decomposition.eigenvalues().map(|l| l - m);
        let decomposition = SpectralDecomposition::from_parts(
            eigenvalues,
            self.decomposition.eigenvectors().clone(),
        )
        .expect("shapes preserved");
        CovarianceMatrix {
            matrix,
            decomposition,
            regularization: Regularization::ShiftedMinEigZero,
            min_eig_shift: m,
        }
    }

    /// `C / tr(C)`.
    pub fn trace_normalize(&self) -> Result<CovarianceMatrix> {
        let trace = self.trace();
        if trace <= 1e-14 {
            return Err(Error::DegenerateCovariance(trace));
        }
        let eigenvalues = self.decomposition.eigenvalues() / trace;
        let decomposition = SpectralDecomposition::from_parts(
            eigenvalues,
            self.decomposition.eigenvectors().clone(),
        )?;
        Ok(CovarianceMatrix {
            matrix: &self.matrix / trace,
            decomposition,
            regularization: Regularization::TraceNormalized,
            min_eig_shift: self.min_eig_shift,
        })
    }

    /// Sum of two covariances of matching dimension.
    pub fn add(&self, other: &CovarianceMatrix) -> Result<CovarianceMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        CovarianceMatrix::from_matrix(&self.matrix + &other.matrix)
    }

    /// `α C` for `α > 0`.
    pub fn scaled(&self, alpha: f64) -> Result<CovarianceMatrix> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {alpha}")));
        }
        CovarianceMatrix::from_matrix(&self.matrix * alpha)
    }
}

/// Centered sample covariance with divisor `n`.
pub fn sample_covariance(data: &DataMatrix) -> Result<CovarianceMatrix> {
    let n = data.n_samples();
    if n < 2 {
        return Err(Error::InsufficientData(n));
    }
    let x = data.values();
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let gram = centered.tr_mul(&centered) / n as f64;
    CovarianceMatrix::from_matrix(gram)
}
