//! Covariance storage and Gaussian log-densities.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MsmError, Result};

/// Smallest admissible covariance eigenvalue.
pub const COV_FLOOR: f64 = 1e-6;

/// Relative slack applied when validating the floor, so that floored values
/// that went through a serialization round trip still validate.
const FLOOR_SLACK: f64 = 1e-9;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Diagonal,
    Full,
}

/// Symmetric positive definite covariance with cached precision and
/// log-determinant.
#[derive(Clone, Debug)]
pub struct Covariance {
    kind: CovarianceKind,
    matrix: DMatrix<f64>,
    /// Row-major inverse.
    precision: Vec<f64>,
    log_det: f64,
}

impl PartialEq for Covariance {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.matrix == other.matrix
    }
}

impl Covariance {
    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let m = diag.len();
        if m == 0 {
            return Err(MsmError::InvalidParameter("empty covariance".into()));
        }
        for (i, &v) in diag.iter().enumerate() {
            if !v.is_finite() {
                return Err(MsmError::NonFinite(format!("covariance diagonal[{i}]")));
            }
            if v < COV_FLOOR * (1.0 - FLOOR_SLACK) {
                return Err(MsmError::InvalidParameter(format!(
                    "covariance diagonal[{i}] = {v:e} below floor {COV_FLOOR:e}"
                )));
            }
        }
        let matrix = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag));
        let mut precision = vec![0.0; m * m];
        for i in 0..m {
            precision[i * m + i] = 1.0 / diag[i];
        }
        let log_det = diag.iter().map(|v| v.ln()).sum();
        Ok(Covariance {
            kind: CovarianceKind::Diagonal,
            matrix,
            precision,
            log_det,
        })
    }

    pub fn isotropic(m: usize, variance: f64) -> Result<Self> {
        Self::diagonal(&vec![variance; m])
    }

    /// Dense SPD covariance. Must be symmetric with every eigenvalue at or
    /// above [`COV_FLOOR`].
    pub fn full(matrix: DMatrix<f64>) -> Result<Self> {
        let m = matrix.nrows();
        if m == 0 || matrix.ncols() != m {
            return Err(MsmError::dim("covariance columns", m, matrix.ncols()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(MsmError::NonFinite("covariance".into()));
        }
        for i in 0..m {
            for j in 0..i {
                let (a, b) = (matrix[(i, j)], matrix[(j, i)]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(MsmError::InvalidParameter(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let min_eig = matrix
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < COV_FLOOR * (1.0 - FLOOR_SLACK) {
            return Err(MsmError::InvalidParameter(format!(
                "covariance eigenvalue {min_eig:e} below floor {COV_FLOOR:e}"
            )));
        }
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| MsmError::Singular("covariance not positive definite".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv = chol.inverse();
        let mut precision = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                precision[i * m + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            }
        }
        Ok(Covariance {
            kind: CovarianceKind::Full,
            matrix,
            precision,
            log_det,
        })
    }

    pub fn with_kind(kind: CovarianceKind, matrix: DMatrix<f64>) -> Result<Self> {
        match kind {
            CovarianceKind::Full => Self::full(matrix),
            CovarianceKind::Diagonal => {
                let m = matrix.nrows();
                for i in 0..m {
                    for j in 0..m {
                        if i != j && matrix[(i, j)] != 0.0 {
                            return Err(MsmError::InvalidParameter(
                                "diagonal covariance has off-diagonal entries".into(),
                            ));
                        }
                    }
                }
                Self::diagonal(matrix.diagonal().as_slice())
            }
        }
    }

    /// Constrained maximum-likelihood covariance from a (weighted, normalized)
    /// scatter matrix: eigenvalues clamped at `floor`, or the clamped diagonal
    /// in diagonal mode.
    pub fn from_scatter(scatter: &DMatrix<f64>, kind: CovarianceKind, floor: f64) -> Result<Self> {
        let floor = floor.max(COV_FLOOR);
        match kind {
            CovarianceKind::Diagonal => {
                let d: Vec<f64> = scatter.diagonal().iter().map(|v| v.max(floor)).collect();
                Self::diagonal(&d)
            }
            CovarianceKind::Full => {
                let sym = (scatter + scatter.transpose()) * 0.5;
                let eig = sym.symmetric_eigen();
                let vals = eig.eigenvalues.map(|v| v.max(floor));
                let v = &eig.eigenvectors;
                let mut rebuilt = v * DMatrix::from_diagonal(&vals) * v.transpose();
                // exact symmetry for the validator
                let m = rebuilt.nrows();
                for i in 0..m {
                    for j in 0..i {
                        let avg = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
                        rebuilt[(i, j)] = avg;
                        rebuilt[(j, i)] = avg;
                    }
                }
                Self::full(rebuilt)
            }
        }
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `A Σ Aᵀ`, stored as a full covariance.
    pub fn transformed(&self, a: &DMatrix<f64>) -> Result<Self> {
        let mut out = a * &self.matrix * a.transpose();
        let m = out.nrows();
        for i in 0..m {
            for j in 0..i {
                let avg = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = avg;
                out[(j, i)] = avg;
            }
        }
        Self::full(out)
    }

    /// `rᵀ Σ⁻¹ r`.
    #[inline]
    pub fn mahalanobis_sq(&self, r: &[f64]) -> f64 {
        let m = r.len();
        match self.kind {
            CovarianceKind::Diagonal => (0..m).map(|i| r[i] * r[i] * self.precision[i * m + i]).sum(),
            CovarianceKind::Full => {
                let mut acc = 0.0;
                for i in 0..m {
                    let row = &self.precision[i * m..(i + 1) * m];
                    let mut s = 0.0;
                    for j in 0..m {
                        s += row[j] * r[j];
                    }
                    acc += r[i] * s;
                }
                acc
            }
        }
    }

    /// `Σ⁻¹ r` written into `out`.
    #[inline]
    pub fn precision_times(&self, r: &[f64], out: &mut [f64]) {
        let m = r.len();
        for i in 0..m {
            let row = &self.precision[i * m..(i + 1) * m];
            out[i] = row.iter().zip(r).map(|(p, x)| p * x).sum();
        }
    }

    /// `log N(x; mean, Σ)`.
    #[inline]
    pub fn log_density(&self, x: &[f64], mean: &[f64]) -> f64 {
        let m = x.len();
        let mut buf = [0.0f64; 16];
        let quad = if m <= 16 {
            for i in 0..m {
                buf[i] = x[i] - mean[i];
            }
            self.mahalanobis_sq(&buf[..m])
        } else {
            let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
            self.mahalanobis_sq(&r)
        };
        -0.5 * (m as f64 * LN_2PI + self.log_det + quad)
    }

    /// Serializable view: diagonal entries or the row-major dense matrix.
    pub fn stored_values(&self) -> Vec<f64> {
        match self.kind {
            CovarianceKind::Diagonal => self.matrix.diagonal().iter().cloned().collect(),
            CovarianceKind::Full => {
                let m = self.dim();
                let mut v = Vec::with_capacity(m * m);
                for i in 0..m {
                    for j in 0..m {
                        v.push(self.matrix[(i, j)]);
                    }
                }
                v
            }
        }
    }

    pub fn from_stored(kind: CovarianceKind, m: usize, values: &[f64]) -> Result<Self> {
        match kind {
            CovarianceKind::Diagonal => {
                if values.len() != m {
                    return Err(MsmError::dim("diagonal covariance values", m, values.len()));
                }
                Self::diagonal(values)
            }
            CovarianceKind::Full => {
                if values.len() != m * m {
                    return Err(MsmError::dim("full covariance values", m * m, values.len()));
                }
                Self::full(DMatrix::from_row_slice(m, m, values))
            }
        }
    }
}
