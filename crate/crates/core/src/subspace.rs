//! Linear algebra on the sum-to-zero subspace `E = {v : 1'v = 0}`.
//!
//! Every operator is handled through its reduced form `H'AH`, where the
//! columns of `H` are an orthonormal basis of `E`. The constrained inverse
//! `A_*^{-1}` is then `H (H'AH)^{-1} H'`, which annihilates the constant
//! vector, and `log|A_*^{-1}|_+ = -log det(H'AH)`.

use std::sync::{Arc, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::graph::IcarStructure;

/// Orthonormal basis of the sum-to-zero subspace of `R^n`.
#[derive(Debug, Clone)]
pub enum SumToZeroBasis {
    /// Helmert contrasts, applied implicitly in `O(n)`. Column `k`
    /// (1-based `m = k + 1`) has `1/sqrt(m(m+1))` in rows `0..m` and
    /// `-m/sqrt(m(m+1))` in row `m`.
    Helmert { n: usize },
    /// Arbitrary orthonormal columns, stored densely.
    Explicit { columns: Arc<DMatrix<f64>> },
}

impl SumToZeroBasis {
    pub fn helmert(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::BasisTooSmall(n));
        }
        Ok(Self::Helmert { n })
    }

    /// Eigenvectors of the centering matrix `C_n = I - 11'/n` for its unit
    /// eigenvalues. Sign fixed so the first nonzero entry of each column is
    /// positive.
    pub fn centering_eigenvectors(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::BasisTooSmall(n));
        }
        let c = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0 - 1.0 / n as f64
            } else {
                -1.0 / n as f64
            }
        });
        let eig = SymmetricEigen::new(c);
        let mut cols: Vec<DVector<f64>> = eig
            .eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .filter(|(&lambda, _)| lambda > 0.5)
            .map(|(_, v)| v.into_owned())
            .collect();
        for v in &mut cols {
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-12).copied() {
                if first < 0.0 {
                    v.neg_mut();
                }
            }
        }
        Ok(Self::from_columns(DMatrix::from_columns(&cols)))
    }

    /// Wraps caller-supplied orthonormal columns. Orthonormality and
    /// orthogonality to `1` are not checked here.
    pub fn from_columns(columns: DMatrix<f64>) -> Self {
        Self::Explicit {
            columns: Arc::new(columns),
        }
    }

    /// Ambient dimension `n`.
    pub fn n(&self) -> usize {
        match self {
            Self::Helmert { n } => *n,
            Self::Explicit { columns } => columns.nrows(),
        }
    }

    /// Subspace dimension `n - 1`.
    pub fn dim(&self) -> usize {
        match self {
            Self::Helmert { n } => n - 1,
            Self::Explicit { columns } => columns.ncols(),
        }
    }

    /// `H'v`.
    pub fn restrict(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Helmert { n } => {
                let mut out = DVector::zeros(n - 1);
                let mut prefix = 0.0;
                for m in 1..*n {
                    prefix += v[m - 1];
                    let scale = 1.0 / ((m * (m + 1)) as f64).sqrt();
                    out[m - 1] = (prefix - m as f64 * v[m]) * scale;
                }
                out
            }
            Self::Explicit { columns } => columns.tr_mul(v),
        }
    }

    /// `H theta`.
    pub fn extend(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Helmert { n } => {
                let n = *n;
                let mut out = DVector::zeros(n);
                // suffix = sum over columns m > i of theta_{m-1} / sqrt(m(m+1))
                let mut suffix = 0.0;
                for i in (0..n).rev() {
                    if i >= 1 {
                        let scale = 1.0 / ((i * (i + 1)) as f64).sqrt();
                        out[i] = suffix - i as f64 * scale * theta[i - 1];
                        suffix += theta[i - 1] * scale;
                    } else {
                        out[i] = suffix;
                    }
                }
                out
            }
            Self::Explicit { columns } => columns.as_ref() * theta,
        }
    }

    /// `H'M`, column by column.
    pub fn restrict_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Helmert { .. } => {
                let cols: Vec<DVector<f64>> = m
                    .column_iter()
                    .map(|c| self.restrict(&c.into_owned()))
                    .collect();
                if cols.is_empty() {
                    DMatrix::zeros(self.dim(), 0)
                } else {
                    DMatrix::from_columns(&cols)
                }
            }
            Self::Explicit { columns } => columns.tr_mul(m),
        }
    }

    /// `H M`, column by column.
    pub fn extend_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Helmert { .. } => {
                let cols: Vec<DVector<f64>> = m
                    .column_iter()
                    .map(|c| self.extend(&c.into_owned()))
                    .collect();
                if cols.is_empty() {
                    DMatrix::zeros(self.n(), 0)
                } else {
                    DMatrix::from_columns(&cols)
                }
            }
            Self::Explicit { columns } => columns.as_ref() * m,
        }
    }

    /// `H'AH` for a dense symmetric `A`.
    pub fn congruence(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let ha = self.restrict_columns(a); // H'A, (n-1) x n
        self.restrict_columns(&ha.transpose()) // H'(H'A)' = H'AH
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Helmert { n } => self.extend_columns(&DMatrix::identity(n - 1, n - 1)),
            Self::Explicit { columns } => columns.as_ref().clone(),
        }
    }
}

/// A symmetric operator on `R^n` that can produce its reduced form `H'AH`.
pub trait ReducedForm {
    fn size(&self) -> usize;
    fn reduce(&self, basis: &SumToZeroBasis) -> DMatrix<f64>;
}

impl ReducedForm for DMatrix<f64> {
    fn size(&self) -> usize {
        self.nrows()
    }

    fn reduce(&self, basis: &SumToZeroBasis) -> DMatrix<f64> {
        basis.congruence(self)
    }
}

impl ReducedForm for IcarStructure {
    fn size(&self) -> usize {
        self.n()
    }

    fn reduce(&self, basis: &SumToZeroBasis) -> DMatrix<f64> {
        let rh = self.laplacian().mul_dense(&basis.to_dense());
        let k = basis.restrict_columns(&rh);
        symmetrize(k)
    }
}

/// `sum_i c_i A_i` over borrowed operators.
pub struct LinearCombination<'a> {
    terms: Vec<(f64, &'a dyn ReducedForm)>,
}

impl<'a> LinearCombination<'a> {
    pub fn new() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn with(mut self, coefficient: f64, op: &'a dyn ReducedForm) -> Self {
        self.terms.push((coefficient, op));
        self
    }
}

impl Default for LinearCombination<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl ReducedForm for LinearCombination<'_> {
    fn size(&self) -> usize {
        self.terms.first().map_or(0, |(_, op)| op.size())
    }

    fn reduce(&self, basis: &SumToZeroBasis) -> DMatrix<f64> {
        let d = basis.dim();
        self.terms
            .iter()
            .fold(DMatrix::zeros(d, d), |acc, (c, op)| {
                acc + op.reduce(basis) * *c
            })
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Factorized constrained inverse of an operator that is positive definite
/// on `E`. Represents `Sigma = H A_E^{-1} H'` without forming it.
#[derive(Debug, Clone)]
pub struct ConstrainedOperator {
    basis: SumToZeroBasis,
    reduced: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    reduced_inverse: OnceLock<DMatrix<f64>>,
}

/// Factorizes `H'AH`. Fails with [`Error::NotPositiveDefiniteOnE`] when the
/// Cholesky factorization breaks down.
pub fn constrained_inverse(
    a: &dyn ReducedForm,
    basis: &SumToZeroBasis,
) -> Result<ConstrainedOperator> {
    if a.size() != basis.n() {
        return Err(Error::DimensionMismatch {
            what: "operator vs basis",
            expected: basis.n(),
            got: a.size(),
        });
    }
    ConstrainedOperator::from_reduced(a.reduce(basis), basis.clone())
}

impl ConstrainedOperator {
    pub fn from_reduced(reduced: DMatrix<f64>, basis: SumToZeroBasis) -> Result<Self> {
        if reduced.nrows() != basis.dim() || reduced.ncols() != basis.dim() {
            return Err(Error::DimensionMismatch {
                what: "reduced operator",
                expected: basis.dim(),
                got: reduced.nrows(),
            });
        }
        if reduced.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotPositiveDefiniteOnE);
        }
        let reduced = symmetrize(reduced);
        let factor = Cholesky::new(reduced.clone()).ok_or(Error::NotPositiveDefiniteOnE)?;
        Ok(Self {
            basis,
            reduced,
            factor,
            reduced_inverse: OnceLock::new(),
        })
    }

    pub fn basis(&self) -> &SumToZeroBasis {
        &self.basis
    }

    /// `A_E = H'AH`, which is also `Sigma_*^{-1}` expressed in the basis.
    pub fn reduced_operator(&self) -> &DMatrix<f64> {
        &self.reduced
    }

    /// `A_E^{-1}`, computed once on first use.
    pub fn reduced_covariance(&self) -> &DMatrix<f64> {
        self.reduced_inverse.get_or_init(|| self.factor.inverse())
    }

    pub fn solve_reduced(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    /// `Sigma b = H A_E^{-1} H' b`; the component of `b` along `1` is ignored.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.basis.n() {
            return Err(Error::DimensionMismatch {
                what: "right-hand side",
                expected: self.basis.n(),
                got: b.len(),
            });
        }
        Ok(self
            .basis
            .extend(&self.factor.solve(&self.basis.restrict(b))))
    }

    /// `log|Sigma|_+ = -log det(A_E)`.
    pub fn pseudo_log_det(&self) -> f64 {
        let l = self.factor.l_dirty();
        -2.0 * (0..l.nrows()).map(|k| l[(k, k)].ln()).sum::<f64>()
    }

    /// `tr(M Sigma)` for an operator `M` on the full space.
    pub fn trace_product(&self, m: &dyn ReducedForm) -> Result<f64> {
        if m.size() != self.basis.n() {
            return Err(Error::DimensionMismatch {
                what: "trace operand",
                expected: self.basis.n(),
                got: m.size(),
            });
        }
        Ok(self.trace_product_reduced(&m.reduce(&self.basis)))
    }

    /// `tr(M_E A_E^{-1})` for an already reduced `M_E`.
    pub fn trace_product_reduced(&self, m_reduced: &DMatrix<f64>) -> f64 {
        self.reduced_covariance().component_mul(m_reduced).sum()
    }

    /// Dense `Sigma = H A_E^{-1} H'` (n x n). For tests and small-n output.
    pub fn covariance(&self) -> DMatrix<f64> {
        let hs = self.basis.extend_columns(self.reduced_covariance());
        symmetrize(self.basis.extend_columns(&hs.transpose()))
    }
}
