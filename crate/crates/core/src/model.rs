//! Observed response, fixed-effects design, and the projection onto the
//! orthogonal complement of the design's column space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::subspace::{symmetrize, ReducedForm, SumToZeroBasis};

/// Relative singular-value threshold for declaring the design rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Validated response and design.
#[derive(Debug, Clone)]
pub struct ModelData {
    y: DVector<f64>,
    x: DMatrix<f64>,
    gram_inverse: DMatrix<f64>,
    log_det_gram: f64,
}

/// Validates `(y, X)` and caches `(X'X)^{-1}`.
///
/// Column rank is checked with a singular value decomposition; singular
/// values below `RANK_TOLERANCE * s_max` count as zero.
pub fn load_model(y: DVector<f64>, x: DMatrix<f64>) -> Result<ModelData> {
    let n = y.len();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "design rows vs response length",
            expected: n,
            got: x.nrows(),
        });
    }
    let p = x.ncols();
    if p == 0 {
        return Err(Error::DimensionMismatch {
            what: "design columns",
            expected: 1,
            got: 0,
        });
    }
    if p >= n {
        return Err(Error::DesignTooWide { n, p });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("response"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("design"));
    }

    let svd = x.clone().svd(false, true);
    let sv = &svd.singular_values;
    let largest = sv.max();
    let smallest = sv.min();
    if !(smallest > RANK_TOLERANCE * largest) {
        return Err(Error::RankDeficientDesign { smallest, largest });
    }
    let v_t = svd.v_t.expect("requested V^T");
    let inv_sq = DMatrix::from_diagonal(&sv.map(|s| 1.0 / (s * s)));
    let gram_inverse = symmetrize(v_t.transpose() * inv_sq * &v_t);
    let log_det_gram = 2.0 * sv.iter().map(|s| s.ln()).sum::<f64>();

    Ok(ModelData {
        y,
        x,
        gram_inverse,
        log_det_gram,
    })
}

impl ModelData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inverse
    }

    /// `log |X'X|`.
    pub fn log_det_gram(&self) -> f64 {
        self.log_det_gram
    }

    /// True when the constant vector lies in the column space of `X`.
    pub fn has_intercept(&self) -> bool {
        let ones = DVector::from_element(self.n(), 1.0);
        self.projection().apply(&ones).norm() < 1e-8 * (self.n() as f64).sqrt()
    }

    pub fn projection(&self) -> Projection<'_> {
        Projection { model: self }
    }

    /// `v' P v = |P v|^2`.
    pub fn projected_quadratic(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_len(v, "projected_quadratic vector")?;
        Ok(self.projection().apply(v).norm_squared())
    }

    /// `(X'X)^{-1} X'(Y - mu)`: least squares for the fixed effects given the
    /// spatial effect `mu`.
    pub fn recover_beta(&self, mu: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(mu, "recover_beta mean")?;
        Ok(&self.gram_inverse * self.x.tr_mul(&(&self.y - mu)))
    }

    /// `X beta + mu`.
    pub fn fitted(&self, beta: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        &self.x * beta + mu
    }

    fn check_len(&self, v: &DVector<f64>, what: &'static str) -> Result<()> {
        if v.len() != self.n() {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.n(),
                got: v.len(),
            });
        }
        Ok(())
    }
}

/// `P = I - X (X'X)^{-1} X'`, applied as a rank-`p` correction.
#[derive(Debug, Clone, Copy)]
pub struct Projection<'a> {
    model: &'a ModelData,
}

impl Projection<'_> {
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let x = &self.model.x;
        v - x * (&self.model.gram_inverse * x.tr_mul(v))
    }
}

impl ReducedForm for Projection<'_> {
    fn size(&self) -> usize {
        self.model.n()
    }

    /// `H'PH = I - W G W'` with `W = H'X`.
    fn reduce(&self, basis: &SumToZeroBasis) -> DMatrix<f64> {
        let w = basis.restrict_columns(&self.model.x);
        let d = basis.dim();
        symmetrize(DMatrix::identity(d, d) - &w * &self.model.gram_inverse * w.transpose())
    }
}

/// Additive constants shared by the restricted log-likelihood and the ELBO.
///
/// Convention: the restricted log-likelihood is the logarithm of
/// `integral N(Y; X beta, V) d beta` under a flat prior on `beta`, where
/// `V = tau_y^{-1} I + tau_u^{-1} R^+` is the marginal covariance induced by
/// the ICAR effect taken as a proper Gaussian on the sum-to-zero subspace.
/// Both the Gaussian normalizer of `Y | u` after integrating `beta`
/// (`(2 pi)^{-(n-p)/2}`) and the ICAR normalizer on the subspace
/// (`(2 pi)^{-(n-r)/2} |R|_+^{1/2}`) are kept. The `-(1/2) log|X'X|` term
/// and the `tau` dependent terms are written out explicitly by callers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikConstants {
    pub n: usize,
    pub p: usize,
    pub r: usize,
    pub log_pdet_laplacian: f64,
}

impl LogLikConstants {
    const LN_2PI: f64 = 1.837_877_066_409_345_5;

    /// Offset of the joint log-density `log g(Y, u | tau_y, tau_u)`.
    pub fn joint(&self) -> f64 {
        -0.5 * (self.n - self.p) as f64 * Self::LN_2PI
            - 0.5 * (self.n - self.r) as f64 * Self::LN_2PI
            + 0.5 * self.log_pdet_laplacian
    }

    /// Offset of the restricted log-likelihood: the joint offset plus the
    /// `(2 pi)^{(n-r)/2}` produced by integrating `u` over the subspace.
    pub fn restricted(&self) -> f64 {
        self.joint() + 0.5 * (self.n - self.r) as f64 * Self::LN_2PI
    }

    /// Offset of the ELBO: the joint offset plus the entropy constant
    /// `(n-r)/2 (1 + log 2 pi)` of a Gaussian on the subspace.
    pub fn elbo(&self) -> f64 {
        self.joint() + 0.5 * (self.n - self.r) as f64 * (1.0 + Self::LN_2PI)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn intercept_projection_centers() {
        let m = load_model(DVector::from_vec(vec![1.0, 2.0, 3.0]), intercept(3)).unwrap();
        let v = DVector::from_vec(vec![4.0, -1.0, 3.0]);
        let pv = m.projection().apply(&v);
        let mean = 2.0;
        for i in 0..3 {
            assert!((pv[i] - (v[i] - mean)).abs() < 1e-14);
        }
        assert!((m.projected_quadratic(m.y()).unwrap() - 2.0).abs() < 1e-13);
        assert!(m.has_intercept());
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        let y = DVector::from_element(6, 1.0);
        assert!(matches!(
            load_model(y, x),
            Err(Error::RankDeficientDesign { .. })
        ));
    }

    #[test]
    fn input_validation() {
        let y = DVector::from_vec(vec![1.0, f64::NAN, 2.0]);
        assert!(matches!(
            load_model(y, intercept(3)),
            Err(Error::NonFiniteInput("response"))
        ));
        let y = DVector::from_element(3, 1.0);
        assert!(matches!(
            load_model(y.clone(), intercept(4)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            load_model(y, DMatrix::identity(3, 3)),
            Err(Error::DesignTooWide { .. })
        ));
    }

    #[test]
    fn beta_recovery_edge_cases() {
        let y = DVector::from_vec(vec![1.0, 5.0, 3.0, 7.0]);
        let m = load_model(y.clone(), intercept(4)).unwrap();
        let b0 = m.recover_beta(&DVector::zeros(4)).unwrap();
        assert!((b0[0] - 4.0).abs() < 1e-14);
        let b1 = m.recover_beta(&y).unwrap();
        assert!(b1[0].abs() < 1e-14);
    }

    #[test]
    fn log_det_gram_matches_direct() {
        let x = DMatrix::from_fn(10, 3, |i, j| {
            ((i * 3 + j) as f64).sin() + (j == 0) as u8 as f64
        });
        let m = load_model(DVector::zeros(10), x.clone()).unwrap();
        let direct = (x.transpose() * &x).determinant().ln();
        assert!((m.log_det_gram() - direct).abs() < 1e-10);
        let g = x.transpose() * &x * m.gram_inverse();
        assert!((g - DMatrix::identity(3, 3)).norm() < 1e-10);
    }

    #[test]
    fn constants_relations() {
        let c = LogLikConstants {
            n: 25,
            p: 3,
            r: 1,
            log_pdet_laplacian: 7.5,
        };
        assert!((c.elbo() - c.restricted() - 12.0).abs() < 1e-12);
    }
}
