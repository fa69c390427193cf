//! Eigenbasis backend for the coordinate-ascent sweeps.
//!
//! With `H'RH = U diag(lambda) U'` computed once per graph, the reduced
//! precision in the coordinates `theta = U'H'u` is
//!
//! ```text
//! A = D - tau_y W G W',   D = diag(tau_y + tau_u lambda),   W = U'H'X,
//! ```
//!
//! a diagonal matrix minus a rank-`p` term. Solves, the diagonal of `A^{-1}`
//! and `log det A` then follow from Woodbury and the matrix determinant lemma
//! with one `p x p` factorization, so a sweep costs `O(n p^2)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::graph::IcarStructure;
use crate::model::ModelData;
use crate::subspace::{ReducedForm, SumToZeroBasis};

/// Largest graph accepted for an eigendecomposition.
pub const SPECTRUM_SIZE_LIMIT: usize = 2500;

/// Eigendecomposition of the reduced Laplacian `H'RH = U diag(lambda) U'`.
///
/// Together with `1/sqrt(n)`, the columns of `HU` form an orthonormal basis
/// of `R^n`. Depends only on the graph, so one spectrum serves every dataset
/// on the same lattice.
#[derive(Debug, Clone)]
pub struct IcarSpectrum {
    basis: SumToZeroBasis,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl IcarSpectrum {
    pub fn new(icar: &IcarStructure) -> Result<Self> {
        icar.ensure_connected()?;
        let n = icar.n();
        if n > SPECTRUM_SIZE_LIMIT {
            return Err(Error::SizeGuard {
                n,
                limit: SPECTRUM_SIZE_LIMIT,
            });
        }
        let basis = SumToZeroBasis::helmert(n)?;
        let eig = SymmetricEigen::new(icar.reduce(&basis));
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::NotPositiveDefiniteOnE);
        }
        Ok(Self {
            basis,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn n(&self) -> usize {
        self.basis.n()
    }

    /// Nonzero eigenvalues of `R`.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Coordinates of `v` in the basis `[1/sqrt(n), HU]`.
    pub fn rotate(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let mut out = DVector::zeros(n);
        out[0] = v.sum() / (n as f64).sqrt();
        let inner = self.eigenvectors.tr_mul(&self.basis.restrict(v));
        out.rows_mut(1, n - 1).copy_from(&inner);
        out
    }

    /// `H U theta`: maps eigen-coordinates back to a sum-to-zero vector.
    pub fn extend(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.basis.extend(&(&self.eigenvectors * theta))
    }

    pub(crate) fn check_model(&self, model: &ModelData) -> Result<()> {
        if model.n() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "graph nodes vs observations",
                expected: self.n(),
                got: model.n(),
            });
        }
        Ok(())
    }
}

/// Data rotated into the eigenbasis, fixed across sweeps.
#[derive(Debug, Clone)]
pub struct SpectralProblem<'a> {
    spectrum: &'a IcarSpectrum,
    /// `[1/sqrt(n), HU]' X`; row 0 is `1'X / sqrt(n)`, the rest is `W`.
    x: DMatrix<f64>,
    /// `[1/sqrt(n), HU]' Y`.
    y: DVector<f64>,
    gram_inverse: DMatrix<f64>,
    log_det_gram: f64,
    /// `U'H'PY`.
    b: DVector<f64>,
}

/// The variational factor `q` at one pair of precisions, in eigen-coordinates.
#[derive(Debug, Clone)]
pub struct SpectralQ {
    /// `U'H' mu`.
    pub theta: DVector<f64>,
    /// `tr(P Sigma)`.
    pub trace_p: f64,
    /// `tr(R Sigma)`.
    pub trace_r: f64,
    /// `log |Sigma|_+`.
    pub log_pdet: f64,
}

impl<'a> SpectralProblem<'a> {
    pub fn new(spectrum: &'a IcarSpectrum, model: &ModelData) -> Result<Self> {
        spectrum.check_model(model)?;
        let cols: Vec<DVector<f64>> = model
            .x()
            .column_iter()
            .map(|c| spectrum.rotate(&c.into_owned()))
            .collect();
        let py = model.projection().apply(model.y());
        let b = spectrum.rotate(&py).rows(1, model.n() - 1).into_owned();
        Ok(Self {
            spectrum,
            x: DMatrix::from_columns(&cols),
            y: spectrum.rotate(model.y()),
            gram_inverse: model.gram_inverse().clone(),
            log_det_gram: model.log_det_gram(),
            b,
        })
    }

    pub fn spectrum(&self) -> &IcarSpectrum {
        self.spectrum
    }

    /// Factor `S = (X'X)/tau_y - W'D^{-1}W` of the Woodbury capacitance,
    /// assembled without cancellation as
    /// `c c' / (n tau_y) + sum_i w_i w_i' tau_u lambda_i / (tau_y d_i)`.
    fn capacitance(&self, tau_y: f64, tau_u: f64) -> Result<(DVector<f64>, Cholesky<f64, Dyn>)> {
        let p = self.x.ncols();
        let lambda = self.spectrum.eigenvalues();
        let d = lambda.map(|l| tau_y + tau_u * l);
        let x0 = self.x.row(0).transpose();
        let mut s = &x0 * x0.transpose() / tau_y;
        for i in 0..lambda.len() {
            let w = self.x.row(i + 1);
            let c = tau_u * lambda[i] / (tau_y * d[i]);
            for a in 0..p {
                for bb in 0..=a {
                    s[(a, bb)] += c * w[a] * w[bb];
                }
            }
        }
        for a in 0..p {
            for bb in 0..a {
                s[(bb, a)] = s[(a, bb)];
            }
        }
        let chol = Cholesky::new(s).ok_or(Error::NotPositiveDefiniteOnE)?;
        Ok((d, chol))
    }

    /// `Sigma = A^{-1}` and `mu = Sigma tau_y b` at `(tau_y, tau_u)`.
    pub fn update_q(&self, tau_y: f64, tau_u: f64) -> Result<SpectralQ> {
        let (d, s) = self.capacitance(tau_y, tau_u)?;
        let m = d.len();
        let p = self.x.ncols();
        let lambda = self.spectrum.eigenvalues();
        let w = self.x.rows(1, m);

        // A^{-1} v = D^{-1} v + D^{-1} W S^{-1} W' D^{-1} v
        let rhs = self.b.component_div(&d) * tau_y;
        let correction = &w * s.solve(&w.tr_mul(&rhs));
        let theta = &rhs + correction.component_div(&d);

        // diag(A^{-1})_i = 1/d_i + |L^{-1} w_i|^2 / d_i^2
        let l = s.l();
        let mut trace_total = 0.0;
        let mut trace_r = 0.0;
        let mut wdw = DMatrix::zeros(p, p);
        for i in 0..m {
            let wi = self.x.row(i + 1).transpose();
            let mut z = wi.clone();
            l.solve_lower_triangular_mut(&mut z);
            let diag = 1.0 / d[i] + z.norm_squared() / (d[i] * d[i]);
            trace_total += diag;
            trace_r += lambda[i] * diag;
            wdw += &wi * wi.transpose() / d[i];
        }
        // tr(P Sigma) = tr(A^{-1}) - tr(G W'A^{-1}W), W'A^{-1}W = M + M S^{-1} M
        let wsw = &wdw + &wdw * s.solve(&wdw);
        let trace_p = trace_total - (&self.gram_inverse * wsw).trace();

        let log_det_s = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_det_a = d.iter().map(|v| v.ln()).sum::<f64>() - self.log_det_gram
            + p as f64 * tau_y.ln()
            + log_det_s;
        Ok(SpectralQ {
            theta,
            trace_p,
            trace_r,
            log_pdet: -log_det_a,
        })
    }

    /// `(Y-mu)'P(Y-mu)`, as the squared norm of the projected residual.
    pub fn response_quadratic(&self, q: &SpectralQ) -> f64 {
        let mut e = self.y.clone();
        for (i, t) in q.theta.iter().enumerate() {
            e[i + 1] -= t;
        }
        let pe = &e - &self.x * (&self.gram_inverse * self.x.tr_mul(&e));
        pe.norm_squared()
    }

    /// `mu'R mu = sum_i lambda_i theta_i^2`.
    pub fn spatial_quadratic(&self, q: &SpectralQ) -> f64 {
        self.spectrum
            .eigenvalues()
            .iter()
            .zip(q.theta.iter())
            .map(|(l, t)| l * t * t)
            .sum()
    }

    /// Full-space mean `H U theta`.
    pub fn mean(&self, q: &SpectralQ) -> DVector<f64> {
        self.spectrum.extend(&q.theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_icar, lattice_graph, Contiguity};
    use crate::model::load_model;
    use crate::vreml::Problem;

    fn instance() -> (ModelData, IcarStructure) {
        let n0 = 5;
        let n = n0 * n0;
        let icar = build_icar(&lattice_graph(n0, Contiguity::Rook).unwrap()).unwrap();
        let x = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => (i / n0) as f64,
            _ => ((i * 7) % 11) as f64 / 3.0,
        });
        let y = DVector::from_fn(n, |i, _| {
            (i as f64 * 0.37).sin() * 2.0 + (i % n0) as f64 * 0.1
        });
        (load_model(y, x).unwrap(), icar)
    }

    #[test]
    fn rotation_is_orthogonal() {
        let (_, icar) = instance();
        let s = IcarSpectrum::new(&icar).unwrap();
        let v = DVector::from_fn(25, |i, _| (i as f64).cos());
        assert!((s.rotate(&v).norm() - v.norm()).abs() < 1e-12);
        let theta = s.rotate(&v).rows(1, 24).into_owned();
        let back = s.extend(&theta) + DVector::from_element(25, v.mean());
        assert!((back - v).norm() < 1e-12);
    }

    #[test]
    fn matches_dense_blocks() {
        let (model, icar) = instance();
        let spectrum = IcarSpectrum::new(&icar).unwrap();
        let fast = SpectralProblem::new(&spectrum, &model).unwrap();
        let dense = Problem::new(&model, &icar).unwrap();
        for &(ty, tu) in &[(1.0, 1.0), (0.3, 7.0), (25.0, 0.02)] {
            let q = fast.update_q(ty, tu).unwrap();
            let (mu, sigma) = dense.update_q(ty, tu).unwrap();
            assert!((fast.mean(&q) - &mu).norm() < 1e-10 * (1.0 + mu.norm()));
            let tp = sigma.trace_product_reduced(dense.projection_reduced());
            let tr = sigma.trace_product_reduced(dense.laplacian_reduced());
            assert!((q.trace_p - tp).abs() < 1e-10 * (1.0 + tp));
            assert!((q.trace_r - tr).abs() < 1e-10 * (1.0 + tr));
            assert!((q.log_pdet - sigma.pseudo_log_det()).abs() < 1e-9);
            let rq = model.projected_quadratic(&(model.y() - &mu)).unwrap();
            assert!((fast.response_quadratic(&q) - rq).abs() < 1e-10 * (1.0 + rq));
            let sq = icar.quadratic_form(&mu).unwrap();
            assert!((fast.spatial_quadratic(&q) - sq).abs() < 1e-10 * (1.0 + sq));
            // tau_y tr(P Sigma) + tau_u tr(R Sigma) = n - 1
            assert!((ty * q.trace_p + tu * q.trace_r - 24.0).abs() < 1e-9);
        }
    }
}
