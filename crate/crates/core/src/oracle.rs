//! Exact small-n references: the restricted log-likelihood, the constrained
//! Gaussian posterior of the spatial effect, and direct maximization of the
//! restricted (REML) and unrestricted (ML) marginal likelihoods.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::graph::IcarStructure;
use crate::model::ModelData;
use crate::optim::{central_gradient, nelder_mead, NelderMeadOptions};
use crate::spectral::IcarSpectrum;
use crate::subspace::SumToZeroBasis;
use crate::vreml::Problem;

/// Largest `n` accepted by the dense posterior.
pub const POSTERIOR_SIZE_LIMIT: usize = 500;
/// Largest `n` accepted by [`maximize`].
pub const MAXIMIZE_SIZE_LIMIT: usize = 2500;
/// Target for the scaled gradient norm at the reported maximizer.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;

const GRID_POINTS: usize = 21;
const GRID_HALF_WIDTH: f64 = 6.0;
const LOG_TAU_LIMIT: f64 = 60.0;
const MAX_RESTARTS: usize = 4;

/// Restricted log-likelihood at `(tau_y, tau_u)`, from the Gaussian
/// integral over the sum-to-zero subspace:
///
/// `L = c - 1/2 log|X'X| + (n-p)/2 log tau_y + (n-r)/2 log tau_u
///      - tau_y/2 Y'PY + 1/2 b'A_E^{-1}b - 1/2 log det A_E`
///
/// with `A = tau_y P + tau_u R`, `b = tau_y P Y` and `c` from
/// [`LogLikConstants::restricted`](crate::model::LogLikConstants::restricted).
pub fn restricted_loglik(
    tau_y: f64,
    tau_u: f64,
    model: &ModelData,
    icar: &IcarStructure,
) -> Result<f64> {
    restricted_loglik_with(&Problem::new(model, icar)?, tau_y, tau_u)
}

pub fn restricted_loglik_with(problem: &Problem<'_>, tau_y: f64, tau_u: f64) -> Result<f64> {
    check_taus(tau_y, tau_u)?;
    let (_, sigma) = problem.update_q(tau_y, tau_u)?;
    let b = problem.projected_response_reduced() * tau_y;
    let c = problem.constants();
    let quad = b.dot(&sigma.solve_reduced(&b));
    Ok(c.restricted() - 0.5 * problem.model().log_det_gram()
        + 0.5 * (c.n - c.p) as f64 * tau_y.ln()
        + 0.5 * (c.n - c.r) as f64 * tau_u.ln()
        - 0.5 * tau_y * problem.projected_response_norm_sq()
        + 0.5 * quad
        + 0.5 * sigma.pseudo_log_det())
}

fn check_taus(tau_y: f64, tau_u: f64) -> Result<()> {
    if !(tau_y > 0.0 && tau_u > 0.0 && tau_y.is_finite() && tau_u.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "precisions must be positive and finite, got ({tau_y}, {tau_u})"
        )));
    }
    Ok(())
}

/// Posterior moments of `u | Y` on the sum-to-zero subspace.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Dense computation of `mu* = A_E^{-1} b` and `Sigma* = A_E^{-1}` lifted to
/// the full space. Forms `P` and `R` as dense `n x n` matrices and inverts
/// through an eigendecomposition, independently of the fitting path.
pub fn exact_posterior(
    tau_y: f64,
    tau_u: f64,
    model: &ModelData,
    icar: &IcarStructure,
) -> Result<ExactPosterior> {
    let n = model.n();
    if n > POSTERIOR_SIZE_LIMIT {
        return Err(Error::SizeGuard {
            n,
            limit: POSTERIOR_SIZE_LIMIT,
        });
    }
    if icar.n() != n {
        return Err(Error::DimensionMismatch {
            what: "graph nodes vs observations",
            expected: n,
            got: icar.n(),
        });
    }
    check_taus(tau_y, tau_u)?;
    let x = model.x();
    let p_dense = DMatrix::identity(n, n) - x * model.gram_inverse() * x.transpose();
    let a = &p_dense * tau_y + icar.laplacian().to_dense() * tau_u;
    let b = &p_dense * model.y() * tau_y;

    let h = SumToZeroBasis::helmert(n)?.to_dense();
    let a_e = h.transpose() * &a * &h;
    let eig = SymmetricEigen::new((&a_e + a_e.transpose()) * 0.5);
    let floor = 1e-12 * eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| !(l > floor)) {
        return Err(Error::NotPositiveDefiniteOnE);
    }
    let inv = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
        * eig.eigenvectors.transpose();
    let sigma = &h * &inv * h.transpose();
    let mu = &h * (&inv * (h.transpose() * b));
    Ok(ExactPosterior {
        sigma: (&sigma + sigma.transpose()) * 0.5,
        mu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OracleMethod {
    ExactReml,
    ExactMle,
}

impl OracleMethod {
    pub fn name(self) -> &'static str {
        match self {
            OracleMethod::ExactReml => "exact_reml",
            OracleMethod::ExactMle => "exact_mle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerDiagnostics {
    pub evaluations: usize,
    /// `|grad L| / (1 + |L|)` in `(log tau_y, log tau_u)`, by central differences.
    pub gradient_norm: f64,
    pub restarts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEstimates {
    pub tau_y_hat: f64,
    pub tau_u_hat: f64,
    pub objective_value: f64,
    pub method: OracleMethod,
    pub diagnostics: OptimizerDiagnostics,
}

impl IcarSpectrum {
    /// Marginal likelihoods of `model` with `beta` profiled by generalized
    /// least squares.
    pub fn marginal<'a>(&'a self, model: &ModelData) -> Result<MarginalLikelihood<'a>> {
        if model.n() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "graph nodes vs observations",
                expected: self.n(),
                got: model.n(),
            });
        }
        let x = model.x();
        let cols: Vec<DVector<f64>> = x
            .column_iter()
            .map(|c| self.rotate(&c.into_owned()))
            .collect();
        Ok(MarginalLikelihood {
            spectrum: self,
            x: DMatrix::from_columns(&cols),
            y: self.rotate(model.y()),
        })
    }
}

/// `log N(Y; X beta, V)` style objectives evaluated in `O(n p^2)` per point.
#[derive(Debug, Clone)]
pub struct MarginalLikelihood<'a> {
    spectrum: &'a IcarSpectrum,
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl MarginalLikelihood<'_> {
    const LN_2PI: f64 = 1.837_877_066_409_345_5;

    /// Returns `(sum log w, log det X'WX, generalized residual quadratic)` with
    /// `W = V^{-1}` diagonal in the rotated basis.
    fn pieces(&self, tau_y: f64, tau_u: f64) -> Option<(f64, f64, f64)> {
        let n = self.y.len();
        let p = self.x.ncols();
        let lambda = &self.spectrum.eigenvalues();
        let weight = |i: usize| {
            if i == 0 {
                tau_y
            } else {
                1.0 / (1.0 / tau_y + 1.0 / (tau_u * lambda[i - 1]))
            }
        };
        let mut xwx = DMatrix::zeros(p, p);
        let mut xwy = DVector::zeros(p);
        let mut ywy = 0.0;
        let mut sum_log_w = 0.0;
        for i in 0..n {
            let w = weight(i);
            sum_log_w += w.ln();
            let xi = self.x.row(i);
            for a in 0..p {
                xwy[a] += w * xi[a] * self.y[i];
                for b in 0..=a {
                    xwx[(a, b)] += w * xi[a] * xi[b];
                }
            }
            ywy += w * self.y[i] * self.y[i];
        }
        for a in 0..p {
            for b in 0..a {
                xwx[(b, a)] = xwx[(a, b)];
            }
        }
        let chol = Cholesky::<f64, nalgebra::Dyn>::new(xwx)?;
        let beta = chol.solve(&xwy);
        let quad = ywy - xwy.dot(&beta);
        let l = chol.l_dirty();
        let log_det_xwx = 2.0 * (0..p).map(|k| l[(k, k)].ln()).sum::<f64>();
        Some((sum_log_w, log_det_xwx, quad))
    }

    /// Restricted log-likelihood under the flat-prior convention shared with
    /// [`restricted_loglik`].
    pub fn reml(&self, tau_y: f64, tau_u: f64) -> f64 {
        let n = self.y.len() as f64;
        let p = self.x.ncols() as f64;
        match self.pieces(tau_y, tau_u) {
            Some((slw, ldx, q)) => -0.5 * (n - p) * Self::LN_2PI + 0.5 * slw - 0.5 * ldx - 0.5 * q,
            None => f64::NAN,
        }
    }

    /// Profile log-likelihood with `beta` at its GLS estimate.
    pub fn ml(&self, tau_y: f64, tau_u: f64) -> f64 {
        let n = self.y.len() as f64;
        match self.pieces(tau_y, tau_u) {
            Some((slw, _, q)) => -0.5 * n * Self::LN_2PI + 0.5 * slw - 0.5 * q,
            None => f64::NAN,
        }
    }

    pub fn objective(&self, method: OracleMethod, tau_y: f64, tau_u: f64) -> f64 {
        match method {
            OracleMethod::ExactReml => self.reml(tau_y, tau_u),
            OracleMethod::ExactMle => self.ml(tau_y, tau_u),
        }
    }

    /// Grid search over `(log tau_y, log tau_u)` followed by Nelder–Mead.
    pub fn maximize(&self, method: OracleMethod, start: (f64, f64)) -> Result<OracleEstimates> {
        let f = |z: &[f64]| {
            if z.iter().any(|v| v.abs() > LOG_TAU_LIMIT) {
                return f64::NAN;
            }
            self.objective(method, z[0].exp(), z[1].exp())
        };
        let center = [start.0.ln(), start.1.ln()];
        let step = 2.0 * GRID_HALF_WIDTH / (GRID_POINTS - 1) as f64;
        let mut evaluations = 0;
        let mut best: Option<([f64; 2], f64)> = None;
        for i in 0..GRID_POINTS {
            for j in 0..GRID_POINTS {
                let z = [
                    center[0] - GRID_HALF_WIDTH + i as f64 * step,
                    center[1] - GRID_HALF_WIDTH + j as f64 * step,
                ];
                let v = f(&z);
                evaluations += 1;
                if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
                    best = Some((z, v));
                }
            }
        }
        let (mut z, _) = best.ok_or(Error::NonFiniteObjective)?;

        let mut opts = NelderMeadOptions {
            initial_step: step,
            ..NelderMeadOptions::default()
        };
        let mut restarts = 0;
        let (value, gradient_norm) = loop {
            let m = nelder_mead(|x| -f(x), &z, &opts);
            evaluations += m.evaluations;
            z = [m.x[0], m.x[1]];
            let value = -m.value;
            let g = central_gradient(f, &z, 1e-5);
            evaluations += 4;
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + value.abs());
            if gnorm <= GRADIENT_TOLERANCE || restarts == MAX_RESTARTS || !gnorm.is_finite() {
                break (value, gnorm);
            }
            restarts += 1;
            opts.initial_step = (opts.initial_step * 0.1).max(1e-4);
        };
        if !value.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        Ok(OracleEstimates {
            tau_y_hat: z[0].exp(),
            tau_u_hat: z[1].exp(),
            objective_value: value,
            method,
            diagnostics: OptimizerDiagnostics {
                evaluations,
                gradient_norm,
                restarts,
            },
        })
    }
}

/// Method-of-moments start `tau_y = tau_u = (n-p) / Y'PY`.
pub fn moment_start(model: &ModelData) -> Result<(f64, f64)> {
    let ypy = model.projected_quadratic(model.y())?;
    if !(ypy > 0.0) {
        return Err(Error::NonFiniteObjective);
    }
    let t = (model.n() - model.p()) as f64 / ypy;
    Ok((t, t))
}

/// Maximizes the exact REML or ML objective over `(tau_y, tau_u)`.
pub fn maximize(
    method: OracleMethod,
    model: &ModelData,
    icar: &IcarStructure,
) -> Result<OracleEstimates> {
    let spectrum = IcarSpectrum::new(icar)?;
    maximize_with(&spectrum, method, model)
}

pub fn maximize_with(
    spectrum: &IcarSpectrum,
    method: OracleMethod,
    model: &ModelData,
) -> Result<OracleEstimates> {
    if 2 * model.p() >= model.n() {
        return Err(Error::DesignTooWide {
            n: model.n(),
            p: model.p(),
        });
    }
    spectrum
        .marginal(model)?
        .maximize(method, moment_start(model)?)
}
