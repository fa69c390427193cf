//! Variational REML: the evidence lower bound on the restricted likelihood
//! and its coordinate-ascent maximization.
//!
//! The variational family is `q(u) = N(mu, Sigma)` supported on the
//! sum-to-zero subspace. With `P` the residual projection of the design and
//! `R` the ICAR Laplacian, the bound is
//!
//! ```text
//! L_V = (n-p)/2 log tau_y - 1/2 log|X'X| - tau_y/2 [(Y-mu)'P(Y-mu) + tr(P Sigma)]
//!     + (n-r)/2 log tau_u - tau_u/2 [mu'R mu + tr(R Sigma)]
//!     + 1/2 log|Sigma|_+ + const
//! ```
//!
//! with `const` fixed by [`LogLikConstants::elbo`]. Each sweep updates, in
//! order, `Sigma = (tau_y P + tau_u R)_*^{-1}`, `mu = Sigma tau_y P Y`,
//! `tau_y = (n-p) / [(Y-mu)'P(Y-mu) + tr(P Sigma)]` and
//! `tau_u = (n-r) / [mu'R mu + tr(R Sigma)]`. The first two share one
//! Cholesky factorization of the reduced precision.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Precision, Result};
use crate::graph::IcarStructure;
use crate::model::{LogLikConstants, ModelData};
use crate::spectral::{IcarSpectrum, SpectralProblem, SpectralQ};
use crate::subspace::{ConstrainedOperator, ReducedForm, SumToZeroBasis};

/// Denominators of the precision updates are clamped here.
pub const DENOMINATOR_FLOOR: f64 = 1e-300;
/// Precisions above this are treated as divergence.
pub const TAU_CEILING: f64 = 1e12;

/// How the ELBO change is compared against `tol`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvergenceRule {
    /// `|L_t - L_{t-1}| < tol`.
    #[default]
    Absolute,
    /// `|L_t - L_{t-1}| < tol * (1 + |L_t|)`.
    Relative,
    /// Largest relative change of `tau_y`, `tau_u` over the sweep below `tol`.
    Parameters,
}

/// Linear algebra used inside the sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Reduced-basis Cholesky of `H'(tau_y P + tau_u R)H` each sweep.
    #[default]
    Dense,
    /// Eigendecomposition of `H'RH` once, then Woodbury updates per sweep.
    Spectral,
}

/// Deliberately mis-specified variants, used to check that the invariant
/// suite can detect broken implementations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Update the precisions before `(Sigma, mu)` within each sweep.
    TauOrder,
    /// Omit `tr(P Sigma)` from the `tau_y` denominator.
    DropTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub tol: f64,
    pub max_sweeps: usize,
    pub init_tau_y: Option<f64>,
    pub init_tau_u: Option<f64>,
    pub rule: ConvergenceRule,
    pub backend: Backend,
    pub fault: Option<Fault>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 500,
            init_tau_y: None,
            init_tau_u: None,
            rule: ConvergenceRule::Absolute,
            backend: Backend::Dense,
            fault: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidConfig("max_sweeps must be at least 1".into()));
        }
        for (name, v) in [
            ("init_tau_y", self.init_tau_y),
            ("init_tau_u", self.init_tau_u),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "{name} must be positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Variational parameters `(mu, Sigma)` plus the precisions.
#[derive(Debug, Clone)]
pub struct VariationalState {
    mu: DVector<f64>,
    sigma: ConstrainedOperator,
    tau_y: f64,
    tau_u: f64,
    elbo_trace: Vec<f64>,
}

impl VariationalState {
    pub fn new(
        mu: DVector<f64>,
        sigma: ConstrainedOperator,
        tau_y: f64,
        tau_u: f64,
    ) -> Result<Self> {
        if mu.len() != sigma.basis().n() {
            return Err(Error::DimensionMismatch {
                what: "variational mean",
                expected: sigma.basis().n(),
                got: mu.len(),
            });
        }
        let scale = mu.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        if mu.sum().abs() > 1e-10 * scale {
            return Err(Error::InvalidConfig(
                "variational mean must sum to zero".into(),
            ));
        }
        check_tau(tau_y, Precision::Response)?;
        check_tau(tau_u, Precision::Spatial)?;
        Ok(Self {
            mu,
            sigma,
            tau_y,
            tau_u,
            elbo_trace: Vec::new(),
        })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &ConstrainedOperator {
        &self.sigma
    }

    pub fn tau_y(&self) -> f64 {
        self.tau_y
    }

    pub fn tau_u(&self) -> f64 {
        self.tau_u
    }

    /// ELBO after each completed sweep.
    pub fn elbo_trace(&self) -> &[f64] {
        &self.elbo_trace
    }

    pub fn with_mu(&self, mu: DVector<f64>) -> Result<Self> {
        let mut s = Self::new(mu, self.sigma.clone(), self.tau_y, self.tau_u)?;
        s.elbo_trace = self.elbo_trace.clone();
        Ok(s)
    }

    pub fn with_taus(&self, tau_y: f64, tau_u: f64) -> Result<Self> {
        let mut s = Self::new(self.mu.clone(), self.sigma.clone(), tau_y, tau_u)?;
        s.elbo_trace = self.elbo_trace.clone();
        Ok(s)
    }
}

fn check_tau(tau: f64, which: Precision) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::DegenerateDenominator {
            component: which,
            detail: format!("precision must be positive and finite, got {tau}"),
        });
    }
    if tau > TAU_CEILING {
        return Err(Error::DegenerateDenominator {
            component: which,
            detail: format!("precision {tau:.3e} exceeds {TAU_CEILING:.0e}"),
        });
    }
    Ok(())
}

/// Scaled stationarity residuals at the reported state.
///
/// * `mu`: `|tau_y P(Y-mu) - tau_u R mu| / |tau_y P Y|`
/// * `sigma`: `|Sigma_*^{-1} - (tau_y P + tau_u R)|_F / |tau_y P + tau_u R|_F`, on `E`
/// * `tau_y`: `|dL/dtau_y| * 2 tau_y / (n-p)`, i.e. `|1 - tau_y T_y / (n-p)|`
/// * `tau_u`: `|dL/dtau_u| * 2 tau_u / (n-r)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointResiduals {
    pub mu: f64,
    pub sigma: f64,
    pub tau_y: f64,
    pub tau_u: f64,
}

impl FixedPointResiduals {
    pub fn max(&self) -> f64 {
        self.mu.max(self.sigma).max(self.tau_y).max(self.tau_u)
    }
}

/// Partial derivatives of the ELBO. The `Sigma` component is reported in the
/// reduced basis: `-(tau_y/2) H'PH - (tau_u/2) H'RH + (1/2) A_E(Sigma)`.
#[derive(Debug, Clone)]
pub struct ElboGradients {
    pub mu: DVector<f64>,
    pub sigma_reduced: DMatrix<f64>,
    pub tau_y: f64,
    pub tau_u: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub state: VariationalState,
    pub beta_hat: DVector<f64>,
    pub fitted: DVector<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub residuals: FixedPointResiduals,
    pub initial_tau_y: f64,
    pub initial_tau_u: f64,
}

impl FitReport {
    pub fn tau_y(&self) -> f64 {
        self.state.tau_y
    }

    pub fn tau_u(&self) -> f64 {
        self.state.tau_u
    }

    /// `1 / tau_y`.
    pub fn sigma_eps_sq(&self) -> f64 {
        1.0 / self.state.tau_y
    }

    /// `1 / tau_u`.
    pub fn sigma_u_sq(&self) -> f64 {
        1.0 / self.state.tau_u
    }

    pub fn elbo(&self) -> f64 {
        *self.state.elbo_trace.last().expect("at least one sweep")
    }
}

/// Reduced-basis quantities that stay fixed across sweeps.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    model: &'a ModelData,
    icar: &'a IcarStructure,
    basis: SumToZeroBasis,
    p_reduced: DMatrix<f64>,
    r_reduced: DMatrix<f64>,
    py_reduced: DVector<f64>,
    ypy: f64,
    constants: LogLikConstants,
}

impl<'a> Problem<'a> {
    /// Checks the A-1 and A-2 preconditions and precomputes `H'PH`, `H'RH`
    /// and `H'PY` in the Helmert basis.
    pub fn new(model: &'a ModelData, icar: &'a IcarStructure) -> Result<Self> {
        Self::with_basis(model, icar, SumToZeroBasis::helmert(model.n())?)
    }

    pub fn with_basis(
        model: &'a ModelData,
        icar: &'a IcarStructure,
        basis: SumToZeroBasis,
    ) -> Result<Self> {
        let n = model.n();
        if icar.n() != n {
            return Err(Error::DimensionMismatch {
                what: "graph nodes vs observations",
                expected: n,
                got: icar.n(),
            });
        }
        if basis.n() != n {
            return Err(Error::DimensionMismatch {
                what: "basis dimension",
                expected: n,
                got: basis.n(),
            });
        }
        icar.ensure_connected()?;
        if 2 * model.p() >= n {
            return Err(Error::DesignTooWide { n, p: model.p() });
        }
        let proj = model.projection();
        let py = proj.apply(model.y());
        let constants = LogLikConstants {
            n,
            p: model.p(),
            r: icar.rank_deficiency(),
            log_pdet_laplacian: icar.log_pseudo_det()?,
        };
        Ok(Self {
            model,
            icar,
            p_reduced: proj.reduce(&basis),
            r_reduced: icar.reduce(&basis),
            py_reduced: basis.restrict(&py),
            ypy: py.norm_squared(),
            basis,
            constants,
        })
    }

    pub fn model(&self) -> &ModelData {
        self.model
    }

    pub fn icar(&self) -> &IcarStructure {
        self.icar
    }

    pub fn basis(&self) -> &SumToZeroBasis {
        &self.basis
    }

    pub fn constants(&self) -> LogLikConstants {
        self.constants
    }

    /// `H'PH`.
    pub fn projection_reduced(&self) -> &DMatrix<f64> {
        &self.p_reduced
    }

    /// `H'RH`.
    pub fn laplacian_reduced(&self) -> &DMatrix<f64> {
        &self.r_reduced
    }

    /// `H'PY`.
    pub fn projected_response_reduced(&self) -> &DVector<f64> {
        &self.py_reduced
    }

    /// `Y'PY`.
    pub fn projected_response_norm_sq(&self) -> f64 {
        self.ypy
    }

    fn dof_y(&self) -> f64 {
        (self.constants.n - self.constants.p) as f64
    }

    fn dof_u(&self) -> f64 {
        (self.constants.n - self.constants.r) as f64
    }

    /// Method-of-moments starting values: `tau_y = (n-p) / Y'PY` under
    /// `u = 0`, and `tau_u = tau_y`.
    pub fn default_initial_taus(&self) -> Result<(f64, f64)> {
        if self.ypy < DENOMINATOR_FLOOR {
            return Err(Error::DegenerateDenominator {
                component: Precision::Response,
                detail: format!(
                    "Y'PY = {:.3e}: the design reproduces the response exactly",
                    self.ypy
                ),
            });
        }
        let t = self.dof_y() / self.ypy;
        check_tau(t, Precision::Response)?;
        Ok((t, t))
    }

    /// `H'(tau_y P + tau_u R)H`.
    pub fn precision_reduced(&self, tau_y: f64, tau_u: f64) -> DMatrix<f64> {
        &self.p_reduced * tau_y + &self.r_reduced * tau_u
    }

    /// Blocks (a) and (b): `Sigma = (tau_y P + tau_u R)_*^{-1}` and
    /// `mu = Sigma tau_y P Y`, from one factorization.
    pub fn update_q(&self, tau_y: f64, tau_u: f64) -> Result<(DVector<f64>, ConstrainedOperator)> {
        let sigma = ConstrainedOperator::from_reduced(
            self.precision_reduced(tau_y, tau_u),
            self.basis.clone(),
        )?;
        let mu_reduced = sigma.solve_reduced(&(&self.py_reduced * tau_y));
        Ok((self.basis.extend(&mu_reduced), sigma))
    }

    /// `(Y-mu)'P(Y-mu) + tr(P Sigma)`.
    pub fn response_moment(&self, mu: &DVector<f64>, sigma: &ConstrainedOperator) -> f64 {
        self.model
            .projection()
            .apply(&(self.model.y() - mu))
            .norm_squared()
            + sigma.trace_product_reduced(&self.p_reduced)
    }

    /// `mu'R mu + tr(R Sigma)`.
    pub fn spatial_moment(&self, mu: &DVector<f64>, sigma: &ConstrainedOperator) -> f64 {
        let quad: f64 = self
            .icar
            .graph()
            .edges()
            .iter()
            .map(|&(i, j)| (mu[i] - mu[j]).powi(2))
            .sum();
        quad + sigma.trace_product_reduced(&self.r_reduced)
    }

    fn tau_from_moment(&self, dof: f64, moment: f64, which: Precision) -> Result<f64> {
        if !(moment >= DENOMINATOR_FLOOR) {
            return Err(Error::DegenerateDenominator {
                component: which,
                detail: format!("update denominator {moment:.3e} below {DENOMINATOR_FLOOR:.0e}"),
            });
        }
        let tau = dof / moment;
        check_tau(tau, which)?;
        Ok(tau)
    }

    /// Block (c).
    pub fn update_tau_y(&self, mu: &DVector<f64>, sigma: &ConstrainedOperator) -> Result<f64> {
        self.tau_from_moment(
            self.dof_y(),
            self.response_moment(mu, sigma),
            Precision::Response,
        )
    }

    /// Block (d).
    pub fn update_tau_u(&self, mu: &DVector<f64>, sigma: &ConstrainedOperator) -> Result<f64> {
        self.tau_from_moment(
            self.dof_u(),
            self.spatial_moment(mu, sigma),
            Precision::Spatial,
        )
    }

    fn elbo_from_moments(
        &self,
        tau_y: f64,
        tau_u: f64,
        response_moment: f64,
        spatial_moment: f64,
        log_pdet_sigma: f64,
    ) -> f64 {
        self.constants.elbo() - 0.5 * self.model.log_det_gram() + 0.5 * self.dof_y() * tau_y.ln()
            - 0.5 * tau_y * response_moment
            + 0.5 * self.dof_u() * tau_u.ln()
            - 0.5 * tau_u * spatial_moment
            + 0.5 * log_pdet_sigma
    }

    pub fn elbo(&self, state: &VariationalState) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.elbo_from_moments(
            state.tau_y,
            state.tau_u,
            self.response_moment(&state.mu, &state.sigma),
            self.spatial_moment(&state.mu, &state.sigma),
            state.sigma.pseudo_log_det(),
        ))
    }

    pub fn gradients(&self, state: &VariationalState) -> Result<ElboGradients> {
        self.check_state(state)?;
        let (ty, tu) = (state.tau_y, state.tau_u);
        let resid = self.model.projection().apply(&(self.model.y() - &state.mu));
        let mu = resid * ty - self.icar.apply(&state.mu) * tu;
        let sigma_reduced = (state.sigma.reduced_operator() - self.precision_reduced(ty, tu)) * 0.5;
        let tau_y = 0.5 * self.dof_y() / ty - 0.5 * self.response_moment(&state.mu, &state.sigma);
        let tau_u = 0.5 * self.dof_u() / tu - 0.5 * self.spatial_moment(&state.mu, &state.sigma);
        Ok(ElboGradients {
            mu,
            sigma_reduced,
            tau_y,
            tau_u,
        })
    }

    pub fn residuals(&self, state: &VariationalState) -> Result<FixedPointResiduals> {
        let g = self.gradients(state)?;
        let (ty, tu) = (state.tau_y, state.tau_u);
        let mu_scale = (self.ypy.sqrt() * ty).max(f64::MIN_POSITIVE);
        let a_norm = self.precision_reduced(ty, tu).norm();
        Ok(FixedPointResiduals {
            mu: g.mu.norm() / mu_scale,
            sigma: 2.0 * g.sigma_reduced.norm() / a_norm,
            tau_y: (g.tau_y * 2.0 * ty / self.dof_y()).abs(),
            tau_u: (g.tau_u * 2.0 * tu / self.dof_u()).abs(),
        })
    }

    fn check_state(&self, state: &VariationalState) -> Result<()> {
        if state.mu.len() != self.constants.n || state.sigma.basis().dim() != self.basis.dim() {
            return Err(Error::DimensionMismatch {
                what: "variational state",
                expected: self.constants.n,
                got: state.mu.len(),
            });
        }
        Ok(())
    }

    /// Runs coordinate ascent from the configured (or default) precisions.
    pub fn fit(&self, config: &FitConfig) -> Result<FitReport> {
        match config.backend {
            Backend::Dense => self.fit_with(config, &DenseSweeps(self)),
            Backend::Spectral => {
                let spectrum = IcarSpectrum::new(self.icar)?;
                self.fit_spectral(config, &spectrum)
            }
        }
    }

    /// Runs coordinate ascent on the eigenbasis backend with a precomputed
    /// spectrum of the same graph, whatever `config.backend` says.
    pub fn fit_spectral(&self, config: &FitConfig, spectrum: &IcarSpectrum) -> Result<FitReport> {
        self.fit_with(config, &SpectralProblem::new(spectrum, self.model)?)
    }

    fn initial_taus(&self, config: &FitConfig) -> Result<(f64, f64)> {
        config.validate()?;
        let (ty, tu) = match (config.init_tau_y, config.init_tau_u) {
            (Some(ty), Some(tu)) => (ty, tu),
            (ty, tu) => {
                let (dy, du) = self.default_initial_taus()?;
                (ty.unwrap_or(dy), tu.unwrap_or(du))
            }
        };
        check_tau(ty, Precision::Response)?;
        check_tau(tu, Precision::Spatial)?;
        Ok((ty, tu))
    }

    fn fit_with<S: Sweeps>(&self, config: &FitConfig, engine: &S) -> Result<FitReport> {
        let (tau_y0, tau_u0) = self.initial_taus(config)?;
        let (mut tau_y, mut tau_u) = (tau_y0, tau_u0);
        let mut trace: Vec<f64> = Vec::new();
        // q together with the precisions it was computed at.
        let mut q: Option<(S::Q, f64, f64)> = None;
        let mut converged = false;
        let mut sweeps = 0;

        while sweeps < config.max_sweeps {
            sweeps += 1;
            let (old_y, old_u) = (tau_y, tau_u);
            let value = match config.fault {
                None | Some(Fault::DropTrace) => {
                    let cur = engine.update_q(tau_y, tau_u)?;
                    let ry = engine.response_quadratic(&cur) + engine.trace_p(&cur);
                    let denominator = match config.fault {
                        Some(Fault::DropTrace) => ry - engine.trace_p(&cur),
                        _ => ry,
                    };
                    let (qy, qu) = (tau_y, tau_u);
                    tau_y = self.tau_from_moment(self.dof_y(), denominator, Precision::Response)?;
                    let ru = engine.spatial_moment(&cur);
                    tau_u = self.tau_from_moment(self.dof_u(), ru, Precision::Spatial)?;
                    let v = self.elbo_from_moments(tau_y, tau_u, ry, ru, engine.log_pdet(&cur));
                    q = Some((cur, qy, qu));
                    v
                }
                Some(Fault::TauOrder) => {
                    if let Some((prev, _, _)) = &q {
                        let ry = engine.response_quadratic(prev) + engine.trace_p(prev);
                        tau_y = self.tau_from_moment(self.dof_y(), ry, Precision::Response)?;
                        let ru = engine.spatial_moment(prev);
                        tau_u = self.tau_from_moment(self.dof_u(), ru, Precision::Spatial)?;
                    }
                    let cur = engine.update_q(tau_y, tau_u)?;
                    let v = self.elbo_from_moments(
                        tau_y,
                        tau_u,
                        engine.response_quadratic(&cur) + engine.trace_p(&cur),
                        engine.spatial_moment(&cur),
                        engine.log_pdet(&cur),
                    );
                    q = Some((cur, tau_y, tau_u));
                    v
                }
            };
            if !value.is_finite() {
                return Err(Error::DegenerateDenominator {
                    component: Precision::Spatial,
                    detail: format!("ELBO became non-finite at sweep {sweeps}"),
                });
            }
            let previous = trace.last().copied();
            trace.push(value);
            if let Some(prev) = previous {
                let stop = match config.rule {
                    ConvergenceRule::Absolute => (value - prev).abs() < config.tol,
                    ConvergenceRule::Relative => {
                        (value - prev).abs() < config.tol * (1.0 + value.abs())
                    }
                    ConvergenceRule::Parameters => {
                        let dy = (tau_y - old_y).abs() / tau_y;
                        let du = (tau_u - old_u).abs() / tau_u;
                        dy.max(du) < config.tol
                    }
                };
                if stop {
                    converged = true;
                    break;
                }
            }
        }

        let (last, qy, qu) = q.expect("max_sweeps >= 1");
        let (mu, sigma) = engine.finish(self, last, qy, qu)?;
        let mut state = VariationalState::new(mu, sigma, tau_y, tau_u)?;
        state.elbo_trace = trace;
        let residuals = self.residuals(&state)?;
        let beta_hat = self.model.recover_beta(&state.mu)?;
        let fitted = self.model.fitted(&beta_hat, &state.mu);
        let report = FitReport {
            state,
            beta_hat,
            fitted,
            sweeps,
            converged,
            residuals,
            initial_tau_y: tau_y0,
            initial_tau_u: tau_u0,
        };
        if converged {
            Ok(report)
        } else {
            Err(Error::NotConverged {
                report: Box::new(report),
            })
        }
    }
}

/// One backend's implementation of the `(Sigma, mu)` block and the moments
/// the precision updates need.
trait Sweeps {
    type Q;
    fn update_q(&self, tau_y: f64, tau_u: f64) -> Result<Self::Q>;
    /// `(Y-mu)'P(Y-mu)`.
    fn response_quadratic(&self, q: &Self::Q) -> f64;
    /// `tr(P Sigma)`.
    fn trace_p(&self, q: &Self::Q) -> f64;
    /// `mu'R mu + tr(R Sigma)`.
    fn spatial_moment(&self, q: &Self::Q) -> f64;
    fn log_pdet(&self, q: &Self::Q) -> f64;
    /// Dense `(mu, Sigma)` for the final report.
    fn finish(
        &self,
        problem: &Problem<'_>,
        q: Self::Q,
        tau_y: f64,
        tau_u: f64,
    ) -> Result<(DVector<f64>, ConstrainedOperator)>;
}

struct DenseSweeps<'p, 'a>(&'p Problem<'a>);

impl Sweeps for DenseSweeps<'_, '_> {
    type Q = (DVector<f64>, ConstrainedOperator);

    fn update_q(&self, tau_y: f64, tau_u: f64) -> Result<Self::Q> {
        self.0.update_q(tau_y, tau_u)
    }

    fn response_quadratic(&self, q: &Self::Q) -> f64 {
        let m = self.0.model;
        m.projection().apply(&(m.y() - &q.0)).norm_squared()
    }

    fn trace_p(&self, q: &Self::Q) -> f64 {
        q.1.trace_product_reduced(&self.0.p_reduced)
    }

    fn spatial_moment(&self, q: &Self::Q) -> f64 {
        self.0.spatial_moment(&q.0, &q.1)
    }

    fn log_pdet(&self, q: &Self::Q) -> f64 {
        q.1.pseudo_log_det()
    }

    fn finish(
        &self,
        _: &Problem<'_>,
        q: Self::Q,
        _: f64,
        _: f64,
    ) -> Result<(DVector<f64>, ConstrainedOperator)> {
        Ok(q)
    }
}

impl Sweeps for SpectralProblem<'_> {
    type Q = SpectralQ;

    fn update_q(&self, tau_y: f64, tau_u: f64) -> Result<Self::Q> {
        SpectralProblem::update_q(self, tau_y, tau_u)
    }

    fn response_quadratic(&self, q: &Self::Q) -> f64 {
        SpectralProblem::response_quadratic(self, q)
    }

    fn trace_p(&self, q: &Self::Q) -> f64 {
        q.trace_p
    }

    fn spatial_moment(&self, q: &Self::Q) -> f64 {
        self.spatial_quadratic(q) + q.trace_r
    }

    fn log_pdet(&self, q: &Self::Q) -> f64 {
        q.log_pdet
    }

    /// The reported state is rebuilt on the dense path at the precisions of
    /// the last `q` update.
    fn finish(
        &self,
        problem: &Problem<'_>,
        _: Self::Q,
        tau_y: f64,
        tau_u: f64,
    ) -> Result<(DVector<f64>, ConstrainedOperator)> {
        problem.update_q(tau_y, tau_u)
    }
}

/// ELBO of `state` for the given data.
pub fn elbo(state: &VariationalState, model: &ModelData, icar: &IcarStructure) -> Result<f64> {
    Problem::new(model, icar)?.elbo(state)
}

pub fn elbo_gradients(
    state: &VariationalState,
    model: &ModelData,
    icar: &IcarStructure,
) -> Result<ElboGradients> {
    Problem::new(model, icar)?.gradients(state)
}

/// Coordinate-ascent VREML fit. A run that exhausts `max_sweeps` returns
/// [`Error::NotConverged`] carrying the final report.
pub fn fit(model: &ModelData, icar: &IcarStructure, config: &FitConfig) -> Result<FitReport> {
    Problem::new(model, icar)?.fit(config)
}
