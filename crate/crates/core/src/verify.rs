//! Randomized invariant suite: monotone ascent, exactness of the Gaussian
//! family, the Jensen bound, stationarity at convergence, analytic versus
//! finite-difference gradients, and the `(Sigma, mu)` block against the dense
//! posterior.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{build_icar, grid_graph, Contiguity, IcarStructure};
use crate::model::{load_model, ModelData};
use crate::oracle::{exact_posterior, restricted_loglik_with};
use crate::subspace::{ReducedForm, SumToZeroBasis};
use crate::vreml::{ConvergenceRule, FitConfig, Problem, VariationalState};

/// Tolerances of the suite.
pub mod tolerance {
    pub const MONOTONICITY: f64 = 1e-9;
    pub const EXACTNESS: f64 = 1e-8;
    pub const JENSEN: f64 = 1e-8;
    pub const STATIONARITY: f64 = 1e-6;
    pub const GRADIENT: f64 = 1e-4;
    pub const POSTERIOR: f64 = 1e-8;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    /// Precision pairs per trial for the exactness and posterior checks.
    pub tau_pairs: usize,
    /// Random states per trial for the gradient and Jensen checks.
    pub random_states: usize,
    pub fit: FitConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n: 36,
            trials: 25,
            seed: 2024,
            tau_pairs: 5,
            random_states: 4,
            fit: Self::default_fit(),
        }
    }
}

impl VerifyConfig {
    /// Stops on a relative precision change below `1e-10`, tight enough
    /// that stationarity residuals at the stopping point sit well inside
    /// their tolerance.
    pub fn default_fit() -> FitConfig {
        FitConfig {
            tol: 1e-10,
            max_sweeps: 20_000,
            rule: ConvergenceRule::Parameters,
            ..FitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.n < 9 {
            return Err(Error::InvalidConfig(format!(
                "n must be at least 9, got {}",
                self.n
            )));
        }
        if self.n > crate::oracle::POSTERIOR_SIZE_LIMIT {
            return Err(Error::SizeGuard {
                n: self.n,
                limit: crate::oracle::POSTERIOR_SIZE_LIMIT,
            });
        }
        self.fit.validate()
    }
}

/// A random test problem on a `rows x cols` rook lattice.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: ModelData,
    pub icar: IcarStructure,
}

/// Lattice shape with `rows * cols = n` and `rows` the largest divisor of
/// `n` not exceeding `sqrt(n)`.
pub fn lattice_shape(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    (rows.max(1), n / rows.max(1))
}

/// Draws instance `trial`: design `[1, z1, z2]` with standard normal
/// columns, `beta ~ N(0, I)`, variances log-uniform on `[0.25, 4]` and data
/// from the ICAR model.
pub fn random_instance(n: usize, seed: u64, trial: usize) -> Result<Instance> {
    let (rows, cols) = lattice_shape(n);
    let icar = build_icar(&grid_graph(rows, cols, Contiguity::Rook)?)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { normal() });
    let beta = DVector::from_fn(3, |_, _| normal());
    let z = DVector::from_fn(n - 1, |_, _| normal());
    let eps = DVector::from_fn(n, |_, _| normal());
    let sigma_u = (rng.random_range(0.25f64.ln()..4f64.ln()) * 0.5).exp();
    let sigma_e = (rng.random_range(0.25f64.ln()..4f64.ln()) * 0.5).exp();

    let basis = SumToZeroBasis::helmert(n)?;
    let k = Cholesky::new(icar.reduce(&basis)).ok_or(Error::NotPositiveDefiniteOnE)?;
    let mut theta = z * sigma_u;
    k.l_dirty().tr_solve_lower_triangular_mut(&mut theta);
    let y = &x * beta + basis.extend(&theta) + eps * sigma_e;
    Ok(Instance {
        model: load_model(y, x)?,
        icar,
    })
}

/// Worst deviation observed for one property.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub property: &'static str,
    pub tolerance: f64,
    pub worst: f64,
    pub evaluations: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    /// Fits that stopped on the convergence rule.
    pub converged_fits: usize,
    /// Fits that hit the sweep cap, typically with one variance component
    /// drifting to zero; excluded from the stationarity check.
    pub unconverged_fits: usize,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, property: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.property == property)
    }
}

#[derive(Debug, Default, Clone)]
struct Worst {
    value: f64,
    count: usize,
}

impl Worst {
    fn push(&mut self, v: f64) {
        // NaN counts as the worst possible deviation.
        self.value = if v.is_nan() {
            f64::INFINITY
        } else {
            self.value.max(v)
        };
        self.count += 1;
    }

    fn merge(&mut self, other: &Worst) {
        self.value = self.value.max(other.value);
        self.count += other.count;
    }
}

#[derive(Debug, Default, Clone)]
struct TrialStats {
    fit_errors: Worst,
    monotonicity: Worst,
    exactness: Worst,
    jensen: Worst,
    stationarity: Worst,
    grad_tau_y: Worst,
    grad_tau_u: Worst,
    grad_mu: Worst,
    posterior_mu: Worst,
    posterior_sigma: Worst,
    converged: usize,
    unconverged: usize,
}

impl TrialStats {
    fn merge(&mut self, o: &TrialStats) {
        self.fit_errors.merge(&o.fit_errors);
        self.monotonicity.merge(&o.monotonicity);
        self.exactness.merge(&o.exactness);
        self.jensen.merge(&o.jensen);
        self.stationarity.merge(&o.stationarity);
        self.grad_tau_y.merge(&o.grad_tau_y);
        self.grad_tau_u.merge(&o.grad_tau_u);
        self.grad_mu.merge(&o.grad_mu);
        self.posterior_mu.merge(&o.posterior_mu);
        self.posterior_sigma.merge(&o.posterior_sigma);
        self.converged += o.converged;
        self.unconverged += o.unconverged;
    }
}

/// Relative disagreement of an analytic derivative and its finite-difference
/// estimate.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(scale)
}

/// Largest scaled drop of the ELBO between consecutive sweeps (zero when
/// the trace never decreases).
pub fn worst_decrease(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| ((w[0] - w[1]) / (1.0 + w[0].abs())).max(0.0))
        .fold(0.0, f64::max)
}

fn log_uniform(rng: &mut ChaCha20Rng, center: f64, half_width: f64) -> f64 {
    (center.ln() + rng.random_range(-half_width..half_width)).exp()
}

fn run_trial(config: &VerifyConfig, trial: usize) -> Result<TrialStats> {
    let inst = random_instance(config.n, config.seed, trial)?;
    let problem = Problem::new(&inst.model, &inst.icar)?;
    let (t0, _) = problem.default_initial_taus()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7e57);
    rng.set_stream(trial as u64);
    let mut s = TrialStats::default();

    // Coordinate ascent: monotone trace, stationarity, Jensen at the end.
    let report = match problem.fit(&config.fit) {
        Ok(r) => {
            s.converged += 1;
            s.stationarity.push(r.residuals.max());
            Some(r)
        }
        Err(Error::NotConverged { report }) => {
            s.unconverged += 1;
            Some(*report)
        }
        Err(e) => {
            log::warn!("trial {trial}: fit failed: {e}");
            None
        }
    };
    s.fit_errors.push(if report.is_some() { 0.0 } else { 1.0 });
    if let Some(report) = report {
        s.monotonicity
            .push(worst_decrease(report.state.elbo_trace()));
        let end = problem.elbo(&report.state)?;
        let bound = restricted_loglik_with(&problem, report.tau_y(), report.tau_u())?;
        s.jensen.push(end - bound);
    }

    // Exact posterior at random precisions: ELBO = restricted likelihood,
    // and the (Sigma, mu) block equals the dense posterior.
    for _ in 0..config.tau_pairs {
        let ty = log_uniform(&mut rng, t0, 2.0);
        let tu = log_uniform(&mut rng, t0, 2.0);
        let (mu, sigma) = problem.update_q(ty, tu)?;
        let state = VariationalState::new(mu, sigma, ty, tu)?;
        let l = problem.elbo(&state)?;
        let r = restricted_loglik_with(&problem, ty, tu)?;
        s.exactness.push((l - r).abs() / (1.0 + r.abs()));
        s.jensen.push(l - r);
        let exact = exact_posterior(ty, tu, &inst.model, &inst.icar)?;
        s.posterior_mu.push((state.mu() - &exact.mu).norm());
        s.posterior_sigma
            .push((state.sigma().covariance() - &exact.sigma).norm());
    }

    // Random (non-optimal) states: Jensen and finite differences.
    let n = config.n;
    let basis = problem.basis().clone();
    for _ in 0..config.random_states {
        let ty = log_uniform(&mut rng, t0, 1.5);
        let tu = log_uniform(&mut rng, t0, 1.5);
        let (_, sigma) = problem.update_q(
            log_uniform(&mut rng, t0, 1.5),
            log_uniform(&mut rng, t0, 1.5),
        )?;
        let raw = DVector::from_fn(n - 1, |_, _| StandardNormal.sample(&mut rng));
        let mu = basis.extend(&raw) * (1.0 / t0.sqrt());
        let state = VariationalState::new(mu.clone(), sigma.clone(), ty, tu)?;
        let l = problem.elbo(&state)?;
        s.jensen.push(l - restricted_loglik_with(&problem, ty, tu)?);

        let g = problem.gradients(&state)?;
        let scale = 1e-6 * (1.0 + l.abs());
        let at = |ty: f64, tu: f64, mu: &DVector<f64>| -> Result<f64> {
            problem.elbo(&VariationalState::new(mu.clone(), sigma.clone(), ty, tu)?)
        };
        let h = 1e-6 * ty;
        let fd = (at(ty + h, tu, &mu)? - at(ty - h, tu, &mu)?) / (2.0 * h);
        s.grad_tau_y.push(relative_error(g.tau_y, fd, scale / ty));
        let h = 1e-6 * tu;
        let fd = (at(ty, tu + h, &mu)? - at(ty, tu - h, &mu)?) / (2.0 * h);
        s.grad_tau_u.push(relative_error(g.tau_u, fd, scale / tu));
        for _ in 0..5 {
            let d = basis.extend(&DVector::from_fn(n - 1, |_, _| {
                StandardNormal.sample(&mut rng)
            }));
            let d = &d / d.norm();
            let h = 1e-6 * (1.0 + mu.norm());
            let fd = (at(ty, tu, &(&mu + &d * h))? - at(ty, tu, &(&mu - &d * h))?) / (2.0 * h);
            s.grad_mu.push(relative_error(g.mu.dot(&d), fd, scale));
        }
    }
    Ok(s)
}

/// Runs the suite on `config.trials` random instances.
pub fn run_suite(config: &VerifyConfig) -> Result<VerifyReport> {
    config.validate()?;
    let per_trial: Vec<Result<TrialStats>> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(config, t))
        .collect();
    let mut all = TrialStats::default();
    for t in per_trial {
        all.merge(&t?);
    }
    let row = |property: &'static str, tolerance: f64, w: &Worst| CheckOutcome {
        property,
        tolerance,
        worst: w.value,
        evaluations: w.count,
        passed: w.value <= tolerance,
    };
    use tolerance::*;
    Ok(VerifyReport {
        checks: vec![
            row("fit ends without error", 0.0, &all.fit_errors),
            row("monotone ELBO", MONOTONICITY, &all.monotonicity),
            row(
                "ELBO = restricted loglik at exact q",
                EXACTNESS,
                &all.exactness,
            ),
            row("ELBO <= restricted loglik", JENSEN, &all.jensen),
            row(
                "stationarity at convergence",
                STATIONARITY,
                &all.stationarity,
            ),
            row("dL/dtau_y vs finite difference", GRADIENT, &all.grad_tau_y),
            row("dL/dtau_u vs finite difference", GRADIENT, &all.grad_tau_u),
            row("dL/dmu vs finite difference", GRADIENT, &all.grad_mu),
            row(
                "block mu = exact posterior mean",
                POSTERIOR,
                &all.posterior_mu,
            ),
            row(
                "block Sigma = exact posterior cov",
                POSTERIOR,
                &all.posterior_sigma,
            ),
        ],
        converged_fits: all.converged,
        unconverged_fits: all.unconverged,
    })
}
