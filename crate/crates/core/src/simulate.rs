//! Lattice simulation study.
//!
//! Each replication draws `u = H theta` with `theta ~ N(0, sigma_u^2 K^{-1})`,
//! `K = H'RH`, and `Y = X beta + u + eps` on an `n0 x n0` lattice whose
//! design is `[1, row, col]` with standardized coordinates.
//!
//! Random streams: replication `k` of a study seeded with `s` uses
//! `ChaCha20Rng::seed_from_u64(s)` with stream `2k` for the spatial draw and
//! `2k + 1` for the noise, so any replication can be regenerated in
//! isolation and parallel runs match serial ones bit for bit.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{build_icar, lattice_graph, Contiguity, IcarStructure};
use crate::model::{load_model, ModelData};
use crate::oracle::{self, OracleMethod};
use crate::spectral::IcarSpectrum;
use crate::subspace::{ReducedForm, SumToZeroBasis};
use crate::vreml::{Backend, FitConfig, Problem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vreml,
    ExactReml,
    ExactMle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vreml, Method::ExactReml, Method::ExactMle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vreml => "vreml",
            Method::ExactReml => "exact-reml",
            Method::ExactMle => "exact-mle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "vreml" => Ok(Method::Vreml),
            "exact-reml" => Ok(Method::ExactReml),
            "exact-mle" => Ok(Method::ExactMle),
            other => Err(Error::InvalidConfig(format!(
                "unknown method '{other}' (expected vreml, exact-reml or exact-mle)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub n0: usize,
    pub n_sim: usize,
    pub beta: Vec<f64>,
    pub sigma_eps_sq: f64,
    pub sigma_u_sq: f64,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub contiguity: Contiguity,
    #[serde(skip)]
    pub fit: FitConfig,
    /// Worker threads for replications; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n0: 7,
            n_sim: 200,
            beta: vec![1.0, 1.2, -1.0],
            sigma_eps_sq: 0.7,
            sigma_u_sq: 1.3,
            seed: 42,
            methods: vec![Method::Vreml],
            contiguity: Contiguity::Rook,
            fit: Self::default_fit(),
            threads: None,
        }
    }
}

impl SimConfig {
    /// Stopping rule and tolerance as for single fits, on the eigenbasis
    /// backend with a sweep cap large enough for replications whose
    /// estimates drift toward a zero variance component.
    pub fn default_fit() -> FitConfig {
        FitConfig {
            backend: Backend::Spectral,
            max_sweeps: 100_000,
            ..FitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 < 3 {
            return Err(Error::InvalidConfig(format!(
                "n0 must be at least 3, got {}",
                self.n0
            )));
        }
        if self.n_sim == 0 {
            return Err(Error::InvalidConfig("n_sim must be at least 1".into()));
        }
        if self.beta.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "beta must have 3 entries (intercept, row, column), got {}",
                self.beta.len()
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig("beta must be finite".into()));
        }
        for (name, v) in [
            ("sigma_eps_sq", self.sigma_eps_sq),
            ("sigma_u_sq", self.sigma_u_sq),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one method is required".into(),
            ));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        self.fit.validate()
    }
}

/// Column-wise standardization with the sample standard deviation.
pub fn standardize(v: &[f64]) -> Result<Vec<f64>> {
    let m = v.len();
    if m < 2 {
        return Err(Error::InvalidConfig(
            "standardization needs at least two values".into(),
        ));
    }
    let mean = v.iter().sum::<f64>() / m as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::ZeroVarianceResponse);
    }
    Ok(v.iter().map(|x| (x - mean) / sd).collect())
}

/// Quantities shared by every replication of a study.
#[derive(Debug, Clone)]
pub struct SimDesign {
    icar: IcarStructure,
    basis: SumToZeroBasis,
    x: DMatrix<f64>,
    mean: DVector<f64>,
    k_factor: Cholesky<f64, Dyn>,
    spectrum: IcarSpectrum,
}

impl SimDesign {
    pub fn new(config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let n0 = config.n0;
        let n = n0 * n0;
        let icar = build_icar(&lattice_graph(n0, config.contiguity)?)?;
        let basis = SumToZeroBasis::helmert(n)?;
        let rows: Vec<f64> = (0..n).map(|i| (i / n0) as f64).collect();
        let cols: Vec<f64> = (0..n).map(|i| (i % n0) as f64).collect();
        let (rows, cols) = (standardize(&rows)?, standardize(&cols)?);
        let x = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => rows[i],
            _ => cols[i],
        });
        let mean = &x * DVector::from_column_slice(&config.beta);
        let k = icar.reduce(&basis);
        let k_factor = Cholesky::new(k).ok_or(Error::NotPositiveDefiniteOnE)?;
        let spectrum = IcarSpectrum::new(&icar)?;
        Ok(Self {
            icar,
            basis,
            x,
            mean,
            k_factor,
            spectrum,
        })
    }

    pub fn icar(&self) -> &IcarStructure {
        &self.icar
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Draws replication `rep`: returns the model data and the true `u`.
    pub fn generate(&self, config: &SimConfig, rep: usize) -> Result<(ModelData, DVector<f64>)> {
        let n = self.icar.n();
        let mut spatial = stream(config.seed, rep, 0);
        let z = DVector::from_fn(n - 1, |_, _| {
            Distribution::<f64>::sample(&StandardNormal, &mut spatial)
        });
        // theta = sigma_u L^{-T} z has covariance sigma_u^2 (L L')^{-1}.
        let l = self.k_factor.l_dirty();
        let mut theta = z * config.sigma_u_sq.sqrt();
        if !l.tr_solve_lower_triangular_mut(&mut theta) {
            return Err(Error::NotPositiveDefiniteOnE);
        }
        let u = self.basis.extend(&theta);

        let mut noise = stream(config.seed, rep, 1);
        let sd = config.sigma_eps_sq.sqrt();
        let eps = DVector::from_fn(n, |_, _| {
            sd * Distribution::<f64>::sample(&StandardNormal, &mut noise)
        });
        let y = &self.mean + &u + eps;
        Ok((load_model(y, self.x.clone())?, u))
    }

    /// Fits replication `rep` with every configured method.
    pub fn replicate(&self, config: &SimConfig, rep: usize) -> Vec<ReplicationRow> {
        let generated = self.generate(config, rep);
        config
            .methods
            .iter()
            .map(|&method| match &generated {
                Ok((model, u)) => self.evaluate(config, rep, method, model, u),
                Err(e) => ReplicationRow::failed(rep, method, e),
            })
            .collect()
    }

    fn evaluate(
        &self,
        config: &SimConfig,
        rep: usize,
        method: Method,
        model: &ModelData,
        u_true: &DVector<f64>,
    ) -> ReplicationRow {
        let outcome = self.estimate(config, method, model);
        match outcome {
            Ok(est) => {
                let n = model.n() as f64;
                let resid = model.y() - &est.fitted;
                ReplicationRow {
                    replication: rep,
                    method,
                    ok: true,
                    error: String::new(),
                    tau_y: est.tau_y,
                    tau_u: est.tau_u,
                    sigma_eps_sq: 1.0 / est.tau_y,
                    sigma_u_sq: 1.0 / est.tau_u,
                    mspe: resid.norm_squared() / n,
                    mae: resid.iter().map(|r| r.abs()).sum::<f64>() / n,
                    u_mspe: (&est.u_hat - u_true).norm_squared() / n,
                    sq_err_sigma_u_sq: (1.0 / est.tau_u - config.sigma_u_sq).powi(2),
                    sq_err_sigma_eps_sq: (1.0 / est.tau_y - config.sigma_eps_sq).powi(2),
                    iterations: est.iterations,
                }
            }
            Err(e) => ReplicationRow::failed(rep, method, &e),
        }
    }

    fn estimate(&self, config: &SimConfig, method: Method, model: &ModelData) -> Result<Estimate> {
        let problem = Problem::new(model, &self.icar)?;
        match method {
            Method::Vreml => {
                let report = match config.fit.backend {
                    Backend::Spectral => problem.fit_spectral(&config.fit, &self.spectrum)?,
                    Backend::Dense => problem.fit(&config.fit)?,
                };
                Ok(Estimate {
                    tau_y: report.tau_y(),
                    tau_u: report.tau_u(),
                    fitted: report.fitted,
                    u_hat: report.state.mu().clone(),
                    iterations: report.sweeps,
                })
            }
            Method::ExactReml | Method::ExactMle => {
                let oracle_method = if method == Method::ExactReml {
                    OracleMethod::ExactReml
                } else {
                    OracleMethod::ExactMle
                };
                let marginal = self.spectrum.marginal(model)?;
                let start = oracle::moment_start(model)?;
                let est = marginal.maximize(oracle_method, start)?;
                let (mu, _) = problem.update_q(est.tau_y_hat, est.tau_u_hat)?;
                let beta = model.recover_beta(&mu)?;
                Ok(Estimate {
                    tau_y: est.tau_y_hat,
                    tau_u: est.tau_u_hat,
                    fitted: model.fitted(&beta, &mu),
                    u_hat: mu,
                    iterations: est.diagnostics.evaluations,
                })
            }
        }
    }
}

struct Estimate {
    tau_y: f64,
    tau_u: f64,
    fitted: DVector<f64>,
    u_hat: DVector<f64>,
    iterations: usize,
}

fn stream(seed: u64, rep: usize, purpose: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(2 * rep as u64 + purpose);
    rng
}

/// Generates replication `rep` of the study described by `config`.
pub fn generate(
    config: &SimConfig,
    rep: usize,
) -> Result<(ModelData, IcarStructure, DVector<f64>)> {
    let design = SimDesign::new(config)?;
    let (model, u) = design.generate(config, rep)?;
    Ok((model, design.icar, u))
}

/// One replication fitted by one method. Failed fits keep `ok = false`, the
/// error message, and NaN metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRow {
    pub replication: usize,
    #[serde(serialize_with = "method_name")]
    pub method: Method,
    pub ok: bool,
    pub error: String,
    pub tau_y: f64,
    pub tau_u: f64,
    pub sigma_eps_sq: f64,
    pub sigma_u_sq: f64,
    pub mspe: f64,
    pub mae: f64,
    pub u_mspe: f64,
    pub sq_err_sigma_u_sq: f64,
    pub sq_err_sigma_eps_sq: f64,
    pub iterations: usize,
}

fn method_name<S: serde::Serializer>(m: &Method, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(m.name())
}

impl ReplicationRow {
    fn failed(replication: usize, method: Method, e: &Error) -> Self {
        log::warn!("replication {replication} ({}) failed: {e}", method.name());
        Self {
            replication,
            method,
            ok: false,
            error: e.to_string(),
            tau_y: f64::NAN,
            tau_u: f64::NAN,
            sigma_eps_sq: f64::NAN,
            sigma_u_sq: f64::NAN,
            mspe: f64::NAN,
            mae: f64::NAN,
            u_mspe: f64::NAN,
            sq_err_sigma_u_sq: f64::NAN,
            sq_err_sigma_eps_sq: f64::NAN,
            iterations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    #[serde(serialize_with = "method_name")]
    pub method: Method,
    pub replications: usize,
    pub failed: usize,
    pub mean_mspe: f64,
    pub mean_mae: f64,
    pub mean_u_mspe: f64,
    pub rmse_sigma_u_sq: f64,
    pub rmse_sigma_eps_sq: f64,
}

impl MethodSummary {
    /// Aggregates the successful rows of `method`, in row order.
    pub fn from_rows(method: Method, rows: &[ReplicationRow]) -> Self {
        let mine: Vec<&ReplicationRow> = rows.iter().filter(|r| r.method == method).collect();
        let ok: Vec<&ReplicationRow> = mine.iter().copied().filter(|r| r.ok).collect();
        let mean = |f: fn(&ReplicationRow) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        Self {
            method,
            replications: mine.len(),
            failed: mine.len() - ok.len(),
            mean_mspe: mean(|r| r.mspe),
            mean_mae: mean(|r| r.mae),
            mean_u_mspe: mean(|r| r.u_mspe),
            rmse_sigma_u_sq: mean(|r| r.sq_err_sigma_u_sq).sqrt(),
            rmse_sigma_eps_sq: mean(|r| r.sq_err_sigma_eps_sq).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// Rows ordered by replication, then by the configured method order.
    pub rows: Vec<ReplicationRow>,
    pub summaries: Vec<MethodSummary>,
}

impl SimResult {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

/// Runs every replication and aggregates per method.
pub fn run_study(config: &SimConfig) -> Result<SimResult> {
    let design = SimDesign::new(config)?;
    let work = || -> Vec<ReplicationRow> {
        (0..config.n_sim)
            .into_par_iter()
            .flat_map_iter(|rep| design.replicate(config, rep))
            .collect()
    };
    let rows = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let summaries = config
        .methods
        .iter()
        .map(|&m| MethodSummary::from_rows(m, &rows))
        .collect();
    Ok(SimResult { rows, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_sim: usize) -> SimConfig {
        SimConfig {
            n0: 5,
            n_sim,
            seed: 7,
            ..SimConfig::default()
        }
    }

    #[test]
    fn draws_sum_to_zero() {
        let cfg = small(1);
        let design = SimDesign::new(&cfg).unwrap();
        for rep in 0..20 {
            let (_, u) = design.generate(&cfg, rep).unwrap();
            assert!(u.sum().abs() < 1e-10);
        }
    }

    #[test]
    fn coordinates_are_standardized() {
        let design = SimDesign::new(&small(1)).unwrap();
        let x = design.design();
        for j in 1..3 {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(mean.abs() < 1e-10 && (var.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn spatial_variance_proxy() {
        // E[u'Ru] = sigma_u^2 (n - 1).
        let cfg = SimConfig { n0: 6, ..small(1) };
        let design = SimDesign::new(&cfg).unwrap();
        let n = 36.0;
        let mean = (0..1000)
            .map(|rep| {
                let (_, u) = design.generate(&cfg, rep).unwrap();
                design.icar().quadratic_form(&u).unwrap() / (n - 1.0)
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean / cfg.sigma_u_sq - 1.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(SimConfig {
            n_sim: 0,
            ..small(1)
        }
        .validate()
        .is_err());
        assert!(SimConfig { n0: 2, ..small(1) }.validate().is_err());
        assert!(SimConfig {
            sigma_u_sq: 0.0,
            ..small(1)
        }
        .validate()
        .is_err());
        assert!(SimConfig {
            methods: vec![],
            ..small(1)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("inla").is_err());
    }

    #[test]
    fn replication_in_isolation_matches_study_row() {
        let cfg = small(4);
        let study = run_study(&cfg).unwrap();
        let design = SimDesign::new(&cfg).unwrap();
        let alone = design.replicate(&cfg, 2);
        assert_eq!(
            format!("{alone:?}"),
            format!("{:?}", vec![study.rows[2].clone()])
        );
    }
}
