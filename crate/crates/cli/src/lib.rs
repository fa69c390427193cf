//! Command-line front end for `icar-vreml`.
//!
//! Every subcommand writes its artifacts into the output directory (`--out`,
//! or `$VREML_OUT`, or `./vreml-out`) together with a `manifest.json`.
//! Exit codes: 0 success, 1 property failure, 2 input or configuration
//! error, 3 non-convergence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use icar_vreml::graph::{build_icar, AdjacencyGraph, Contiguity};
use icar_vreml::ingest::{self, Bounds, GridSize, GridSpec, COVARIATES};
use icar_vreml::io as vio;
use icar_vreml::model::{load_model, ModelData};
use icar_vreml::oracle::{self, OracleEstimates, OracleMethod, GRADIENT_TOLERANCE};
use icar_vreml::simulate::{self, Method, SimConfig, SimDesign};
use icar_vreml::verify::{self, VerifyConfig};
use icar_vreml::vreml::{
    Backend, ConvergenceRule, Fault, FitConfig, FitReport, FixedPointResiduals, Problem,
    VariationalState,
};
use icar_vreml::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_PROPERTY_FAILURE: u8 = 1;
pub const EXIT_INPUT_ERROR: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

/// Version of the `fit.json` layout. Fields are only ever added.
pub const FIT_SCHEMA_VERSION: u32 = 1;

const AFTER_HELP: &str = "\
Exit codes: 0 success, 1 property failure (verify), 2 input or configuration error,
3 fit did not converge (outputs are still written).

Every command writes manifest.json to the output directory: command, resolved
configuration, sha256 digests of inputs and outputs, library version, seed and
wall time.";

#[derive(Debug, Parser)]
#[command(name = "vreml", version, about = "Variational REML for Gaussian intrinsic CAR models", after_help = AFTER_HELP)]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "VREML_OUT", default_value = "vreml-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one dataset.
    #[command(after_help = FIT_HELP)]
    Fit(FitArgs),
    /// Run the lattice simulation study.
    #[command(after_help = SIMULATE_HELP)]
    Simulate(SimulateArgs),
    /// Aggregate point-level cell data onto a grid.
    #[command(after_help = INGEST_HELP)]
    Ingest(IngestArgs),
    /// Check the algebraic invariants on random instances and print a table.
    #[command(after_help = VERIFY_HELP)]
    Verify(VerifyArgs),
}

const FIT_HELP: &str = "\
Inputs:
  adjacency  Matrix Market pattern/0-1 symmetric matrix, or CSV with header i,j
             (0-based node indices; n is taken from the response length).
  design     CSV with a header row of covariate names, one row per node.
  response   CSV with a column named y, one row per node.

Outputs:
  fit.json     schema_version, method, n, p, tau_y, tau_u, sigma_eps_sq,
               sigma_u_sq, beta [{name, estimate}], objective {kind, value},
               convergence {...}, fixed_point_residuals {mu, sigma, tau_y,
               tau_u} (null for exact-mle), elbo_trace [..] (empty for the exact
               methods).
  effects.csv  node, mu, fitted.";

const SIMULATE_HELP: &str = "\
Outputs:
  raw.csv        one row per (replication, method): replication, method, ok,
                 error, tau_y, tau_u, sigma_eps_sq, sigma_u_sq, mspe, mae,
                 u_mspe, sq_err_sigma_u_sq, sq_err_sigma_eps_sq, iterations.
  aggregate.csv  one row per method: method, replications, failed, mean_mspe,
                 mean_mae, mean_u_mspe, rmse_sigma_u_sq, rmse_sigma_eps_sq.
  replication-K/ adjacency.mtx, design.csv, response.csv, u.csv for each
                 --export K.

Bytes of raw.csv and aggregate.csv depend only on the flags, never on --threads.";

const INGEST_HELP: &str = "\
Input CSV header: x,y,count,library_size (one row per cell).

Outputs:
  response.csv   y = standardized log1p(mean count) per occupied grid cell.
  design.csv     intercept, log1p_library_size, log1p_points, center_x, center_y.
  adjacency.mtx  rook adjacency between occupied grid cells.
  cells.csv      row, column, center_x, center_y, points, mean_count,
                 mean_library_size.
  summary.json   cells, input_rows, dropped_rows, edges, components, geometry.";

const VERIFY_HELP: &str = "\
Prints one line per property: name, tolerance, worst observed value, number of
evaluations, PASS/FAIL. Writes verify.csv with the same columns.

--sabotage runs the suite against a deliberately broken fit to show the checks
can fail: tau-order updates the precisions before (Sigma, mu); drop-trace omits
tr(P Sigma) from the tau_y update.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Vreml,
    ExactReml,
    ExactMle,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Vreml => Method::Vreml,
            MethodArg::ExactReml => Method::ExactReml,
            MethodArg::ExactMle => Method::ExactMle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleArg {
    /// |change in ELBO| < tol.
    Absolute,
    /// |change in ELBO| < tol (1 + |ELBO|).
    Relative,
    /// Largest relative change of tau_y, tau_u < tol.
    Parameters,
}

impl From<RuleArg> for ConvergenceRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Absolute => ConvergenceRule::Absolute,
            RuleArg::Relative => ConvergenceRule::Relative,
            RuleArg::Parameters => ConvergenceRule::Parameters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendArg {
    /// Dense reduced-basis Cholesky every sweep.
    Dense,
    /// One eigendecomposition of the Laplacian, then O(n p^2) sweeps.
    Spectral,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Dense => Backend::Dense,
            BackendArg::Spectral => Backend::Spectral,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContiguityArg {
    Rook,
    Queen,
}

impl From<ContiguityArg> for Contiguity {
    fn from(c: ContiguityArg) -> Self {
        match c {
            ContiguityArg::Rook => Contiguity::Rook,
            ContiguityArg::Queen => Contiguity::Queen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SabotageArg {
    TauOrder,
    DropTrace,
}

impl From<SabotageArg> for Fault {
    fn from(s: SabotageArg) -> Self {
        match s {
            SabotageArg::TauOrder => Fault::TauOrder,
            SabotageArg::DropTrace => Fault::DropTrace,
        }
    }
}

/// Coordinate ascent settings shared by `fit` and `simulate`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct AscentArgs {
    /// Stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Maximum number of sweeps.
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    /// Stopping rule.
    #[arg(long, value_enum)]
    pub rule: Option<RuleArg>,
    /// Linear algebra backend.
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Starting tau_y (default: method of moments).
    #[arg(long)]
    pub init_tau_y: Option<f64>,
    /// Starting tau_u (default: method of moments).
    #[arg(long)]
    pub init_tau_u: Option<f64>,
}

impl AscentArgs {
    fn apply(&self, mut config: FitConfig) -> FitConfig {
        if let Some(t) = self.tol {
            config.tol = t;
        }
        if let Some(m) = self.max_sweeps {
            config.max_sweeps = m;
        }
        if let Some(r) = self.rule {
            config.rule = r.into();
        }
        if let Some(b) = self.backend {
            config.backend = b.into();
        }
        config.init_tau_y = self.init_tau_y.or(config.init_tau_y);
        config.init_tau_u = self.init_tau_u.or(config.init_tau_u);
        config
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Adjacency matrix (.mtx) or edge list CSV.
    #[arg(long)]
    pub adjacency: PathBuf,
    /// Design matrix CSV.
    #[arg(long)]
    pub design: PathBuf,
    /// Response CSV.
    #[arg(long)]
    pub response: PathBuf,
    /// Estimator.
    #[arg(long, value_enum, default_value = "vreml")]
    pub method: MethodArg,
    #[command(flatten)]
    pub ascent: AscentArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Lattice side; n = n0^2 areas.
    #[arg(long)]
    pub n0: usize,
    /// Number of replications.
    #[arg(long)]
    pub nsim: usize,
    /// Master seed.
    #[arg(long)]
    pub seed: u64,
    /// Comma-separated estimators.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "vreml")]
    pub methods: Vec<MethodArg>,
    /// Fixed effects (intercept, x coordinate, y coordinate).
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "1.0,1.2,-1.0"
    )]
    pub beta: Vec<f64>,
    /// Noise variance.
    #[arg(long, default_value_t = 0.7)]
    pub sigma_eps_sq: f64,
    /// Spatial variance.
    #[arg(long, default_value_t = 1.3)]
    pub sigma_u_sq: f64,
    /// Lattice neighbourhood.
    #[arg(long, value_enum, default_value = "rook")]
    pub contiguity: ContiguityArg,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write the data of replication K (repeatable).
    #[arg(long = "export", value_name = "K")]
    pub export: Vec<usize>,
    #[command(flatten)]
    pub ascent: AscentArgs,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("size").required(true).args(["grid", "cell_width"]))]
pub struct IngestArgs {
    /// Cell table CSV.
    #[arg(long)]
    pub cells: PathBuf,
    /// Grid cells per side (N) or columns x rows (NxM).
    #[arg(long)]
    pub grid: Option<String>,
    /// Square grid cell width in coordinate units.
    #[arg(long)]
    pub cell_width: Option<f64>,
    /// Region xmin,xmax,ymin,ymax; rows outside are dropped.
    #[arg(long, allow_hyphen_values = true, value_name = "XMIN,XMAX,YMIN,YMAX")]
    pub bounds: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Areas per instance.
    #[arg(long, default_value_t = 36)]
    pub n: usize,
    /// Random instances.
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Run against a deliberately broken fit.
    #[arg(long, value_enum)]
    pub sabotage: Option<SabotageArg>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

/// A failed command: exit code plus a one-line diagnostic.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT_ERROR,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NotConverged { .. } => EXIT_NOT_CONVERGED,
            _ => EXIT_INPUT_ERROR,
        };
        let mut message = e.to_string();
        match e {
            Error::DegenerateDenominator { .. } => {
                message.push_str(" (A-3: the response must not lie in the span of the design)")
            }
            Error::DisconnectedGrid { .. } => {
                message.push_str("; hint: increase --cell-width or use a coarser --grid")
            }
            Error::TooFewCells(_) => {
                message.push_str("; hint: use a finer --grid or smaller --cell-width")
            }
            _ => {}
        }
        Self { code, message }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::from(Error::Io(e))
    }
}

type CmdResult = Result<u8, Failure>;

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INPUT_ERROR
            } else {
                EXIT_OK
            };
        }
    };
    run(&cli)
}

pub fn run(cli: &Cli) -> u8 {
    let outcome = match &cli.command {
        Command::Fit(a) => cmd_fit(a, &cli.out),
        Command::Simulate(a) => cmd_simulate(a, &cli.out),
        Command::Ingest(a) => cmd_ingest(a, &cli.out),
        Command::Verify(a) => cmd_verify(a, &cli.out),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub wall_time_seconds: f64,
}

fn digest(path: &Path) -> Result<FileDigest, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Collects output paths so the manifest can digest them.
struct OutDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root).map_err(|e| {
            Failure::input(format!(
                "cannot create output directory {}: {e}",
                root.display()
            ))
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> icar_vreml::Result<()>,
    ) -> Result<(), Failure> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file =
            File::create(&path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush()?;
        self.written.push(path);
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::Io(e.into()))?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn finish(
        self,
        command: &'static str,
        config: Value,
        inputs: &[&Path],
        seed: Option<u64>,
        started: Instant,
    ) -> Result<(), Failure> {
        let manifest = RunManifest {
            command,
            config,
            inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
            outputs: self
                .written
                .iter()
                .map(|p| digest(p))
                .collect::<Result<_, _>>()?,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            wall_time_seconds: started.elapsed().as_secs_f64(),
        };
        let mut out = OutDir {
            root: self.root,
            written: Vec::new(),
        };
        out.write_json("manifest.json", &manifest)
    }
}

fn fit_config_json(c: &FitConfig) -> Value {
    json!({
        "tol": c.tol,
        "max_sweeps": c.max_sweeps,
        "rule": format!("{:?}", c.rule).to_lowercase(),
        "backend": format!("{:?}", c.backend).to_lowercase(),
        "init_tau_y": c.init_tau_y,
        "init_tau_u": c.init_tau_u,
    })
}

fn read_adjacency(path: &Path, n: usize) -> icar_vreml::Result<AdjacencyGraph> {
    let head = {
        let mut buf = [0u8; 14];
        let mut f = vio_open(path)?;
        let read = std::io::Read::read(&mut f, &mut buf)?;
        buf[..read].to_vec()
    };
    if head.starts_with(b"%%MatrixMarket") {
        vio::read_matrix_market_file(path)
    } else {
        vio::read_edge_list_file(path, n)
    }
}

fn vio_open(path: &Path) -> icar_vreml::Result<File> {
    File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

struct FitOutcome {
    tau_y: f64,
    tau_u: f64,
    mu: nalgebra::DVector<f64>,
    beta: nalgebra::DVector<f64>,
    fitted: nalgebra::DVector<f64>,
    objective: Value,
    convergence: Value,
    residuals: Option<FixedPointResiduals>,
    trace: Vec<f64>,
    converged: bool,
}

fn from_report(report: &FitReport, config: &FitConfig) -> FitOutcome {
    FitOutcome {
        tau_y: report.tau_y(),
        tau_u: report.tau_u(),
        mu: report.state.mu().clone(),
        beta: report.beta_hat.clone(),
        fitted: report.fitted.clone(),
        objective: json!({ "kind": "elbo", "value": report.elbo() }),
        convergence: json!({
            "converged": report.converged,
            "sweeps": report.sweeps,
            "rule": format!("{:?}", config.rule).to_lowercase(),
            "tol": config.tol,
            "max_sweeps": config.max_sweeps,
            "backend": format!("{:?}", config.backend).to_lowercase(),
            "initial_tau_y": report.initial_tau_y,
            "initial_tau_u": report.initial_tau_u,
        }),
        residuals: Some(report.residuals),
        trace: report.state.elbo_trace().to_vec(),
        converged: report.converged,
    }
}

fn fit_exact(problem: &Problem<'_>, method: OracleMethod) -> Result<FitOutcome, Failure> {
    let model = problem.model();
    let est: OracleEstimates = oracle::maximize(method, model, problem.icar())?;
    let converged = est.diagnostics.gradient_norm <= GRADIENT_TOLERANCE;
    let (mu, sigma) = match problem.update_q(est.tau_y_hat, est.tau_u_hat) {
        Ok(q) => q,
        Err(_) if !converged => {
            return Err(Failure {
                code: EXIT_NOT_CONVERGED,
                message: format!(
                    "{} maximum lies on the boundary (tau_y = {:.3e}, tau_u = {:.3e}, scaled gradient {:.1e}); no interior estimate",
                    method.name(),
                    est.tau_y_hat,
                    est.tau_u_hat,
                    est.diagnostics.gradient_norm
                ),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let beta = model.recover_beta(&mu)?;
    let fitted = model.fitted(&beta, &mu);
    let residuals = match method {
        OracleMethod::ExactReml => {
            let state = VariationalState::new(mu.clone(), sigma, est.tau_y_hat, est.tau_u_hat)?;
            Some(problem.residuals(&state)?)
        }
        OracleMethod::ExactMle => None,
    };
    Ok(FitOutcome {
        tau_y: est.tau_y_hat,
        tau_u: est.tau_u_hat,
        mu,
        beta,
        fitted,
        objective: json!({
            "kind": match method {
                OracleMethod::ExactReml => "restricted_loglik",
                OracleMethod::ExactMle => "profile_loglik",
            },
            "value": est.objective_value,
        }),
        convergence: json!({
            "converged": converged,
            "evaluations": est.diagnostics.evaluations,
            "gradient_norm": est.diagnostics.gradient_norm,
            "gradient_tol": GRADIENT_TOLERANCE,
            "restarts": est.diagnostics.restarts,
        }),
        residuals,
        trace: Vec::new(),
        converged,
    })
}

fn load_fit_inputs(args: &FitArgs) -> icar_vreml::Result<(Vec<String>, ModelData, AdjacencyGraph)> {
    let y = vio::read_response_file(&args.response)?;
    let (names, x) = vio::read_design_file(&args.design)?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "design rows vs response length",
            expected: y.len(),
            got: x.nrows(),
        });
    }
    let graph = read_adjacency(&args.adjacency, y.len())?;
    if graph.n() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "adjacency size vs response length",
            expected: y.len(),
            got: graph.n(),
        });
    }
    Ok((names, load_model(y, x)?, graph))
}

/// `vreml fit`.
pub fn cmd_fit(args: &FitArgs, out: &Path) -> CmdResult {
    let started = Instant::now();
    let config = args.ascent.apply(FitConfig::default());
    config.validate()?;
    let (names, model, graph) = load_fit_inputs(args)?;
    let icar = build_icar(&graph)?;
    let problem = Problem::new(&model, &icar)?;

    let method: Method = args.method.into();
    let outcome = match method {
        Method::Vreml => match problem.fit(&config) {
            Ok(report) => from_report(&report, &config),
            Err(Error::NotConverged { report }) => from_report(&report, &config),
            Err(e) => return Err(e.into()),
        },
        Method::ExactReml => fit_exact(&problem, OracleMethod::ExactReml)?,
        Method::ExactMle => fit_exact(&problem, OracleMethod::ExactMle)?,
    };

    let fit = json!({
        "schema_version": FIT_SCHEMA_VERSION,
        "method": method.name(),
        "n": model.n(),
        "p": model.p(),
        "tau_y": outcome.tau_y,
        "tau_u": outcome.tau_u,
        "sigma_eps_sq": 1.0 / outcome.tau_y,
        "sigma_u_sq": 1.0 / outcome.tau_u,
        "beta": names
            .iter()
            .zip(outcome.beta.iter())
            .map(|(name, b)| json!({ "name": name, "estimate": b }))
            .collect::<Vec<_>>(),
        "objective": outcome.objective,
        "convergence": outcome.convergence,
        "fixed_point_residuals": outcome.residuals.map(|r| json!({
            "mu": r.mu, "sigma": r.sigma, "tau_y": r.tau_y, "tau_u": r.tau_u,
        })),
        "elbo_trace": outcome.trace,
    });

    let mut dir = OutDir::create(out)?;
    dir.write_json("fit.json", &fit)?;
    dir.write("effects.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["node", "mu", "fitted"])?;
        for (i, (m, f)) in outcome.mu.iter().zip(outcome.fitted.iter()).enumerate() {
            csv.write_record([i.to_string(), vio::format_float(*m), vio::format_float(*f)])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let config_json = json!({
        "method": method.name(),
        "adjacency": args.adjacency.display().to_string(),
        "design": args.design.display().to_string(),
        "response": args.response.display().to_string(),
        "fit": fit_config_json(&config),
    });
    dir.finish(
        "fit",
        config_json,
        &[&args.adjacency, &args.design, &args.response],
        None,
        started,
    )?;

    if outcome.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "warning: {} did not converge; results written to {}",
            method.name(),
            out.display()
        );
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn simulation_config(args: &SimulateArgs) -> SimConfig {
    let mut methods: Vec<Method> = Vec::new();
    for m in &args.methods {
        let m: Method = (*m).into();
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    SimConfig {
        n0: args.n0,
        n_sim: args.nsim,
        beta: args.beta.clone(),
        sigma_eps_sq: args.sigma_eps_sq,
        sigma_u_sq: args.sigma_u_sq,
        seed: args.seed,
        methods,
        contiguity: args.contiguity.into(),
        fit: args.ascent.apply(SimConfig::default_fit()),
        threads: args.threads,
    }
}

/// `vreml simulate`.
pub fn cmd_simulate(args: &SimulateArgs, out: &Path) -> CmdResult {
    let started = Instant::now();
    let config = simulation_config(args);
    config.validate()?;
    config.fit.validate()?;
    if let Some(&k) = args.export.iter().find(|&&k| k >= config.n_sim) {
        return Err(Failure::input(format!(
            "--export {k} is out of range for --nsim {}",
            config.n_sim
        )));
    }
    let result = simulate::run_study(&config)?;

    let mut dir = OutDir::create(out)?;
    dir.write("raw.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for row in &result.rows {
            csv.serialize(row)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    dir.write("aggregate.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for s in &result.summaries {
            csv.serialize(s)?;
        }
        csv.flush()?;
        Ok(())
    })?;

    if !args.export.is_empty() {
        let design = SimDesign::new(&config)?;
        let mut exports = args.export.clone();
        exports.sort_unstable();
        exports.dedup();
        for k in exports {
            let (model, u) = design.generate(&config, k)?;
            let prefix = format!("replication-{k}");
            dir.write(&format!("{prefix}/adjacency.mtx"), |w| {
                vio::write_matrix_market(design.icar().graph(), w)
            })?;
            dir.write(&format!("{prefix}/design.csv"), |w| {
                vio::write_design(&["intercept", "coord_x", "coord_y"], model.x(), w)
            })?;
            dir.write(&format!("{prefix}/response.csv"), |w| {
                vio::write_response(model.y(), w)
            })?;
            dir.write(&format!("{prefix}/u.csv"), |w| {
                let mut csv = csv::Writer::from_writer(w);
                csv.write_record(["u"])?;
                for v in u.iter() {
                    csv.write_record([vio::format_float(*v)])?;
                }
                csv.flush()?;
                Ok(())
            })?;
        }
    }

    let failed: usize = result.summaries.iter().map(|s| s.failed).sum();
    if failed > 0 {
        eprintln!("warning: {failed} replication fits failed; see the error column of raw.csv");
    }
    let mut config_json =
        serde_json::to_value(&config).map_err(|e| Failure::input(e.to_string()))?;
    config_json["fit"] = fit_config_json(&config.fit);
    config_json["export"] = json!(args.export);
    dir.finish("simulate", config_json, &[], Some(config.seed), started)?;
    Ok(EXIT_OK)
}

fn grid_spec(args: &IngestArgs) -> Result<GridSpec, Failure> {
    let size = match (&args.grid, args.cell_width) {
        (Some(g), None) => GridSize::parse(g)?,
        (None, Some(w)) => {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Failure::input(format!(
                    "--cell-width must be positive, got {w}"
                )));
            }
            GridSize::Width(w)
        }
        _ => {
            return Err(Failure::input(
                "exactly one of --grid and --cell-width is required",
            ))
        }
    };
    let bounds = match &args.bounds {
        None => None,
        Some(text) => {
            let b: Vec<f64> = text
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .ok()
                .filter(|v: &Vec<f64>| v.len() == 4 && v.iter().all(|x| x.is_finite()))
                .ok_or_else(|| {
                    Failure::input(format!(
                        "--bounds '{text}' is not four comma-separated numbers"
                    ))
                })?;
            let b = Bounds {
                x_min: b[0],
                x_max: b[1],
                y_min: b[2],
                y_max: b[3],
            };
            if !(b.x_min < b.x_max && b.y_min < b.y_max) {
                return Err(Failure::input(
                    "--bounds must satisfy xmin < xmax and ymin < ymax",
                ));
            }
            Some(b)
        }
    };
    Ok(GridSpec { size, bounds })
}

/// `vreml ingest`.
pub fn cmd_ingest(args: &IngestArgs, out: &Path) -> CmdResult {
    let started = Instant::now();
    let spec = grid_spec(args)?;
    let table = vio::read_cells_file(&args.cells)?;
    let data = ingest::bin_cells(&table, &spec)?;
    let (model, graph) = ingest::dataset_to_model(&data)?;

    let mut dir = OutDir::create(out)?;
    dir.write("response.csv", |w| vio::write_response(model.y(), w))?;
    dir.write("design.csv", |w| {
        vio::write_design(&COVARIATES, model.x(), w)
    })?;
    dir.write("adjacency.mtx", |w| vio::write_matrix_market(&graph, w))?;
    dir.write("cells.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for c in &data.cells {
            csv.serialize(c)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let summary = json!({
        "cells": data.cells.len(),
        "input_rows": table.len(),
        "dropped_rows": data.dropped_rows,
        "edges": graph.num_edges(),
        "components": graph.component_sizes().len(),
        "geometry": data.geometry,
        "covariates": COVARIATES,
    });
    dir.write_json("summary.json", &summary)?;
    let config_json = json!({
        "cells": args.cells.display().to_string(),
        "grid": spec,
    });
    dir.finish("ingest", config_json, &[&args.cells], None, started)?;
    println!(
        "{} occupied grid cells from {} rows ({} dropped), {} edges",
        data.cells.len(),
        table.len(),
        data.dropped_rows,
        graph.num_edges()
    );
    Ok(EXIT_OK)
}

/// `vreml verify`.
pub fn cmd_verify(args: &VerifyArgs, out: &Path) -> CmdResult {
    let started = Instant::now();
    let mut config = VerifyConfig {
        n: args.n,
        trials: args.trials,
        seed: args.seed,
        ..VerifyConfig::default()
    };
    config.fit.fault = args.sabotage.map(Fault::from);
    config.validate()?;

    let report = match args.threads {
        None => verify::run_suite(&config)?,
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Failure::input(format!("--threads: {e}")))?
            .install(|| verify::run_suite(&config))?,
    };

    let width = report
        .checks
        .iter()
        .map(|c| c.property.len())
        .max()
        .unwrap_or(8);
    println!(
        "{:<width$}  {:>9}  {:>10}  {:>6}  result",
        "property", "tolerance", "worst", "evals"
    );
    for c in &report.checks {
        println!(
            "{:<width$}  {:>9.0e}  {:>10.3e}  {:>6}  {}",
            c.property,
            c.tolerance,
            c.worst,
            c.evaluations,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "fits: {} converged, {} stopped at the sweep limit (boundary maxima; stationarity not assessed)",
        report.converged_fits, report.unconverged_fits
    );

    let mut dir = OutDir::create(out)?;
    dir.write("verify.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for c in &report.checks {
            csv.serialize(c)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let config_json = json!({
        "n": config.n,
        "trials": config.trials,
        "seed": config.seed,
        "tau_pairs": config.tau_pairs,
        "random_states": config.random_states,
        "sabotage": args.sabotage,
        "fit": fit_config_json(&config.fit),
    });
    dir.finish("verify", config_json, &[], Some(config.seed), started)?;

    if report.all_passed() {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_PROPERTY_FAILURE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn invalid_config_maps_to_two() {
        let f = Failure::from(Error::InvalidConfig("x".into()));
        assert_eq!(f.code, EXIT_INPUT_ERROR);
    }

    #[test]
    fn disconnected_grid_gets_hint() {
        let f = Failure::from(Error::DisconnectedGrid { sizes: vec![3, 1] });
        assert_eq!(f.code, EXIT_INPUT_ERROR);
        assert!(f.message.contains("increase --cell-width"));
    }

    #[test]
    fn method_list_parses() {
        let cli = Cli::try_parse_from([
            "vreml",
            "simulate",
            "--n0",
            "5",
            "--nsim",
            "2",
            "--seed",
            "1",
            "--methods",
            "vreml,exact-reml",
        ])
        .unwrap();
        let Command::Simulate(a) = cli.command else {
            panic!()
        };
        let c = simulation_config(&a);
        assert_eq!(c.methods, vec![Method::Vreml, Method::ExactReml]);
        assert_eq!(c.beta, vec![1.0, 1.2, -1.0]);
    }
}
