//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use icar_vreml::oracle::{
    exact_posterior, restricted_loglik_with, OracleMethod, GRADIENT_TOLERANCE,
};
use icar_vreml::simulate::{run_study, Method, SimConfig, SimDesign};
use icar_vreml::spectral::IcarSpectrum;
use icar_vreml::subspace::{ConstrainedOperator, SumToZeroBasis};
use icar_vreml::verify::{random_instance, run_suite, worst_decrease, VerifyConfig};
use icar_vreml::vreml::{ConvergenceRule, FitConfig, Problem, VariationalState};
use icar_vreml::{oracle, Error};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn scaled(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

fn log_uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn strict_fit() -> FitConfig {
    FitConfig {
        tol: 1e-10,
        max_sweeps: 200_000,
        rule: ConvergenceRule::Parameters,
        ..FitConfig::default()
    }
}

/// ELBO at the dense posterior vs the covariance-route restricted likelihood.
fn exactness() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut evaluations = 0;
    for trial in 0..25 {
        let inst = random_instance(25, 101, trial).unwrap();
        let problem = Problem::new(&inst.model, &inst.icar).unwrap();
        let spectrum = IcarSpectrum::new(&inst.icar).unwrap();
        let marginal = spectrum.marginal(&inst.model).unwrap();
        let basis = SumToZeroBasis::helmert(25).unwrap();
        for _ in 0..5 {
            let ty = log_uniform(&mut rng, 0.05, 20.0);
            let tu = log_uniform(&mut rng, 0.05, 20.0);
            let post = exact_posterior(ty, tu, &inst.model, &inst.icar).unwrap();
            let reduced = basis.congruence(&post.sigma).try_inverse().unwrap();
            let sigma = ConstrainedOperator::from_reduced(reduced, basis.clone()).unwrap();
            let state = VariationalState::new(post.mu, sigma, ty, tu).unwrap();
            let elbo = problem.elbo(&state).unwrap();
            worst = worst.max(scaled(elbo, marginal.reml(ty, tu))).max(scaled(
                elbo,
                restricted_loglik_with(&problem, ty, tu).unwrap(),
            ));
            evaluations += 1;
        }
    }
    outcome(
        worst <= 1e-8,
        format!("{evaluations} (instance, tau) pairs, worst scaled gap {worst:.2e}"),
    )
}

/// VREML maximizer vs the exact-REML oracle on interior draws of the
/// simulation model.
fn estimator_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut skipped = 0;
    for (n0, wanted) in [(5, 3), (7, 3), (10, 4)] {
        let config = SimConfig {
            n0,
            seed: 7,
            ..SimConfig::default()
        };
        let design = SimDesign::new(&config).unwrap();
        let spectrum = IcarSpectrum::new(design.icar()).unwrap();
        let mut found = 0;
        for rep in 0.. {
            if found == wanted {
                break;
            }
            let (model, _) = design.generate(&config, rep).unwrap();
            let start = oracle::moment_start(&model).unwrap();
            let est = spectrum
                .marginal(&model)
                .unwrap()
                .maximize(OracleMethod::ExactReml, start)
                .unwrap();
            let interior = est.diagnostics.gradient_norm <= GRADIENT_TOLERANCE
                && est.tau_y_hat < 1e3 * start.0
                && est.tau_u_hat < 1e3 * start.1;
            if !interior {
                skipped += 1;
                continue;
            }
            let problem = Problem::new(&model, design.icar()).unwrap();
            let report = match problem.fit(&strict_fit()) {
                Ok(r) => r,
                Err(e) => {
                    return outcome(false, format!("n = {}, replication {rep}: {e}", n0 * n0))
                }
            };
            worst = worst
                .max((report.tau_y() - est.tau_y_hat).abs() / est.tau_y_hat)
                .max((report.tau_u() - est.tau_u_hat).abs() / est.tau_u_hat);
            found += 1;
            compared += 1;
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{compared} instances (n = 25, 49, 100), worst relative gap {worst:.2e}; {skipped} boundary draws skipped"),
    )
}

/// Criteria 3 and 4 share the same 100 fits.
fn monotonicity_and_stationarity() -> (Outcome, Outcome) {
    let config = FitConfig {
        max_sweeps: 20_000,
        ..strict_fit()
    };
    let mut worst_drop: f64 = 0.0;
    let mut violations = 0;
    let mut worst_residual: f64 = 0.0;
    let mut converged = 0;
    let mut boundary = 0;
    let mut failures = Vec::new();
    for trial in 0..100 {
        let inst = random_instance(36, 303, trial).unwrap();
        let report = match icar_vreml::vreml::fit(&inst.model, &inst.icar, &config) {
            Ok(r) => {
                converged += 1;
                worst_residual = worst_residual.max(r.residuals.max());
                r
            }
            Err(Error::NotConverged { report }) => {
                boundary += 1;
                *report
            }
            Err(e) => {
                failures.push(format!("trial {trial}: {e}"));
                continue;
            }
        };
        let drop = worst_decrease(report.state.elbo_trace());
        if drop > 1e-9 {
            violations += 1;
        }
        worst_drop = worst_drop.max(drop);
    }
    let ok = failures.is_empty();
    (
        outcome(
            ok && violations == 0,
            format!("100 fits, {violations} violations, worst scaled drop {worst_drop:.2e}{}", failures.join("; ")),
        ),
        outcome(
            ok && worst_residual <= 1e-6,
            format!(
                "{converged} converged fits, worst scaled residual {worst_residual:.2e}; {boundary} boundary fits still drifting at 20000 sweeps"
            ),
        ),
    )
}

fn gradients() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let inst = random_instance(25, 505, k).unwrap();
        let problem = Problem::new(&inst.model, &inst.icar).unwrap();
        let basis = problem.basis().clone();
        let ty = log_uniform(&mut rng, 0.1, 10.0);
        let tu = log_uniform(&mut rng, 0.1, 10.0);
        let (_, sigma) = problem
            .update_q(
                log_uniform(&mut rng, 0.1, 10.0),
                log_uniform(&mut rng, 0.1, 10.0),
            )
            .unwrap();
        let mu = basis.extend(&DVector::from_fn(24, |_, _| rng.random_range(-1.0..1.0)));
        let at = |ty: f64, tu: f64, mu: &DVector<f64>| {
            problem
                .elbo(&VariationalState::new(mu.clone(), sigma.clone(), ty, tu).unwrap())
                .unwrap()
        };
        let g = problem
            .gradients(&VariationalState::new(mu.clone(), sigma.clone(), ty, tu).unwrap())
            .unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        let h = 1e-6 * ty;
        worst = worst.max(rel(
            g.tau_y,
            (at(ty + h, tu, &mu) - at(ty - h, tu, &mu)) / (2.0 * h),
        ));
        let h = 1e-6 * tu;
        worst = worst.max(rel(
            g.tau_u,
            (at(ty, tu + h, &mu) - at(ty, tu - h, &mu)) / (2.0 * h),
        ));
        let d = basis.extend(&DVector::from_fn(24, |_, _| rng.random_range(-1.0..1.0)));
        let d = &d / d.norm();
        let h = 1e-6 * (1.0 + mu.norm());
        let fd = (at(ty, tu, &(&mu + &d * h)) - at(ty, tu, &(&mu - &d * h))) / (2.0 * h);
        worst = worst.max(rel(g.mu.dot(&d), fd));
    }
    outcome(
        worst <= 1e-4,
        format!("20 random states, worst relative gap {worst:.2e}"),
    )
}

fn jensen() -> Outcome {
    let report = run_suite(&VerifyConfig::default()).unwrap();
    let row = report.check("ELBO <= restricted loglik").unwrap();
    let failing: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.property)
        .collect();
    outcome(
        row.passed && failing.is_empty(),
        format!(
            "verify suite (n = 36, 25 trials): {} states, worst ELBO - loglik {:.2e}; failing rows: {failing:?}",
            row.evaluations, row.worst
        ),
    )
}

fn simulation_trend() -> Outcome {
    let study = |n0| {
        let config = SimConfig {
            n0,
            n_sim: 200,
            seed: 42,
            ..SimConfig::default()
        };
        run_study(&config)
            .unwrap()
            .summary(Method::Vreml)
            .unwrap()
            .clone()
    };
    let small = study(7);
    let large = study(15);
    let failed = small.failed + large.failed;
    outcome(
        large.rmse_sigma_u_sq < small.rmse_sigma_u_sq
            && large.rmse_sigma_eps_sq < small.rmse_sigma_eps_sq
            && failed == 0,
        format!(
            "RMSE(sigma_u^2) {:.3} -> {:.3}, RMSE(sigma_eps^2) {:.3} -> {:.3} (n0 7 -> 15), {failed} failed fits",
            small.rmse_sigma_u_sq, large.rmse_sigma_u_sq, small.rmse_sigma_eps_sq, large.rmse_sigma_eps_sq
        ),
    )
}

fn posterior_identity() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for (k, n) in [16, 25, 36, 49, 50].into_iter().enumerate() {
        for trial in 0..2 {
            let inst = random_instance(n, 808 + k as u64, trial).unwrap();
            let problem = Problem::new(&inst.model, &inst.icar).unwrap();
            let ty = log_uniform(&mut rng, 0.1, 10.0);
            let tu = log_uniform(&mut rng, 0.1, 10.0);
            let (mu, sigma) = problem.update_q(ty, tu).unwrap();
            let post = exact_posterior(ty, tu, &inst.model, &inst.icar).unwrap();
            worst = worst
                .max((mu - &post.mu).norm())
                .max((sigma.covariance() - &post.sigma).norm());
        }
    }
    outcome(
        worst <= 1e-8,
        format!("10 instances n <= 50, worst norm gap {worst:.2e}"),
    )
}

fn vreml() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vreml"));
    c.env_remove("VREML_OUT");
    c
}

fn run(args: &[&str]) -> (i32, String) {
    let out = vreml().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            headers
                .iter()
                .zip(rec.unwrap().iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

/// Point data whose grid-level log1p(mean count) follows the simulation model.
fn write_cells(path: &Path) -> usize {
    let config = SimConfig {
        n0: 10,
        seed: 99,
        ..SimConfig::default()
    };
    let (model, _, _) = icar_vreml::simulate::generate(&config, 0).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["x", "y", "count", "library_size"]).unwrap();
    let mut rows = 0;
    // Lattice node i*10 + j sits at row i, column j of a 10 x 10 grid on [0, 10]^2.
    while rows < 10_000 {
        let k = if rows < 100 {
            rows
        } else {
            rng.random_range(0..100)
        };
        let (i, j) = (k / 10, k % 10);
        let x = j as f64 + rng.random_range(0.01..0.99);
        let y = i as f64 + rng.random_range(0.01..0.99);
        let count = (model.y()[k] + 6.0).exp_m1();
        let library = rng.random_range(100..1000) as f64;
        w.write_record([
            x.to_string(),
            y.to_string(),
            count.to_string(),
            library.to_string(),
        ])
        .unwrap();
        rows += 1;
    }
    w.flush().unwrap();
    rows
}

fn ingestion(dir: &Path) -> Outcome {
    let cells = dir.join("cells.csv");
    let rows = write_cells(&cells);
    let out = dir.join("ingested");
    let (code, err) = run(&[
        "--out",
        out.to_str().unwrap(),
        "ingest",
        "--cells",
        cells.to_str().unwrap(),
        "--grid",
        "10",
        "--bounds",
        "0,10,0,10",
    ]);
    if code != 0 {
        return outcome(false, format!("ingest exit {code}: {err}"));
    }

    // Independent group-by on the raw table.
    #[derive(Default)]
    struct Acc {
        n: usize,
        count: Vec<f64>,
        library: Vec<f64>,
    }
    let mut groups: BTreeMap<(usize, usize), Acc> = BTreeMap::new();
    for rec in read_csv(&cells) {
        let x: f64 = rec["x"].parse().unwrap();
        let y: f64 = rec["y"].parse().unwrap();
        let key = ((y.floor() as usize).min(9), (x.floor() as usize).min(9));
        let acc = groups.entry(key).or_default();
        acc.n += 1;
        acc.count.push(rec["count"].parse().unwrap());
        acc.library.push(rec["library_size"].parse().unwrap());
    }
    let mean = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    let produced = read_csv(&out.join("cells.csv"));
    let mut worst: f64 = 0.0;
    let mut mismatched = produced.len() != groups.len();
    for cell in &produced {
        let key = (
            cell["row"].parse().unwrap(),
            cell["column"].parse().unwrap(),
        );
        let Some(acc) = groups.get_mut(&key) else {
            mismatched = true;
            continue;
        };
        mismatched |= acc.n != cell["points"].parse::<usize>().unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        worst = worst
            .max(rel(
                cell["mean_count"].parse().unwrap(),
                mean(&mut acc.count),
            ))
            .max(rel(
                cell["mean_library_size"].parse().unwrap(),
                mean(&mut acc.library),
            ));
    }
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    mismatched |= summary["input_rows"] != rows || summary["cells"] != groups.len();

    let fitted = dir.join("ingested-fit");
    let (code, err) = run(&[
        "--out",
        fitted.to_str().unwrap(),
        "fit",
        "--adjacency",
        out.join("adjacency.mtx").to_str().unwrap(),
        "--design",
        out.join("design.csv").to_str().unwrap(),
        "--response",
        out.join("response.csv").to_str().unwrap(),
    ]);
    let fit: Value =
        serde_json::from_str(&fs::read_to_string(fitted.join("fit.json")).unwrap_or_default())
            .unwrap_or(Value::Null);
    let converged = code == 0 && fit["convergence"]["converged"] == true;
    outcome(
        worst <= 1e-12 && !mismatched && converged,
        format!(
            "{rows} rows -> {} cells, worst group-by gap {worst:.1e}, counts {}; fit exit {code}{} after {} sweeps",
            groups.len(),
            if mismatched { "MISMATCH" } else { "match" },
            if err.is_empty() { String::new() } else { format!(" ({})", err.trim()) },
            fit["convergence"]["sweeps"]
        ),
    )
}

fn manifest_without_time(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_seconds");
    v
}

fn determinism(dir: &Path) -> Outcome {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lattice5");
    let mut problems = Vec::new();
    let snapshot = |out: &Path, files: &[&str]| -> Vec<Vec<u8>> {
        files
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap_or_default())
            .collect()
    };

    let sim = |threads: &str, out: &PathBuf| {
        run(&[
            "--out",
            out.to_str().unwrap(),
            "simulate",
            "--n0",
            "6",
            "--nsim",
            "8",
            "--seed",
            "11",
            "--methods",
            "vreml,exact-reml,exact-mle",
            "--threads",
            threads,
        ])
    };
    let files = ["raw.csv", "aggregate.csv"];
    let out = dir.join("sim");
    let mut first = None;
    let mut manifests = Vec::new();
    for threads in ["1", "4", "4"] {
        let (code, err) = sim(threads, &out);
        if code != 0 {
            problems.push(format!("simulate exit {code}: {err}"));
        }
        let bytes = snapshot(&out, &files);
        match &first {
            None => first = Some(bytes),
            Some(f) if *f != bytes => {
                problems.push(format!("simulate bytes differ with --threads {threads}"))
            }
            _ => {}
        }
        if threads == "4" {
            manifests.push(manifest_without_time(&out.join("manifest.json")));
        }
    }
    if manifests[0] != manifests[1] {
        problems.push("simulate manifests differ beyond wall time".into());
    }

    let out = dir.join("fit");
    let files = ["fit.json", "effects.csv"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let (code, err) = run(&[
            "--out",
            out.to_str().unwrap(),
            "fit",
            "--adjacency",
            fixture.join("adjacency.mtx").to_str().unwrap(),
            "--design",
            fixture.join("design.csv").to_str().unwrap(),
            "--response",
            fixture.join("response.csv").to_str().unwrap(),
        ]);
        if code != 0 {
            problems.push(format!("fit exit {code}: {err}"));
        }
        runs.push((
            snapshot(&out, &files),
            manifest_without_time(&out.join("manifest.json")),
        ));
    }
    if runs[0] != runs[1] {
        problems.push("fit outputs differ".into());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "simulate (1 and 4 threads) and fit outputs byte-identical across runs".into()
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let mut timed = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let elapsed = t.elapsed();
        println!(
            "criterion {id:>2} {:<24} {}  {} [{:.1}s]",
            name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
        results.push((id, name, o, elapsed));
    };
    timed(1, "exactness", &mut exactness);
    timed(2, "estimator equivalence", &mut estimator_equivalence);
    let mut shared = None;
    timed(3, "monotonicity", &mut || {
        let (c3, c4) = monotonicity_and_stationarity();
        shared = Some(c4);
        c3
    });
    timed(4, "stationarity", &mut || shared.take().unwrap());
    timed(5, "gradients", &mut gradients);
    timed(6, "Jensen bound", &mut jensen);
    timed(7, "simulation trend", &mut simulation_trend);
    timed(8, "posterior identity", &mut posterior_identity);
    timed(9, "ingestion", &mut || ingestion(dir.path()));
    timed(10, "determinism", &mut || determinism(dir.path()));

    let limits = [(1, 10.0), (2, 60.0), (7, 600.0)];
    let mut failed = 0;
    for (id, name, o, elapsed) in &results {
        let limit = limits.iter().find(|(i, _)| i == id).map(|&(_, l)| l);
        let slow = limit.is_some_and(|l| elapsed.as_secs_f64() > l);
        if slow {
            println!(
                "criterion {id:>2} {name:<24} FAIL  runtime {:.1}s over the {}s budget",
                elapsed.as_secs_f64(),
                limit.unwrap()
            );
        }
        if !o.passed || slow {
            failed += 1;
        }
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
