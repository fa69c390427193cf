use icar_vreml::simulate::{generate, run_study, Method, SimConfig};

#[test]
fn reml_variances_exceed_ml_on_average() {
    let config = SimConfig {
        n0: 5,
        n_sim: 200,
        methods: vec![Method::ExactReml, Method::ExactMle],
        ..SimConfig::default()
    };
    let result = run_study(&config).unwrap();
    let mean = |method: Method, f: fn(&icar_vreml::simulate::ReplicationRow) -> f64| {
        let rows: Vec<f64> = result
            .rows
            .iter()
            .filter(|r| r.method == method && r.ok)
            .map(f)
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    let reml_eps = mean(Method::ExactReml, |r| r.sigma_eps_sq);
    let ml_eps = mean(Method::ExactMle, |r| r.sigma_eps_sq);
    let reml_u = mean(Method::ExactReml, |r| r.sigma_u_sq);
    let ml_u = mean(Method::ExactMle, |r| r.sigma_u_sq);
    assert!(
        reml_eps + reml_u > ml_eps + ml_u,
        "REML {reml_eps} + {reml_u}, ML {ml_eps} + {ml_u}"
    );
}

#[test]
fn metrics_are_nonnegative_and_beat_the_zero_predictor() {
    let config = SimConfig {
        n0: 6,
        n_sim: 30,
        ..SimConfig::default()
    };
    let result = run_study(&config).unwrap();
    assert_eq!(result.rows.len(), 30);
    let mut zero = 0.0;
    let mut fitted = 0.0;
    for row in &result.rows {
        assert!(row.ok, "{}", row.error);
        for v in [
            row.mspe,
            row.mae,
            row.u_mspe,
            row.sq_err_sigma_u_sq,
            row.sq_err_sigma_eps_sq,
        ] {
            assert!(v >= 0.0);
        }
        let (_, _, u) = generate(&config, row.replication).unwrap();
        zero += u.norm_squared() / u.len() as f64;
        fitted += row.u_mspe;
    }
    assert!(zero >= fitted, "{zero} < {fitted}");
}

#[test]
fn studies_are_reproducible() {
    let config = SimConfig {
        n0: 5,
        n_sim: 8,
        methods: Method::ALL.to_vec(),
        ..SimConfig::default()
    };
    let a = run_study(&config).unwrap();
    let b = run_study(&SimConfig {
        threads: Some(3),
        ..config
    })
    .unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}
