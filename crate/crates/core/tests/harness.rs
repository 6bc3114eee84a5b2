use hdblp::dgp::DgpConfig;
use hdblp::estimators::{Diagnostics, EstimateReport, EstimatorKind};
use hdblp::harness::*;
use hdblp::orthogonal::{ParameterBox, ThetaOne};
use std::path::Path;

fn small_config(reps: usize, estimators: Vec<EstimatorKind>) -> StudyConfig {
    StudyConfig {
        replications: reps,
        estimators,
        dgp: DgpConfig {
            markets: 24,
            dim_x: 30,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn report(kind: EstimatorKind, est: [f64; 2], se: [f64; 2]) -> EstimateReport {
    EstimateReport {
        estimator: kind,
        theta: ThetaOne::new(est[0], est[1], ParameterBox::default()).unwrap(),
        se,
        vcov: [[se[0] * se[0], 0.0], [0.0, se[1] * se[1]]],
        tstats: None,
        pvalues: None,
        diagnostics: Diagnostics {
            objective: 0.0,
            evaluations: 0,
            instruments: 4,
            markets: 50,
            lambdas: Vec::new(),
        },
    }
}

fn record(r: usize, outcomes: Vec<(EstimatorKind, Option<([f64; 2], [f64; 2])>)>) -> ReplicationRecord {
    ReplicationRecord {
        replication: r,
        seed: r as u64,
        truth: [1.0, -1.0],
        outcomes: outcomes
            .into_iter()
            .map(|(k, o)| EstimatorOutcome {
                estimator: k,
                report: o.map(|(e, s)| report(k, e, s)),
                error: o.is_none().then(|| "boom".to_string()),
            })
            .collect(),
    }
}

#[test]
fn hand_computed_five_replication_summary() {
    use EstimatorKind::*;
    let sigmas = [1.2, 0.8, 1.1, 0.95, 1.0];
    let mut records: Vec<ReplicationRecord> = sigmas
        .iter()
        .enumerate()
        .map(|(r, &s)| record(r, vec![(NeymanOrthogonal, Some(([s, -1.0], [0.1, 0.5])))]))
        .collect();
    records.push(record(5, vec![(NeymanOrthogonal, None)]));
    let rows = summarize(&records).unwrap();
    assert_eq!(rows.len(), 2);
    let sigma = summary_row(&rows, NeymanOrthogonal, Param::Sigma).unwrap();
    // errors .2 -.2 .1 -.05 0; deviations from 1.01: .19 -.21 .09 -.06 -.01
    assert!((sigma.bias - 0.01).abs() < 1e-12);
    assert!((sigma.sd - (0.092f64 / 5.0).sqrt()).abs() < 1e-12);
    assert!((sigma.rmse - (0.0925f64 / 5.0).sqrt()).abs() < 1e-12);
    // t = 2, -2, 1, -0.5, 0
    assert!((sigma.rej_rate - 0.4).abs() < 1e-12);
    assert_eq!((sigma.n_ok, sigma.n_fail), (5, 1));
    let alpha = summary_row(&rows, NeymanOrthogonal, Param::Alpha).unwrap();
    assert_eq!((alpha.bias, alpha.sd, alpha.rmse, alpha.rej_rate), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn two_point_summary_and_layout() {
    let records: Vec<ReplicationRecord> = [1.1, 0.9]
        .iter()
        .enumerate()
        .map(|(r, &s)| {
            record(
                r,
                EstimatorKind::ALL
                    .iter()
                    .rev()
                    .map(|&k| (k, Some(([s, -1.0], [1.0, 1.0]))))
                    .collect(),
            )
        })
        .collect();
    let rows = summarize(&records).unwrap();
    assert_eq!(rows.len(), 12);
    for (i, kind) in EstimatorKind::ALL.iter().enumerate() {
        assert_eq!(rows[2 * i].estimator, *kind);
        assert_eq!(rows[2 * i].param, Param::Sigma);
        assert_eq!(rows[2 * i + 1].param, Param::Alpha);
        assert!(rows[2 * i].bias.abs() < 1e-15);
        assert!((rows[2 * i].sd - 0.1).abs() < 1e-12);
        assert!((rows[2 * i].rmse - 0.1).abs() < 1e-12);
        assert_eq!(rows[2 * i].rej_rate, 0.0);
    }
    assert!(summarize(&[]).is_err());
}

#[test]
fn single_oracle_replication() {
    let cfg = small_config(1, vec![EstimatorKind::Oracle2]);
    let result = run_study(&cfg).unwrap();
    assert_eq!(result.records.len(), 1);
    let rec = &result.records[0];
    assert_eq!(rec.seed, cfg.base_seed);
    let est = rec.outcomes[0].report.as_ref().unwrap().estimate();
    let rows = summarize(&result.records).unwrap();
    assert_eq!(rows.len(), 2);
    assert!((rows[0].bias - (est[0] - 1.0)).abs() < 1e-15);
    assert!((rows[1].bias - (est[1] + 1.0)).abs() < 1e-15);
    assert_eq!(rows[0].sd, 0.0);
}

#[test]
fn study_is_deterministic_and_thread_invariant() {
    let mut cfg = small_config(3, vec![EstimatorKind::Preliminary, EstimatorKind::NonOrthogonal, EstimatorKind::Oracle2]);
    cfg.threads = Some(1);
    let a = run_study(&cfg).unwrap();
    cfg.threads = Some(3);
    let b = run_study(&cfg).unwrap();
    let bytes = |r: &StudyResult| serde_json::to_string(&r.records).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let c = run_study(&cfg).unwrap();
    assert_eq!(bytes(&b), bytes(&c));
    for (r, rec) in a.records.iter().enumerate() {
        assert_eq!(rec.replication, r);
        assert_eq!(rec.seed, cfg.base_seed ^ r as u64);
    }
    // One replication on its own matches its slot in the study.
    assert_eq!(run_replication(&cfg, 2), a.records[2]);

    let rows = summarize(&a.records).unwrap();
    for row in &rows {
        assert!((row.rmse.powi(2) - row.bias.powi(2) - row.sd.powi(2)).abs() <= 1e-10);
        assert!((0.0..=1.0).contains(&row.rej_rate));
    }
}

#[test]
fn outputs_round_trip() {
    let cfg = small_config(2, vec![EstimatorKind::Preliminary, EstimatorKind::Oracle2]);
    let result = run_study(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_outputs(&result, &[OutputFormat::Csv, OutputFormat::Md, OutputFormat::Json], dir.path()).unwrap();
    let find = |suffix: &str| paths.iter().find(|p| p.to_string_lossy().ends_with(suffix)).cloned().unwrap();
    let stem = output_stem(cfg.base_seed);
    assert!(stem.starts_with(&format!("study_seed{}_", cfg.base_seed)));

    let csv_text = std::fs::read_to_string(find(".summary.csv")).unwrap();
    assert_eq!(csv_text.lines().next().unwrap(), "estimator,param,bias,sd,rmse,rej_rate,n_fail");
    assert_eq!(csv_text.lines().count(), 1 + 4);
    let md = std::fs::read_to_string(find(".summary.md")).unwrap();
    assert!(md.contains("| Preliminary |"));

    let records = read_records_jsonl(&find(".replications.jsonl")).unwrap();
    assert_eq!(records, result.records);
    assert_eq!(summarize(&records).unwrap(), summarize(&result.records).unwrap());

    let config = StudyConfig::load(&find(".config.toml")).unwrap();
    assert_eq!(config, cfg);

    let missing = Path::new("/nonexistent/dir/records.jsonl");
    assert!(read_records_jsonl(missing).is_err());
}

#[test]
fn checked_in_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.toml");
    let cfg = StudyConfig::load(&path).unwrap();
    assert_eq!(cfg, StudyConfig::default());
    assert!(StudyConfig::from_toml_str("replications = 0").is_err());
    assert!(StudyConfig::from_toml_str("no_such_key = 1").is_err());
}
