//! Monte Carlo study runner, summaries and persistence.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{generate_dataset, DgpConfig};
use crate::error::{HdBlpError, Result};
use crate::estimators::{EstimateReport, EstimationConfig, EstimationSession, EstimatorKind};

/// Critical value for two-sided 5% tests.
pub const CRITICAL_VALUE: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Md,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = HdBlpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Md),
            "json" | "jsonl" => Ok(Self::Json),
            other => Err(HdBlpError::InvalidArgument(format!(
                "unknown format {other:?}; expected csv, md or json"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub replications: usize,
    /// Replication `r` simulates with seed `base_seed ^ r`.
    pub base_seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Worker threads; unset means one per core.
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub formats: Vec<OutputFormat>,
    pub dgp: DgpConfig,
    pub estimation: EstimationConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            replications: 200,
            base_seed: 20240601,
            estimators: EstimatorKind::ALL.to_vec(),
            threads: None,
            output_dir: PathBuf::from("results"),
            formats: vec![OutputFormat::Csv, OutputFormat::Md, OutputFormat::Json],
            dgp: DgpConfig::default(),
            estimation: EstimationConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HdBlpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HdBlpError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| HdBlpError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HdBlpError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(HdBlpError::Config("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(HdBlpError::Config("no estimators selected".into()));
        }
        if self.threads == Some(0) {
            return Err(HdBlpError::Config("threads must be at least 1".into()));
        }
        self.dgp.validate()?;
        self.estimation.validate()?;
        if self.estimation.fold_groups > self.dgp.markets {
            return Err(HdBlpError::Config(format!(
                "{} fold groups exceed {} markets",
                self.estimation.fold_groups, self.dgp.markets
            )));
        }
        Ok(())
    }

    pub fn replication_seed(&self, r: usize) -> u64 {
        self.base_seed ^ r as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutcome {
    pub estimator: EstimatorKind,
    pub report: Option<EstimateReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    /// True `(sigma, alpha)`.
    pub truth: [f64; 2],
    pub outcomes: Vec<EstimatorOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub records: Vec<ReplicationRecord>,
}

/// Simulate one replication and run every configured estimator on it.
pub fn run_replication(cfg: &StudyConfig, r: usize) -> ReplicationRecord {
    let seed = cfg.replication_seed(r);
    let dgp = DgpConfig {
        seed,
        ..cfg.dgp.clone()
    };
    let mut est = cfg.estimation.clone();
    est.nuisance.cv_seed ^= seed;
    let truth = [dgp.sigma, dgp.alpha];
    let fail_all = |msg: String| ReplicationRecord {
        replication: r,
        seed,
        truth,
        outcomes: cfg
            .estimators
            .iter()
            .map(|&k| EstimatorOutcome {
                estimator: k,
                report: None,
                error: Some(msg.clone()),
            })
            .collect(),
    };
    let data = match generate_dataset(&dgp) {
        Ok(d) => d,
        Err(e) => return fail_all(format!("simulation failed: {e}")),
    };
    let quad = match est.quadrature() {
        Ok(q) => q,
        Err(e) => return fail_all(e.to_string()),
    };
    let session = match EstimationSession::new(&data.markets, &quad, &est) {
        Ok(s) => s,
        Err(e) => return fail_all(e.to_string()),
    };
    let outcomes = cfg
        .estimators
        .iter()
        .map(|&k| match session.run(k, data.truth.as_ref()) {
            Ok(mut report) => {
                report.test_against(truth);
                EstimatorOutcome {
                    estimator: k,
                    report: Some(report),
                    error: None,
                }
            }
            Err(e) => {
                log::warn!("replication {r}: {k} failed: {e}");
                EstimatorOutcome {
                    estimator: k,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    ReplicationRecord {
        replication: r,
        seed,
        truth,
        outcomes,
    }
}

/// Run every replication on a pool of `cfg.threads` workers. Results are
/// ordered by replication index and do not depend on the worker count.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| HdBlpError::Config(format!("cannot start worker pool: {e}")))?;
    let records = pool.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                let rec = run_replication(cfg, r);
                log::info!("replication {} of {} done", r + 1, cfg.replications);
                rec
            })
            .collect::<Vec<_>>()
    });
    Ok(StudyResult {
        config: cfg.clone(),
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Param {
    Sigma,
    Alpha,
}

impl Param {
    pub fn name(self) -> &'static str {
        match self {
            Param::Sigma => "sigma",
            Param::Alpha => "alpha",
        }
    }

    fn index(self) -> usize {
        match self {
            Param::Sigma => 0,
            Param::Alpha => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: EstimatorKind,
    pub param: Param,
    pub bias: f64,
    /// Population standard deviation over successful replications.
    pub sd: f64,
    pub rmse: f64,
    pub rej_rate: f64,
    pub n_ok: usize,
    pub n_fail: usize,
}

/// Bias, sd, rmse and 5% rejection rate per estimator and parameter.
/// Estimators appear in their canonical order; failed replications are
/// counted in `n_fail` and excluded from the moments.
pub fn summarize(records: &[ReplicationRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(HdBlpError::InvalidArgument("no replications to summarise".into()));
    }
    let mut rows = Vec::new();
    for kind in EstimatorKind::ALL {
        let outcomes: Vec<(&ReplicationRecord, &EstimatorOutcome)> = records
            .iter()
            .flat_map(|rec| rec.outcomes.iter().filter(|o| o.estimator == kind).map(move |o| (rec, o)))
            .collect();
        if outcomes.is_empty() {
            continue;
        }
        for param in [Param::Sigma, Param::Alpha] {
            let i = param.index();
            let mut errors = Vec::new();
            let mut estimates = Vec::new();
            let mut rejections = 0usize;
            let mut n_fail = 0usize;
            for (rec, o) in &outcomes {
                match &o.report {
                    Some(rep) => {
                        let est = rep.estimate()[i];
                        estimates.push(est);
                        errors.push(est - rec.truth[i]);
                        let t = (est - rec.truth[i]) / rep.se[i];
                        if t.abs() > CRITICAL_VALUE {
                            rejections += 1;
                        }
                    }
                    None => n_fail += 1,
                }
            }
            let n = estimates.len();
            let (bias, sd, rmse, rej) = if n == 0 {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let nf = n as f64;
                let bias = errors.iter().sum::<f64>() / nf;
                let mean = estimates.iter().sum::<f64>() / nf;
                let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / nf;
                let mse = errors.iter().map(|e| e * e).sum::<f64>() / nf;
                (bias, var.sqrt(), mse.sqrt(), rejections as f64 / nf)
            };
            rows.push(SummaryRow {
                estimator: kind,
                param,
                bias,
                sd,
                rmse,
                rej_rate: rej,
                n_ok: n,
                n_fail,
            });
        }
    }
    Ok(rows)
}

pub fn summary_row<'r>(rows: &'r [SummaryRow], kind: EstimatorKind, param: Param) -> Option<&'r SummaryRow> {
    rows.iter().find(|r| r.estimator == kind && r.param == param)
}

pub const SUMMARY_HEADER: [&str; 7] = ["estimator", "param", "bias", "sd", "rmse", "rej_rate", "n_fail"];

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.estimator.name().to_string(),
            r.param.name().to_string(),
            r.bias.to_string(),
            r.sd.to_string(),
            r.rmse.to_string(),
            r.rej_rate.to_string(),
            r.n_fail.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One table per parameter: estimator rows, bias/sd/RMSE/rejection columns.
pub fn summary_markdown(rows: &[SummaryRow], replications: usize) -> String {
    let mut s = String::new();
    for param in [Param::Sigma, Param::Alpha] {
        let _ = writeln!(s, "### {} ({replications} replications)\n", param.name());
        s.push_str("| Estimator | bias | sd | RMSE | Rej.rate | n_fail |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|\n");
        for r in rows.iter().filter(|r| r.param == param) {
            let _ = writeln!(
                s,
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
                r.estimator, r.bias, r.sd, r.rmse, r.rej_rate, r.n_fail
            );
        }
        s.push('\n');
    }
    s
}

pub fn write_records_jsonl(records: &[ReplicationRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| HdBlpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| HdBlpError::io(path, e))?;
    }
    w.flush().map_err(|e| HdBlpError::io(path, e))
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<ReplicationRecord>> {
    let file = File::open(path).map_err(|e| HdBlpError::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| HdBlpError::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// `study_seed<seed>_<UTC timestamp>`
pub fn output_stem(seed: u64) -> String {
    format!("study_seed{seed}_{}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))
}

/// Write the requested summaries, the per-replication records and the
/// resolved configuration into `dir`. Returns the paths written.
pub fn emit_outputs(result: &StudyResult, formats: &[OutputFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| HdBlpError::io(dir, e))?;
    let stem = output_stem(result.config.base_seed);
    let rows = summarize(&result.records)?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            OutputFormat::Csv => {
                let path = dir.join(format!("{stem}.summary.csv"));
                let file = File::create(&path).map_err(|e| HdBlpError::io(&path, e))?;
                write_summary_csv(&rows, BufWriter::new(file)).map_err(|e| HdBlpError::csv(&path, e))?;
                written.push(path);
            }
            OutputFormat::Md => {
                let path = dir.join(format!("{stem}.summary.md"));
                std::fs::write(&path, summary_markdown(&rows, result.records.len()))
                    .map_err(|e| HdBlpError::io(&path, e))?;
                written.push(path);
            }
            OutputFormat::Json => {
                let path = dir.join(format!("{stem}.replications.jsonl"));
                write_records_jsonl(&result.records, &path)?;
                written.push(path);
            }
        }
    }
    let path = dir.join(format!("{stem}.config.toml"));
    std::fs::write(&path, result.config.to_toml_string()?).map_err(|e| HdBlpError::io(&path, e))?;
    written.push(path);
    Ok(written)
}
