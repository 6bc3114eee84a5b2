//! Command-line front end: `simulate`, `estimate`, `study`, `summarize`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or
//! runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dgp::{generate_dataset, DgpConfig};
use crate::error::{HdBlpError, Result};
use crate::estimators::{parse_estimator_list, EstimateReport, EstimationSession, EstimatorKind};
use crate::harness::{
    emit_outputs, read_records_jsonl, run_study, summarize, summary_markdown, write_summary_csv,
    OutputFormat, StudyConfig,
};
use crate::io::{read_dataset, write_dataset};
use crate::nuisance::LambdaMode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hdblp", version, about = "High-dimensional BLP demand estimation")]
pub struct Cli {
    /// TOML study configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one dataset and write it as CSV plus a truth sidecar.
    Simulate(SimulateArgs),
    /// Run estimators on one dataset.
    Estimate(EstimateArgs),
    /// Run the Monte Carlo study.
    Study(StudyArgs),
    /// Summarise persisted per-replication records.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LambdaModeArg {
    Cv,
    Theoretical,
}

impl From<LambdaModeArg> for LambdaMode {
    fn from(m: LambdaModeArg) -> Self {
        match m {
            LambdaModeArg::Cv => LambdaMode::Cv,
            LambdaModeArg::Theoretical => LambdaMode::Theoretical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Md,
    Json,
}

impl From<FormatArg> for OutputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Md => OutputFormat::Md,
            FormatArg::Json => OutputFormat::Json,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation seed; defaults to `dgp.seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Dataset CSV (columns j,t,s,p,z1..,x1..).
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Truth sidecar; required by the oracle estimators.
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
    /// Comma-separated estimator names, or `all`.
    #[arg(long, value_name = "LIST")]
    pub estimators: Option<String>,
    #[arg(long, value_enum)]
    pub lambda_mode: Option<LambdaModeArg>,
    #[arg(long, value_enum, default_value = "md")]
    pub format: FormatArg,
    /// Also write the reports as JSON into this directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Number of replications.
    #[arg(long, value_name = "N")]
    pub reps: Option<usize>,
    /// Base seed; replication r uses `seed XOR r`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, value_name = "N", env = "HDBLP_THREADS")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated estimator names, or `all`.
    #[arg(long, value_name = "LIST")]
    pub estimators: Option<String>,
    #[arg(long, value_enum)]
    pub lambda_mode: Option<LambdaModeArg>,
    /// Output formats; repeat or separate with commas.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub format: Vec<FormatArg>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Per-replication JSON lines written by `study`.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "md")]
    pub format: FormatArg,
    /// Write the summary here instead of standard output.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

pub fn exit_code(err: &HdBlpError) -> i32 {
    match err {
        HdBlpError::Config(_) | HdBlpError::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<StudyConfig> {
    match path {
        Some(p) => StudyConfig::load(p),
        None => Ok(StudyConfig::default()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HdBlpError + '_ {
    move |e| HdBlpError::io(path, e)
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let out_err = |e| HdBlpError::io(Path::new("<stdout>"), e);
    match &cli.command {
        Command::Simulate(a) => {
            let dgp = DgpConfig {
                seed: a.seed.unwrap_or(cfg.dgp.seed),
                ..cfg.dgp.clone()
            };
            dgp.validate()?;
            let data = generate_dataset(&dgp)?;
            for path in write_dataset(&data, &a.out, &format!("dataset_seed{}", dgp.seed))? {
                writeln!(stdout, "{}", path.display()).map_err(out_err)?;
            }
        }
        Command::Estimate(a) => {
            if let Some(m) = a.lambda_mode {
                cfg.estimation.nuisance.lambda_mode = m.into();
            }
            let kinds = match &a.estimators {
                Some(list) => parse_estimator_list(list)?,
                None if a.truth.is_some() => EstimatorKind::ALL.to_vec(),
                None => EstimatorKind::ALL.into_iter().filter(|k| !k.is_oracle()).collect(),
            };
            if a.truth.is_none() {
                if let Some(k) = kinds.iter().find(|k| k.is_oracle()) {
                    return Err(HdBlpError::InvalidArgument(format!("{k} needs --truth")));
                }
            }
            cfg.estimation.validate()?;
            let data = read_dataset(&a.data, a.truth.as_deref())?;
            let quad = cfg.estimation.quadrature()?;
            let session = EstimationSession::new(&data.markets, &quad, &cfg.estimation)?;
            let mut reports = Vec::new();
            for k in kinds {
                match session.run(k, data.truth.as_ref()) {
                    Ok(mut r) => {
                        if let Some(t) = &data.truth {
                            r.test_against([t.record.sigma, t.record.alpha]);
                        }
                        reports.push(r);
                    }
                    Err(e) => writeln!(stderr, "{k} failed: {e}").map_err(out_err)?,
                }
            }
            write_reports(&reports, a.format, stdout)?;
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                let path = dir.join("estimates.json");
                std::fs::write(&path, serde_json::to_string_pretty(&reports)?).map_err(io_err(&path))?;
                writeln!(stderr, "wrote {}", path.display()).map_err(out_err)?;
            }
        }
        Command::Study(a) => {
            if let Some(n) = a.reps {
                cfg.replications = n;
            }
            if let Some(s) = a.seed {
                cfg.base_seed = s;
            }
            if let Some(t) = a.threads {
                cfg.threads = Some(t);
            }
            if let Some(dir) = &a.out {
                cfg.output_dir = dir.clone();
            }
            if let Some(list) = &a.estimators {
                cfg.estimators = parse_estimator_list(list)?;
            }
            if let Some(m) = a.lambda_mode {
                cfg.estimation.nuisance.lambda_mode = m.into();
            }
            if !a.format.is_empty() {
                cfg.formats = a.format.iter().map(|&f| f.into()).collect();
            }
            cfg.validate()?;
            let result = run_study(&cfg)?;
            let paths = emit_outputs(&result, &cfg.formats, &cfg.output_dir)?;
            let rows = summarize(&result.records)?;
            stdout
                .write_all(summary_markdown(&rows, result.records.len()).as_bytes())
                .map_err(out_err)?;
            for p in paths {
                writeln!(stderr, "wrote {}", p.display()).map_err(out_err)?;
            }
        }
        Command::Summarize(a) => {
            let records = read_records_jsonl(&a.input)?;
            let rows = summarize(&records)?;
            let (text, ext) = match a.format {
                FormatArg::Csv => {
                    let mut buf = Vec::new();
                    write_summary_csv(&rows, &mut buf).map_err(|e| HdBlpError::csv(&a.input, e))?;
                    (String::from_utf8(buf).expect("csv output is utf-8"), "csv")
                }
                FormatArg::Md => (summary_markdown(&rows, records.len()), "md"),
                FormatArg::Json => (serde_json::to_string_pretty(&rows)? + "\n", "json"),
            };
            match &a.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                    let stem = a
                        .input
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("study");
                    let path = dir.join(format!("{stem}.summary.{ext}"));
                    std::fs::write(&path, text).map_err(io_err(&path))?;
                    writeln!(stdout, "{}", path.display()).map_err(out_err)?;
                }
                None => stdout.write_all(text.as_bytes()).map_err(out_err)?,
            }
        }
    }
    Ok(())
}

fn write_reports(reports: &[EstimateReport], format: FormatArg, out: &mut dyn Write) -> Result<()> {
    let err = |e| HdBlpError::io(Path::new("<stdout>"), e);
    match format {
        FormatArg::Json => {
            writeln!(out, "{}", serde_json::to_string_pretty(reports)?).map_err(err)?;
        }
        FormatArg::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let csv_err = |e| HdBlpError::csv(Path::new("<stdout>"), e);
            w.write_record(["estimator", "sigma", "se_sigma", "alpha", "se_alpha", "t_sigma", "t_alpha"])
                .map_err(csv_err)?;
            for r in reports {
                let t = r.tstats.map(|t| t.map(|v| v.to_string()));
                let [ts, ta] = t.unwrap_or_default();
                w.write_record([
                    r.estimator.name().to_string(),
                    r.theta.sigma.to_string(),
                    r.se[0].to_string(),
                    r.theta.alpha.to_string(),
                    r.se[1].to_string(),
                    ts,
                    ta,
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(err)?;
        }
        FormatArg::Md => {
            writeln!(out, "| Estimator | sigma | se | alpha | se | t(sigma) | t(alpha) |").map_err(err)?;
            writeln!(out, "|---|---:|---:|---:|---:|---:|---:|").map_err(err)?;
            for r in reports {
                let t = r
                    .tstats
                    .map(|t| (format!("{:.2}", t[0]), format!("{:.2}", t[1])))
                    .unwrap_or_default();
                writeln!(
                    out,
                    "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |",
                    r.estimator, r.theta.sigma, r.se[0], r.theta.alpha, r.se[1], t.0, t.1
                )
                .map_err(err)?;
            }
        }
    }
    Ok(())
}
