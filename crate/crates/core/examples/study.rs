//! A small Monte Carlo study: replications, summary table, and output files.
//!
//! `cargo run --release --example study -- 10 out_dir`

use hdblp::estimators::EstimatorKind;
use hdblp::harness::{emit_outputs, run_study, summarize, summary_markdown, OutputFormat, StudyConfig};

fn main() -> hdblp::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    let cfg = StudyConfig {
        replications: reps,
        estimators: vec![EstimatorKind::Oracle2, EstimatorKind::NonOrthogonal, EstimatorKind::NeymanOrthogonal],
        ..Default::default()
    };
    let result = run_study(&cfg)?;
    let rows = summarize(&result.records)?;
    print!("{}", summary_markdown(&rows, reps));

    if let Some(dir) = args.next() {
        let formats = [OutputFormat::Csv, OutputFormat::Md, OutputFormat::Json];
        for path in emit_outputs(&result, &formats, std::path::Path::new(&dir))? {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
