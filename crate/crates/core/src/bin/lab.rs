use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fp4lab::experiments::{run, Experiment, ExperimentConfig, ExperimentError};

/// Desk-scale FP4 quantization laboratory.
#[derive(Debug, Parser)]
#[command(name = "lab", version)]
struct Cli {
    /// train, analyze-snr, correlation, scaling-curve, landscape, lr-sweep or mlp-align
    experiment: String,
    /// TOML experiment config
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single seed (overrides `seeds`)
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted key assignment applied to the config, e.g. model.lr=1e-3
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main_inner(cli: Cli) -> Result<(), ExperimentError> {
    let experiment: Experiment = cli.experiment.parse()?;
    if let Ok(n) = std::env::var("LAB_WORKERS") {
        let n: usize = n.parse().map_err(|_| ExperimentError::Config {
            field: "LAB_WORKERS".into(),
            reason: format!("{n:?} is not a worker count"),
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global pool configured once");
    }
    let mut overrides = cli.overrides;
    overrides.push(format!("experiment=\"{experiment}\""));
    if let Some(out) = &cli.out {
        overrides.push(format!("output_dir={:?}", out.display().to_string()));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seeds=[{s}]"));
    }
    let cfg = ExperimentConfig::load(&cli.config, &overrides)?;
    let summary = run(&cfg)?;
    for a in &summary.manifest.artifacts {
        println!("{}", summary.out_dir.join(a).display());
    }
    for n in &summary.manifest.notes {
        eprintln!("note: {n}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
