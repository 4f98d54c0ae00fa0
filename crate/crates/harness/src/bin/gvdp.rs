use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gvdp_core::Error;
use gvdp_harness::experiment::{
    run_experiment, write_rows, ExperimentConfig, ExperimentKind, PartialConfig,
};

#[derive(Parser)]
#[command(name = "gvdp", about = "Private bootstrap inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Coverage of OLS intervals after clipping the top of the response.
    DemoClipping {
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// CSV file for per-coordinate results.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    /// Overestimation factor for the analyst-supplied bounds.
    #[arg(long = "of")]
    overestimation_factor: Option<f64>,
}

impl Overrides {
    fn into_partial(self) -> PartialConfig {
        PartialConfig {
            seed: self.seed,
            output: self.out,
            trials: self.trials,
            n: self.n,
            k: self.k,
            d: self.d,
            t: self.t,
            rho: self.rho,
            overestimation_factor: self.overestimation_factor,
            ..PartialConfig::default()
        }
    }
}

fn load(command: Command) -> Result<ExperimentConfig, Error> {
    let partial = match command {
        Command::Run { config, overrides } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                Error::InvalidConfiguration(format!("cannot read {}: {e}", config.display()))
            })?;
            PartialConfig::from_toml(&text)?.merge(overrides.into_partial())
        }
        Command::DemoClipping { overrides } => PartialConfig {
            kind: Some(ExperimentKind::ClippingDemo),
            ..PartialConfig::default()
        }
        .merge(overrides.into_partial()),
    };
    ExperimentConfig::resolve(partial)
}

fn run(command: Command) -> Result<(), Error> {
    let cfg = load(command).map_err(|e| e.in_stage("configuration"))?;
    let out = run_experiment(&cfg)?;
    print!("{}", out.summary);
    for f in &out.failures {
        eprintln!("trial {} [{}]: {}", f.trial, f.method, f.message);
    }
    if let Some(path) = &cfg.output {
        let file = File::create(path).map_err(|e| Error::from(e).in_stage("output"))?;
        write_rows(BufWriter::new(file), &out.rows).map_err(|e| e.in_stage("output"))?;
        println!("wrote {} rows to {}", out.rows.len(), path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gvdp: {e}");
            ExitCode::FAILURE
        }
    }
}
