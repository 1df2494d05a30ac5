use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use modnet::experiment::{self, Experiment};
use modnet::validate::{Budget, Validation, Verdict};
use modnet::Error;

/// Run module-network experiments, compute oracle fixtures, validate.
#[derive(Parser)]
#[command(name = "modnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run MH chains; write one trace CSV per chain and summary.json.
    Infer(Overrides),
    /// Compute exact oracle values; write oracle.json.
    Oracle(Overrides),
    /// Run the acceptance suite; exit 1 if any criterion fails.
    Validate {
        #[command(flatten)]
        overrides: Overrides,
        /// Skip the statistical criteria (reported as SKIPPED).
        #[arg(long)]
        quick: bool,
        /// Fixtures file to validate against, instead of the configured one.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Overrides {
    fn load(&self) -> modnet::Result<(Experiment, PathBuf)> {
        let mut experiment = Experiment::load(&self.config)?;
        let c = &mut experiment.config;
        c.seed = self.seed.unwrap_or(c.seed);
        c.chains = self.chains.unwrap_or(c.chains);
        c.iterations = self.iters.unwrap_or(c.iterations);
        c.particles = self.particles.unwrap_or(c.particles);
        c.train_samples = self.train_samples.unwrap_or(c.train_samples);
        c.workers = self.workers.unwrap_or(c.workers);
        c.validate()?;
        let out = self.out.clone().unwrap_or_else(|| experiment.base_dir.join(&experiment.config.out));
        Ok((experiment, out))
    }
}

fn run(cli: Cli) -> modnet::Result<bool> {
    match cli.command {
        Command::Infer(o) => {
            let (experiment, out) = o.load()?;
            let result = experiment::cmd_infer(&experiment, &out)?;
            for (column, table) in &result.summary.marginals {
                log::info!("{column}: {table:?}");
            }
            println!("wrote {} traces and {}", result.csv_paths.len(), result.summary_path.display());
            Ok(true)
        }
        Command::Oracle(o) => {
            let (experiment, out) = o.load()?;
            let path = experiment::cmd_oracle(&experiment, &out)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Validate { overrides, quick, fixtures, report } => {
            let (experiment, _) = overrides.load()?;
            let budget = if quick { Budget::Reduced } else { Budget::Full };
            let validation = match fixtures {
                Some(path) => Validation::new(experiment, experiment::load_fixtures(&path)?, budget),
                None => Validation::load(experiment, budget)?,
            };
            let reports = validation.run_all();
            for r in &reports {
                println!("{r}");
            }
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&reports)? + "\n")?;
            }
            Ok(reports.iter().all(|r| r.verdict != Verdict::Fail))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MODNET_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) | Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
