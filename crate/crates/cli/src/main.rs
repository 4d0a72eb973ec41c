use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latentflow_cli::commands::{
    self, Overrides,
};

/// Seeded end-to-end runs: toy GAN training, latent-flow refinement,
/// ablations, theorem verification, and trajectory reports.
#[derive(Parser)]
#[command(name = "latentflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the estimator mode (krr | kde).
    #[arg(long)]
    estimator: Option<String>,
    /// Override the generator variant (mlp | identity).
    #[arg(long)]
    generator: Option<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            estimator: self.estimator.clone(),
            generator: self.generator.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy GAN and persist both networks.
    TrainGan(CommonArgs),
    /// Refine latent codes of a trained (or identity) generator.
    Refine(CommonArgs),
    /// Run the estimator/sigma/step-size ablation grid.
    Ablate(CommonArgs),
    /// Run the verification suite and write JSON reports.
    Verify(CommonArgs),
    /// Pretty-print a trajectory JSONL and emit a plot-ready CSV.
    Report {
        /// Trajectory JSONL file (defaults to <out_dir>/trajectory.jsonl of
        /// the given config).
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Run configuration whose output directory holds the trajectory.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the emitted CSV (defaults next to the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainGan(a) => commands::run_train_gan(&a.config, &a.overrides()),
        Command::Refine(a) => commands::run_refine(&a.config, &a.overrides()),
        Command::Ablate(a) => commands::run_ablate(&a.config, &a.overrides()),
        Command::Verify(a) => commands::run_verify(&a.config, &a.overrides()),
        Command::Report { trajectory, config, out } => {
            let path = match (trajectory, config) {
                (Some(t), _) => t.clone(),
                (None, Some(c)) => match latentflow_cli::RunConfig::load(c) {
                    Ok(cfg) => PathBuf::from(cfg.run.out_dir).join("trajectory.jsonl"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(e.exit_code() as u8);
                    }
                },
                (None, None) => {
                    eprintln!("error: report needs --trajectory or --config");
                    return ExitCode::from(2);
                }
            };
            commands::run_report(&path, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
