use std::path::PathBuf;
use std::process::ExitCode;

use beamsel::Result;
use beamsel_cli::commands::{cmd_eval, cmd_generate, cmd_gradcheck, cmd_sweep, cmd_train, render_eval, RunPaths};
use beamsel_cli::config::RunConfig;
use beamsel_cli::{configure_threads, exit_code, EXIT_NUMERICAL};
use clap::{Args, Parser, Subcommand};

/// Sub-6GHz-aided mmW base station and beam selection.
#[derive(Parser, Debug)]
#[command(name = "beamsel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to start from: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(self.config.as_deref(), self.preset.as_deref())?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        Ok(config)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the scene, label every user and write the dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the network on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; defaults to dataset.txt in the output directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to checkpoint.bin in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated beam budgets, e.g. 1,3,5.
        #[arg(long, value_delimiter = ',')]
        beams: Option<Vec<usize>>,
        /// Also write per-sample diagnostics.csv.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Retrain on growing fractions of the training split.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated fractions in (0, 1].
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Compare analytic and finite-difference gradients of a fresh model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale this tensor's analytic gradient to check that the check fails.
        #[arg(long, value_name = "TENSOR")]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> Result<i32> {
    configure_threads()?;
    match cli.command {
        Command::Generate { common } => {
            let config = common.resolve()?;
            let s = cmd_generate(&config)?;
            println!(
                "{} samples from {} users ({} excluded), gamma {:e}, {:.1} s",
                s.samples, s.users, s.excluded, s.gamma, s.seconds
            );
            println!("dataset {} ({})", RunPaths::new(&config.out).dataset().display(), s.dataset_hash);
        }
        Command::Train { common, dataset } => {
            let config = common.resolve()?;
            let dataset = dataset.unwrap_or_else(|| RunPaths::new(&config.out).dataset());
            let s = cmd_train(&config, &dataset)?;
            let last = s.history.last().expect("at least one epoch");
            println!(
                "{} epochs in {:.1} s: loss {:.4}, bs {:.4}, beam@1 {:.4}, beam@3 {:.4}, total {:.4}",
                last.epoch,
                s.seconds,
                last.train_loss,
                last.bs_accuracy,
                last.top1_beam_accuracy,
                last.top3_beam_accuracy,
                last.total_accuracy
            );
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            beams,
            diagnostics,
        } => {
            let mut config = common.resolve()?;
            config.eval.diagnostics |= diagnostics;
            let paths = RunPaths::new(&config.out);
            let beams = beams.unwrap_or_else(|| config.eval.beams.clone());
            let report = cmd_eval(
                &config,
                &dataset.unwrap_or_else(|| paths.dataset()),
                &checkpoint.unwrap_or_else(|| paths.checkpoint()),
                &beams,
            )?;
            print!("{}", render_eval(&report, &beams));
        }
        Command::Sweep {
            common,
            dataset,
            fractions,
        } => {
            let config = common.resolve()?;
            let fractions = fractions.unwrap_or_else(|| config.sweep.fractions.clone());
            let dataset = dataset.unwrap_or_else(|| RunPaths::new(&config.out).dataset());
            for row in cmd_sweep(&config, &dataset, &fractions)? {
                println!(
                    "fraction {:.3} ({} samples): bs {:.4}, beam@1 {:.4}, beam@3 {:.4}, total {:.4}",
                    row.fraction,
                    row.train_samples,
                    row.bs_accuracy,
                    row.top1_beam_accuracy,
                    row.top3_beam_accuracy,
                    row.total_accuracy
                );
            }
        }
        Command::Gradcheck { common, corrupt } => {
            let config = common.resolve()?;
            let report = cmd_gradcheck(&config, corrupt.as_deref())?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(EXIT_NUMERICAL);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}

