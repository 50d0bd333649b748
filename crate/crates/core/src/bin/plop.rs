use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use plop::commands::{
    self, Aggregation, CaptureOptions, Experiment, LabOptions, MapOptions, Outcome, PlanOptions,
    ScoreOptions,
};
use plop::nfn::Convention;
use plop::placement::Strategy;
use plop::report::ExportFormat;
use plop::theory::{InitScheme, TargetScale};
use plop::transformer::{SyntheticTask, TransformerConfig};

/// NFN alignment scores and LoRA placement plans.
///
/// Exit codes: 0 success, 1 invalid input or runtime error, 2 a lab
/// experiment or the self-test missed a threshold.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Directory for all outputs.
    #[arg(long = "output-dir", alias = "output_dir", default_value = "results")]
    output_dir: PathBuf,
    /// Worker threads for per-module scoring (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Score every module in an activation bundle against its weight.
    Score {
        /// Weight bundle manifest or .safetensors file.
        #[arg(long)]
        weights: PathBuf,
        /// Activation bundle manifest.
        #[arg(long)]
        activations: PathBuf,
        /// Random baseline inputs per activation.
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// squared or unsquared.
        #[arg(long, default_value_t = Convention::Squared)]
        convention: Convention,
        /// module or type.
        #[arg(long, default_value = "type")]
        aggregation: Aggregation,
        /// Label recorded in the outputs.
        #[arg(long)]
        dataset: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Select module types from a scores file and write a LoRA plan.
    Plan {
        #[arg(long)]
        scores: PathBuf,
        /// Number of module types to select.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// LoRA rank; alpha is twice the rank.
        #[arg(long, default_value_t = 16)]
        r: u32,
        /// plop, plop_inverse, attn, mlp or all.
        #[arg(long, default_value_t = Strategy::Plop)]
        strategy: Strategy,
        #[command(flatten)]
        common: Common,
    },
    /// Export the layer x type map of a scores file.
    Map {
        #[arg(long)]
        scores: PathBuf,
        /// csv, svg or txt; repeatable.
        #[arg(long = "format", value_delimiter = ',', default_values = ["csv", "svg", "txt"])]
        formats: Vec<ExportFormat>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a training-dynamics experiment: theorem1, signconst, baseline or fig3.
    Lab {
        experiment: Experiment,
        /// Hidden width.
        #[arg(long, default_value_t = 1024)]
        n: usize,
        /// Input dimension.
        #[arg(long, default_value_t = 128)]
        d: usize,
        /// Learning-rate constant; the applied rate is eta / n.
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        /// Steps to simulate (default: half the estimated window; 300 for fig3).
        #[arg(long)]
        steps: Option<usize>,
        /// Seeded trials for the window estimate and sign constancy.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Steps per trial when estimating the window.
        #[arg(long, default_value_t = 2000)]
        horizon: usize,
        /// Exponent for the scaled deviation.
        #[arg(long, default_value_t = 0.25)]
        delta: f64,
        /// mean_field or standard.
        #[arg(long, default_value = "mean_field")]
        init: InitScheme,
        /// Target scale for fig3: inv_sqrt_d or inv_d.
        #[arg(long, default_value = "inv_sqrt_d")]
        target_scale: TargetScale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Run the toy transformer once and write weight and activation bundles.
    Capture {
        /// Transformer config as JSON (default: 2 layers, d_model 64).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's weight seed.
        #[arg(long)]
        seed: Option<u64>,
        /// JSON token file; either [[ids]] or {"tokens": [[ids]], "mask": [[bool]]}.
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// Synthetic corpus when no token file is given: arithmetic, shuffled or letters.
        #[arg(long, default_value = "arithmetic")]
        task: SyntheticTask,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Adam steps on the task before capturing.
        #[arg(long, default_value_t = 0)]
        train_steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run the acceptance suite.
    Selftest {
        /// Criterion ids to run (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (workers, outcome): (
        Option<usize>,
        Box<dyn FnOnce() -> plop::Result<Outcome> + Send>,
    ) = match cli.command {
        Command::Score {
            weights,
            activations,
            m,
            seed,
            convention,
            aggregation,
            dataset,
            common,
        } => {
            let opts = ScoreOptions {
                weights,
                activations,
                m,
                seed,
                convention,
                aggregation,
                dataset,
                output_dir: common.output_dir,
            };
            (
                common.workers,
                Box::new(move || commands::score(&opts).map(|(_, o)| o)),
            )
        }
        Command::Plan {
            scores,
            k,
            r,
            strategy,
            common,
        } => {
            let opts = PlanOptions {
                scores,
                k,
                r,
                strategy,
                output_dir: common.output_dir,
            };
            (
                common.workers,
                Box::new(move || commands::plan_command(&opts)),
            )
        }
        Command::Map {
            scores,
            formats,
            common,
        } => {
            let opts = MapOptions {
                scores,
                formats,
                output_dir: common.output_dir,
            };
            (
                common.workers,
                Box::new(move || commands::map_command(&opts).map(|(_, o)| o)),
            )
        }
        Command::Lab {
            experiment,
            n,
            d,
            eta,
            steps,
            trials,
            horizon,
            delta,
            init,
            target_scale,
            seed,
            common,
        } => {
            let opts = LabOptions {
                experiment,
                n,
                d,
                eta,
                steps,
                trials,
                horizon,
                delta,
                init,
                target_scale,
                seed,
                output_dir: common.output_dir,
            };
            (common.workers, Box::new(move || commands::lab(&opts)))
        }
        Command::Capture {
            config,
            seed,
            tokens,
            task,
            batch,
            seq_len,
            data_seed,
            train_steps,
            common,
        } => {
            let mut model: TransformerConfig = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => TransformerConfig::default(),
            };
            if let Some(seed) = seed {
                model.seed = seed;
            }
            let opts = CaptureOptions {
                model,
                tokens,
                task,
                batch,
                seq_len,
                data_seed,
                train_steps,
                output_dir: common.output_dir,
            };
            (common.workers, Box::new(move || commands::capture(&opts)))
        }
        Command::Selftest { only, json } => {
            let reports = plop::acceptance::run(&only, |r| println!("{}", r.line()));
            let passed = reports.iter().all(|r| r.passed);
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!(
                "{} of {} criteria passed",
                reports.len() - failed,
                reports.len()
            );
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&reports)?;
                std::fs::write(&path, text + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            return Ok(passed);
        }
    };
    let outcome = commands::in_pool(workers, outcome)??;
    println!("{}", outcome.summary);
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
