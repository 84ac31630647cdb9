use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edgecrafter_cli::commands::{self, CliError};

#[derive(Parser)]
#[command(
    name = "edgecrafter",
    version,
    about = "Compact ViT detection/pose/segmentation models: build, audit, and verify"
)]
struct Cli {
    /// Seed for every random choice (weights, images, scenes).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Square input resolution; must be a multiple of 32.
    #[arg(long, global = true, default_value_t = 640)]
    input: usize,
    /// Compact single-line JSON on stdout instead of pretty-printed.
    #[arg(long, global = true)]
    json: bool,
    /// JSON config file overriding the built-in registry entry.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Construct a model and print its parameter manifest.
    Build {
        /// Model scale: S, M, L, or X.
        variant: String,
        /// Prediction head: det, pose, or insseg.
        task: String,
        /// Override the number of register tokens.
        #[arg(long)]
        register_count: Option<usize>,
    },
    /// Audit parameters and FLOPs against the published targets.
    Profile {
        variant: String,
        task: String,
    },
    /// Run one random image through every stage; print shapes and checksum.
    Forward {
        variant: String,
        task: String,
    },
    /// Compare the Hungarian matcher against the exhaustive oracle.
    Match {
        /// Ground truths per scene (oracle limit: 8).
        #[arg(long, default_value_t = 5)]
        gt: usize,
        /// Queries per scene.
        #[arg(long, default_value_t = 7)]
        queries: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Cost structure: det, pose, or insseg.
        #[arg(long, default_value = "det")]
        task: String,
    },
    /// Itemized loss report on one synthetic scene.
    Loss {
        #[arg(long, default_value = "det")]
        task: String,
        #[arg(long, default_value_t = 3)]
        gt: usize,
        #[arg(long, default_value_t = 10)]
        queries: usize,
    },
    /// Check every analytic gradient against central finite differences.
    Gradcheck {
        /// Randomized instances per gradient.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Adapter-only distillation convergence experiment.
    DistillDemo {
        /// Teacher: linear-probe, mock-s, or mock-b.
        #[arg(long, default_value = "linear-probe")]
        teacher: String,
        /// Synthetic training images (demo cap 5000).
        #[arg(long, default_value_t = 5000)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        base_lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
}

fn run(cli: &Cli) -> commands::CmdResult {
    let config = cli.config.as_deref();
    match &cli.cmd {
        Cmd::Build { variant, task, register_count } => commands::cmd_build(
            commands::parse_variant(variant)?,
            commands::parse_task(task)?,
            *register_count,
            cli.seed,
            config,
        ),
        Cmd::Profile { variant, task } => commands::cmd_profile(
            commands::parse_variant(variant)?,
            commands::parse_task(task)?,
            cli.input,
            cli.seed,
            config,
        ),
        Cmd::Forward { variant, task } => commands::cmd_forward(
            commands::parse_variant(variant)?,
            commands::parse_task(task)?,
            cli.input,
            cli.seed,
            config,
        ),
        Cmd::Match { gt, queries, trials, task } => {
            commands::cmd_match(*gt, *queries, *trials, commands::parse_task(task)?, cli.seed)
        }
        Cmd::Loss { task, gt, queries } => {
            commands::cmd_loss(commands::parse_task(task)?, *gt, *queries, cli.seed)
        }
        Cmd::Gradcheck { trials } => commands::cmd_gradcheck(*trials, cli.seed),
        Cmd::DistillDemo { teacher, images, image_size, epochs, base_lr, batch } => {
            commands::cmd_distill_demo(
                commands::parse_teacher(teacher)?,
                *images,
                *image_size,
                *epochs,
                *base_lr,
                *batch,
                cli.seed,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok((value, pass)) => {
            let out = commands::envelope(value);
            if cli.json {
                println!("{out}");
            } else {
                println!("{}", serde_json::to_string_pretty(&out).expect("serializable output"));
            }
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
