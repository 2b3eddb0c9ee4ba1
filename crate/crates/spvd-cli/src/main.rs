//! `spvd` binary: train, sample, complete, superres, eval, inspect.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "spvd", version, about = "Point-cloud diffusion: training, sampling, masked tasks, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a run config; writes checkpoint + loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Extra checkpoint every N steps.
        #[arg(long)]
        save_every: Option<usize>,
        /// Continue from an existing checkpoint (keeps step numbering).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate clouds from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ddim")]
        rule: String,
        /// Denoising steps (default: T for ddpm, min(50, T) for ddim).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        n_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Regenerate a random subset of parts of a labeled cloud.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input cloud (.ply with an integer `part` property).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Upper bound on how many parts get regenerated.
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value = "ddim")]
        rule: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "unit_box")]
        normalization: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Densify a cloud: keep every input point, generate the rest.
    Superres {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        n_out: usize,
        #[arg(long, default_value = "ddim")]
        rule: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "unit_box")]
        normalization: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a generated set against a reference set.
    Eval {
        #[arg(long)]
        gen_dir: PathBuf,
        #[arg(long)]
        ref_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report JSON path (default: metrics.json inside gen_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a config or checkpoint summary with the parameter count.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train {
            config,
            out,
            seed,
            steps,
            save_every,
            resume,
        } => commands::cmd_train(config, out, *seed, *steps, *save_every, resume.as_deref()),
        Cmd::Sample {
            checkpoint,
            out,
            rule,
            steps,
            count,
            n_points,
            seed,
        } => commands::cmd_sample(checkpoint, out, rule, *steps, *count, *n_points, *seed),
        Cmd::Complete {
            checkpoint,
            input,
            out,
            m,
            rule,
            steps,
            normalization,
            seed,
        } => commands::cmd_complete(
            checkpoint,
            input,
            out,
            *m,
            rule,
            *steps,
            normalization,
            *seed,
        ),
        Cmd::Superres {
            checkpoint,
            input,
            out,
            n_out,
            rule,
            steps,
            normalization,
            seed,
        } => commands::cmd_superres(
            checkpoint,
            input,
            out,
            *n_out,
            rule,
            *steps,
            normalization,
            *seed,
        ),
        Cmd::Eval {
            gen_dir,
            ref_dir,
            runs,
            seed,
            out,
        } => commands::cmd_eval(gen_dir, ref_dir, *runs, *seed, out.as_deref()),
        Cmd::Inspect { config, checkpoint } => {
            commands::cmd_inspect(config.as_deref(), checkpoint.as_deref())
        }
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
