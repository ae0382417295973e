mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{Ctx, Layout};
use crate::config::RunConfig;
use crate::error::CliError;

/// Convert a trained transformer into a linear-complexity student and
/// distill it layer by layer.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration error,
/// 3 missing artifact, 4 numeric fault during training.
#[derive(Debug, Parser)]
#[command(name = "cald", version)]
struct Cli {
    /// Run configuration (TOML). Omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory shared by all commands.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Replace every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the task splits into OUT/data.bin.
    ///
    /// Errors: invalid task section (2); char-lm text file missing or not ASCII (1).
    GenData,
    /// Fine-tune the attention teacher and record waypoints.
    ///
    /// Writes OUT/teacher/{source,target}.ckpt, waypoints/, log.jsonl.
    /// Errors: data missing (3); numeric fault (4, state saved for --resume).
    TrainTeacher {
        /// Continue from OUT/teacher/state if present.
        #[arg(long)]
        resume: bool,
    },
    /// Build the student from the teacher per the conversion section.
    ///
    /// Errors: teacher checkpoint missing (3); plan incompatible with the teacher (2).
    Convert,
    /// Train the student in the configured guidance mode.
    ///
    /// Writes OUT/distill/RUN/{student.ckpt,log.jsonl,metrics.json}.
    /// Errors: student, teacher or waypoint store missing (3); numeric fault (4).
    Distill {
        /// Continue from OUT/distill/RUN/state if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate checkpoints (default: every artifact in OUT) on the eval split.
    ///
    /// Errors: data or checkpoint missing (3).
    Eval {
        /// Checkpoint to evaluate; repeatable.
        #[arg(long)]
        model: Vec<PathBuf>,
    },
    /// Hidden-state shift of the teacher's waypoints from its source.
    ///
    /// Errors: teacher artifacts missing (3).
    AnalyzeShift,
    /// 2-D PCA trajectories of the teacher and every distillation run.
    ///
    /// Errors: teacher or run artifacts missing (3); fewer than 2 checkpoints (1).
    AnalyzeTrajectory,
    /// Forward-pass timing across sequence lengths.
    ///
    /// Errors: invalid bench settings (2).
    Bench,
    /// Print a checkpoint's header and tensor table as JSON.
    ///
    /// Errors: file missing (3); corrupt checkpoint (1).
    InspectCkpt { path: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::InspectCkpt { path } = &cli.command {
        return commands::inspect_ckpt(path);
    }
    let cfg = RunConfig::load(cli.config.as_deref())?.resolve(cli.seed)?;
    let ctx = Ctx {
        cfg,
        layout: Layout { out: cli.out },
        quiet: cli.quiet,
    };
    let name = match &cli.command {
        Command::GenData => "gen-data",
        Command::TrainTeacher { .. } => "train-teacher",
        Command::Convert => "convert",
        Command::Distill { .. } => "distill",
        Command::Eval { .. } => "eval",
        Command::AnalyzeShift => "analyze-shift",
        Command::AnalyzeTrajectory => "analyze-trajectory",
        Command::Bench => "bench",
        Command::InspectCkpt { .. } => unreachable!(),
    };
    commands::echo_config(&ctx, name)?;
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::TrainTeacher { resume } => commands::train_teacher(&ctx, resume),
        Command::Convert => commands::convert(&ctx),
        Command::Distill { resume } => commands::distill(&ctx, resume),
        Command::Eval { model } => commands::eval(&ctx, &model),
        Command::AnalyzeShift => commands::analyze_shift(&ctx),
        Command::AnalyzeTrajectory => commands::analyze_trajectory(&ctx),
        Command::Bench => commands::bench(&ctx),
        Command::InspectCkpt { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
