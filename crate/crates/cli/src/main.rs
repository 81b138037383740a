use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fsvos_cli::commands::{self, AblateArgs, EvalArgs, EvalMode, RelearnArgs, TrainArgs};
use fsvos_cli::config::RunConfig;
use fsvos_cli::exit_code;

#[derive(Parser, Debug)]
#[command(name = "fsvos", version)]
#[command(about = "Few-shot video object segmentation on synthetic shapes")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Dataset directory (default: <output_root>/data)
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Output directory for this command
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic image split and novel-class video clips
    GenData,
    /// Episodic phase-1 training on base-class images
    TrainImage {
        /// Train until this many total iterations
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a phase-1 checkpoint directory
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adapt a phase-1 model to one clip with consistency relearning
    Relearn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the clip in the dataset manifest
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        lambda3: Option<f64>,
    },
    /// Score clips and write metrics CSV plus overlay PNGs
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Only this clip index
        #[arg(long)]
        clip: Option<usize>,
        #[arg(long)]
        no_overlays: bool,
    },
    /// Loss ablation table: baseline, leave-one-out variants, full
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use only the first N clips
        #[arg(long)]
        clips: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData => {
            let (dir, m) = commands::gen_data(&cfg, cli.out)?;
            println!(
                "dataset: {} ({} images, {} clips)",
                dir.display(),
                m.images.len(),
                m.clips.len()
            );
        }
        Command::TrainImage { iterations, resume } => {
            let s = commands::train_image(
                &cfg,
                &TrainArgs {
                    data: cli.data,
                    out: cli.out,
                    iterations,
                    resume,
                },
            )?;
            let last = s.log.last().map(|r| r.loss);
            println!(
                "checkpoint: {} params_hash {} final loss {last:?}",
                s.checkpoint.display(),
                s.manifest.params_hash
            );
        }
        Command::Relearn {
            checkpoint,
            clip,
            lambda1,
            lambda2,
            lambda3,
        } => {
            let r = commands::relearn_clip(
                &cfg,
                &RelearnArgs {
                    checkpoint,
                    data: cli.data,
                    out: cli.out,
                    clip,
                    lambda1,
                    lambda2,
                    lambda3,
                },
            )?;
            println!(
                "freeze contract: teacher unchanged {}, head unchanged {}, max teacher grad {}",
                r.freeze.teacher_unchanged, r.freeze.head_unchanged, r.freeze.teacher_grad_max
            );
            println!(
                "relearned {} ({}, {} iterations) -> {} source {}",
                r.clip,
                r.variant,
                r.iterations,
                r.checkpoint.display(),
                r.source_hash
            );
        }
        Command::Eval {
            checkpoint,
            mode,
            clip,
            no_overlays,
        } => {
            let s = commands::eval(
                &cfg,
                &EvalArgs {
                    checkpoint,
                    mode,
                    data: cli.data,
                    out: cli.out,
                    clip,
                    overlays: !no_overlays,
                },
            )?;
            let m = s.summary.mean;
            println!(
                "{}: dice {:.4} fg_iou {:.4} fb_iou {:.4} over {} frames -> {}",
                mode.name(),
                m.dice,
                m.fg_iou,
                m.fb_iou,
                s.summary.count,
                s.dir.display()
            );
        }
        Command::Ablate { checkpoint, clips } => {
            let (dir, table) = commands::ablate(
                &cfg,
                &AblateArgs {
                    checkpoint,
                    data: cli.data,
                    out: cli.out,
                    max_clips: clips,
                },
            )?;
            print!("{}", table.to_markdown());
            println!("written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
