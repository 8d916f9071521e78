use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unimap_core::harness::{
    cmd_correlation_study, cmd_edit, cmd_recon_study, cmd_train, Overrides, StudyConfig, StudyKind,
};
use unimap_core::{AttentionMode, Error, Result};

/// Train the toy denoiser, run reconstruction and correlation studies, and
/// edit images with adaptive masks.
#[derive(Parser, Debug)]
#[command(name = "unimap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a denoiser and write a checkpoint plus loss.csv.
    Train(Common),
    /// Invert and reconstruct held-out images under each mode and prompt regime.
    ReconStudy(Common),
    /// Per-image attention discrepancy against clean-prediction discrepancy.
    CorrStudy(Common),
    /// Run the mask-guided editing grid.
    Edit(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training steps for `train`, DDIM steps for the other commands.
    #[arg(long)]
    steps: Option<usize>,
    /// Restrict to one attention mode (standard|uniform|zero).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AttentionMode>,
    #[arg(long)]
    quantile: Option<f32>,
    #[arg(long = "t-mask")]
    t_mask: Option<usize>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<AttentionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve(kind: StudyKind, c: Common) -> Result<StudyConfig> {
    let mut config = match &c.config {
        Some(path) => StudyConfig::load(path)?,
        None => StudyConfig::default(),
    };
    config.apply(
        kind,
        &Overrides {
            seed: c.seed,
            out: c.out,
            steps: c.steps,
            mode: c.mode,
            quantile: c.quantile,
            t_mask: c.t_mask,
            checkpoint: c.checkpoint,
        },
    );
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let out = cmd_train(&resolve(StudyKind::Train, c)?)?;
            let last = out.losses.last().copied().unwrap_or(f32::NAN);
            println!("{} steps, final loss {last:.5}", out.losses.len());
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::ReconStudy(c) => {
            let out = cmd_recon_study(&resolve(StudyKind::ReconStudy, c)?)?;
            print!("{}", out.report.summary());
            println!("run: {}", out.run_dir.display());
        }
        Command::CorrStudy(c) => {
            let out = cmd_correlation_study(&resolve(StudyKind::CorrStudy, c)?)?;
            println!("n = {}, r = {:.4}", out.pairs.len(), out.r);
            println!("run: {}", out.run_dir.display());
        }
        Command::Edit(c) => {
            let out = cmd_edit(&resolve(StudyKind::Edit, c)?)?;
            let hits = out.rows.iter().filter(|r| r.target_hit).count();
            println!("{} edits, {hits} classified as the target", out.rows.len());
            println!("run: {}", out.run_dir.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "argument" => 2,
        "config" => 3,
        "io" => 4,
        "format" => 5,
        "dimension" => 6,
        "numeric" => 7,
        "training" => 8,
        "correlation" => 9,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
