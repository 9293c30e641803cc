use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fluxct_cli::commands::{cmd_closed_loop, cmd_eval, cmd_generate, cmd_loss_study, cmd_train, cmd_transfer_study};
use fluxct_cli::{with_threads, ExperimentConfig, Run};

#[derive(Parser)]
#[command(
    name = "fluxct",
    version,
    about = "Simulated low-exposure CT and learned denoising experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run file; omitted keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the run file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (defaults to available parallelism).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Suppress per-epoch progress.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Clone)]
struct WithWeights {
    #[command(flatten)]
    common: Common,
    /// Trained NNWT weight file.
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantoms and their low/high exposure reconstructions.
    Generate(Common),
    /// Train a denoiser on a generated dataset.
    Train(Common),
    /// Score a trained network on the held-out tiles.
    Eval(WithWeights),
    /// Compare warm-started and scratch training over a grid of set sizes.
    TransferStudy(Common),
    /// Train with MSE and SSIM losses from the same initialization.
    LossStudy(Common),
    /// Validate against network-made ground truth by re-simulating scans.
    ClosedLoop(WithWeights),
    /// Print the full default run file.
    PrintConfig,
}

fn make_run(c: &Common, weights: Option<&PathBuf>) -> Result<Run> {
    let mut config = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    let mut run = Run::new(config, &c.out);
    run.weights = weights.cloned();
    run.verbose = !c.quiet;
    Ok(run)
}

fn execute(command: Command) -> Result<()> {
    let (common, weights) = match &command {
        Command::PrintConfig => {
            print!("{}", ExperimentConfig::default().render());
            return Ok(());
        }
        Command::Eval(w) | Command::ClosedLoop(w) => (w.common.clone(), Some(&w.weights)),
        Command::Generate(c) | Command::Train(c) | Command::TransferStudy(c) | Command::LossStudy(c) => {
            (c.clone(), None)
        }
    };
    let run = make_run(&common, weights)?;
    with_threads(common.threads, || -> Result<()> {
        match command {
            Command::Generate(_) => {
                let rows = cmd_generate(&run)?;
                println!("generated {} images in {}", rows.len(), run.out.display());
            }
            Command::Train(_) => {
                let h = cmd_train(&run)?;
                if let Some(r) = h.last() {
                    println!("final train loss {:.6}", r.train_loss);
                }
            }
            Command::Eval(_) => {
                let r = cmd_eval(&run)?;
                let m = r.mean;
                println!(
                    "{} tiles: PSNR {:.2} -> {:.2} dB, SSIM {:.4} -> {:.4}",
                    r.rows.len(),
                    m.before_psnr,
                    m.after_psnr,
                    m.before_ssim,
                    m.after_ssim
                );
            }
            Command::TransferStudy(_) => {
                for r in cmd_transfer_study(&run)? {
                    println!(
                        "n={:<4} {:<8} SSIM {:.4}  PSNR {:.2}",
                        r.n_train, r.arm, r.mean_ssim, r.mean_psnr
                    );
                }
            }
            Command::LossStudy(_) => {
                for a in cmd_loss_study(&run)? {
                    let m = a.report.mean;
                    println!(
                        "{:<5} PSNR {:.2} -> {:.2} dB, SSIM {:.4} -> {:.4}",
                        a.loss, m.before_psnr, m.after_psnr, m.before_ssim, m.after_ssim
                    );
                }
            }
            Command::ClosedLoop(_) => {
                let r = cmd_closed_loop(&run)?;
                for (name, s) in [("low", r.low), ("high", r.high), ("net", r.net)] {
                    println!("{name:<5} SSIM {:.4}  PSNR {:.2} dB", s.ssim, s.psnr);
                }
            }
            Command::PrintConfig => unreachable!(),
        }
        Ok(())
    })?
    .with_context(|| format!("output directory {}", run.out.display()))
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
