use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tc_cli::config::{ExperimentConfig, ExperimentKind};
use tc_cli::experiments::{run_inpainting, run_phase_transition, run_synthetic};

/// Tensor completion experiment driver.
#[derive(Parser)]
#[command(name = "tc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic recovery curves on planted low-rank tensors.
    Synth(Common),
    /// Success-rate grid over (rank, sampling probability).
    Phase(Common),
    /// Image inpainting through the fifth-order reshape.
    Inpaint(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rayon worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::Synth(c) => (ExperimentKind::Synthetic, c),
        Command::Phase(c) => (ExperimentKind::Phase, c),
        Command::Inpaint(c) => (ExperimentKind::Inpaint, c),
    };
    match run(kind, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(kind: ExperimentKind, common: &Common) -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if cfg.experiment != kind {
        return Err(format!(
            "config is a {:?} experiment, but the {kind:?} subcommand was invoked",
            cfg.experiment
        )
        .into());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out_dir = common.out.clone().unwrap_or_else(|| {
        PathBuf::from(if cfg.out_dir.is_empty() {
            "out"
        } else {
            &cfg.out_dir
        })
    });
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }

    match kind {
        ExperimentKind::Synthetic => {
            let summary = run_synthetic(&cfg, &out_dir)?;
            let converged = summary
                .runs
                .iter()
                .filter(|r| r.status == tc_core::solver::SolveStatus::Converged)
                .count();
            println!(
                "synthetic: {} runs ({} converged) -> {}",
                summary.runs.len(),
                converged,
                out_dir.display()
            );
        }
        ExperimentKind::Phase => {
            let summary = run_phase_transition(&cfg, &out_dir)?;
            println!(
                "phase: {} cells x {} trials -> {}",
                summary.cells.len(),
                cfg.trials,
                out_dir.display()
            );
            for c in &summary.cells {
                println!(
                    "  r={:>2} p={:<5} success_rate={:.2}",
                    c.rank, c.p, c.success_rate
                );
            }
        }
        ExperimentKind::Inpaint => {
            let summary = run_inpainting(&cfg, &out_dir)?;
            println!(
                "inpaint[{}]: tensor dims {:?} -> {}",
                summary.topology,
                summary.tensor_dims,
                out_dir.display()
            );
            if summary.reshape.padded() {
                println!(
                    "  padded {}x{} -> {}x{} (edge replication, cropped on output)",
                    summary.reshape.orig_h,
                    summary.reshape.orig_w,
                    summary.reshape.padded_h,
                    summary.reshape.padded_w
                );
            }
            for r in &summary.runs {
                println!(
                    "  trial {}: psnr {:.2} dB ({:?})",
                    r.trial, r.psnr_db, r.status
                );
            }
        }
    }
    Ok(())
}
