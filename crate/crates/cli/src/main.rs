use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use polarsynth_cli::commands;
use polarsynth_cli::{thread_cap, CliError, CliResult};

#[derive(Parser)]
#[command(name = "polarsynth", version, about = "Polarization multi-image synthesis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the cell-response surrogate.
    TrainSurrogate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Generate the training set from the built-in synthetic solver.
        #[arg(long, conflicts_with = "dataset")]
        synthetic: bool,
        /// Response dataset file.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Optimize a metasurface design and its digital weights.
    Optimize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from a design checkpoint up to `optimizer.steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a scene through a design: mosaic frame, channels and net images.
    Render {
        checkpoint: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Steering angles in degrees (two-target designs).
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        theta: Vec<f64>,
        /// Sensor PSNR values in dB for noisy renders.
        #[arg(long, value_delimiter = ',')]
        psnr: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Recompute metrics for a checkpoint and apply its thresholds.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the PSF stack tensor and previews for a checkpoint.
    ExportPsf {
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_cap(std::env::var("POLARSYNTH_THREADS").ok().as_deref())? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the worker pool: {e}")))?;
    }
    match cli.command {
        Command::TrainSurrogate { config, synthetic, dataset, seed, out } => {
            let s = commands::train(config.as_deref(), seed, synthetic, dataset.as_deref(), &out)?;
            println!("withheld MAE {:.5} (train {:.5}, {} / {} samples)", s.test_mae, s.train_mae, s.n_train, s.n_test);
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Optimize { config, seed, out, resume } => {
            let s = commands::optimize_cmd(config.as_deref(), seed, &out, resume.as_deref())?;
            for t in &s.targets {
                println!("{}: filter error {:.4}, mSBR {:.4}, alpha {:?}", t.target, t.filter_error, t.msbr, t.alpha);
            }
            println!("efficiency {:.4}", s.efficiency);
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Render { checkpoint, scene, theta, psnr, seed, out } => {
            let s = commands::render(&checkpoint, scene.as_deref(), &theta, &psnr, seed, &out)?;
            for r in &s.psnr {
                println!("{} at {} dB sensor PSNR: net PSNR {:.2} dB", r.image, r.sensor_psnr_db, r.net_psnr_db);
            }
            println!("wrote {} net images to {}", s.nets.len(), out.display());
        }
        Command::Evaluate { checkpoint, out } => {
            let r = commands::evaluate(&checkpoint, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            if !r.failures.is_empty() {
                return Err(CliError::Thresholds(r.failures.join("; ")));
            }
        }
        Command::ExportPsf { checkpoint, out } => {
            let p = commands::export_psf(&checkpoint, &out)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
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
