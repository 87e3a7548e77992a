use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use genconv_cli::commands::{self, VerifyOptions, CHECKPOINT_FILE};
use genconv_cli::{Checkpoint, CliError, Overrides, Preset, Result, RunConfig};

#[derive(Parser)]
#[command(name = "genconv", version, about = "Generative ConvNet: learn, sample, reconstruct, verify")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory of training images (PGM/PPM).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Number of chains (training or sampling).
    #[arg(long, global = true)]
    chains: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn from the training images and write checkpoint, history and samples.
    Train,
    /// Run fresh Langevin chains under a trained model.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Write the auto-encoding reconstruction of each image.
    Reconstruct {
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Run the oracle checks; exit status 1 if any fails.
    Verify {
        /// Check a trained network instead of the built-in tiny one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use an all-zero tiny network.
        #[arg(long)]
        zero: bool,
    },
    /// Print the architecture and parameter counts.
    Info {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let o = Overrides {
        preset: cli.preset,
        seed: cli.seed,
        out_dir: cli.out.clone(),
        data_dir: cli.data.clone(),
        chains: cli.chains,
    };
    match &cli.config {
        Some(p) => RunConfig::load(p, &o),
        None => RunConfig::from_overrides(&o),
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let cfg = run_config(cli)?;
            let run = commands::train(&cfg)?;
            let last = run.outcome.history.last();
            println!(
                "trained {} iterations; final grad_norm {}; wrote {}",
                run.outcome.history.len(),
                last.map_or(f64::NAN, |h| h.grad_norm),
                cfg.out_dir.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Sample { checkpoint, steps } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let chains = cli.chains.unwrap_or(ckpt.rng_streams.len().max(1));
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let images = commands::sample(&ckpt, chains, *steps, cli.seed.unwrap_or(ckpt.seed), &out)?;
            println!("wrote {} samples to {}", images.len(), out.display());
        }
        Command::Reconstruct { checkpoint, images } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            for (p, r) in images.iter().zip(commands::reconstruct(&ckpt, images, &out)?) {
                println!("{}: rmse {r}", p.display());
            }
        }
        Command::Verify { checkpoint, zero } => {
            let opts = VerifyOptions {
                checkpoint: checkpoint.clone(),
                zero: *zero,
                seed: cli.seed.unwrap_or(0),
            };
            let reports = commands::verify(&opts)?;
            for r in &reports {
                println!("{}", r.to_json());
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(CliError::Verification(failed));
            }
        }
        Command::Info { checkpoint } => {
            let (arch, sigma_sq) = match checkpoint {
                Some(p) => {
                    let net = Checkpoint::load(p)?.network()?;
                    (net.arch(), net.sigma_sq())
                }
                None => {
                    let cfg = run_config(cli)?;
                    (cfg.arch(commands::configured_input(&cfg)?)?, cfg.sigma_sq)
                }
            };
            print!("{}", commands::info(&arch, sigma_sq)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
