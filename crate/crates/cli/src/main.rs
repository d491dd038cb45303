use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use otrecon::{Ablation, MaskScheme, TrainConfig};
use otrecon_cli::{
    cmd_evaluate, cmd_generate_data, cmd_train, cmd_verify_theorem, cmd_write_config, configure_threads, exit_code,
    CommandResult, EvalOptions, Overrides, TrainOptions, VerifyOptions,
};

/// Joint undersampled MRI reconstruction with optimal-transport guided
/// cross-modal synthesis.
#[derive(Parser)]
#[command(name = "otrecon", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    FullScale,
}

fn parse_mask(s: &str) -> Result<MaskScheme, String> {
    s.parse().map_err(|e: otrecon::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: otrecon::Error| e.to_string())
}

#[derive(clap::Args)]
struct MaskArgs {
    /// Sampling scheme: random, equispaced or radial.
    #[arg(long, value_parser = parse_mask)]
    mask: Option<MaskScheme>,
    /// Fraction of k-space kept, in (0, 1].
    #[arg(long)]
    ratio: Option<f64>,
    /// Seed for the mask (and, when training, for everything else).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write paired T1/T2 phantoms, their displacement fields and a manifest.
    GenerateData {
        #[arg(long, default_value_t = 40)]
        n_pairs: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Largest displacement magnitude in pixels.
        #[arg(long, default_value_t = 3.0)]
        max_disp: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a preset training configuration.
    WriteConfig {
        #[arg(long, value_enum, default_value_t = Preset::Toy)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        mask: MaskArgs,
        /// Total number of training steps.
        #[arg(long)]
        steps: Option<usize>,
        /// full, without_cms or without_isa.
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint against zero-filling on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        mask: MaskArgs,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        /// Configuration whose network the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write per-sample error maps.
        #[arg(long)]
        error_maps: bool,
    },
    /// Check the L1 gap bound on reconstructed samples.
    VerifyTheorem {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n_samples: usize,
        #[command(flatten)]
        mask: MaskArgs,
        /// Debugging aid: use the synthesized image as the reconstruction.
        #[arg(long)]
        force_equal: bool,
    },
}

fn run(command: Command) -> CommandResult {
    match command {
        Command::GenerateData { n_pairs, size, max_disp, out, seed } => cmd_generate_data(n_pairs, size, max_disp, &out, seed),
        Command::WriteConfig { preset, out } => {
            let cfg = match preset {
                Preset::Toy => TrainConfig::toy(),
                Preset::FullScale => TrainConfig::full_scale(),
            };
            cmd_write_config(&cfg, &out)
        }
        Command::Train { config, data, out, mask, steps, ablation, resume } => {
            let overrides = Overrides { seed: mask.seed, steps, ablation, mask: mask.mask, ratio: mask.ratio };
            cmd_train(&config, &data, &out, &TrainOptions { overrides, resume })
        }
        Command::Evaluate { checkpoint, data, out, mask, ablation, config, error_maps } => {
            let options = EvalOptions { mask: mask.mask, ratio: mask.ratio, seed: mask.seed, ablation, config, error_maps };
            cmd_evaluate(&checkpoint, &data, &out, &options)
        }
        Command::VerifyTheorem { checkpoint, data, out, n_samples, mask, force_equal } => {
            let options = VerifyOptions { mask: mask.mask, ratio: mask.ratio, seed: mask.seed, force_equal };
            cmd_verify_theorem(&checkpoint, &data, &out, n_samples, &options)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e) as u8);
    }
    let result = run(cli.command);
    if result.is_success() {
        println!("{}", result.summary.trim_end());
    } else {
        eprintln!("error: {}", result.summary.trim_end());
    }
    ExitCode::from(result.exit_code as u8)
}
