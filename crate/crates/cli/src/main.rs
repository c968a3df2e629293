//! `odp`: spectral additivity analysis, synthetic data generation, and
//! training, evaluation and verification of the decomposition head.

mod manifest;
mod models;
mod spectra;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use odp_core::grid_spectra::AvgMode;
use odp_core::model::MaskMode;
use odp_core::trainer::PurificationMode;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_DEGENERATE: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "odp", version, about = "Spectral artifact analysis and orthogonal decomposition training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Log-magnitude spectra, difference maps and the additivity test
    #[command(subcommand)]
    Spectra(SpectraCommand),
    /// Synthetic image corpora and feature datasets
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Train a model on an ODPD dataset
    Train(TrainArgs),
    /// Balanced accuracy and NLL of a model on a dataset
    Eval(EvalArgs),
    /// Silhouette / kNN table of the decomposition components
    Disentangle(DisentangleArgs),
    /// Gradient and orthogonality checks
    #[command(subcommand)]
    Verify(VerifyCommand),
}

#[derive(Args, Debug, Clone)]
pub struct ImageOpts {
    /// Side length after center crop and nearest-neighbor resize
    #[arg(long, default_value_t = odp_core::image_io::DEFAULT_SIDE)]
    pub side: usize,
    /// How per-image spectra are averaged
    #[arg(long, default_value = "mean-log")]
    pub avg_mode: AvgMode,
}

#[derive(Subcommand, Debug)]
pub enum SpectraCommand {
    /// Average spectrum of an image directory
    Compute {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        image: ImageOpts,
    },
    /// Absolute difference of two spectra (ODPS files or image directories)
    Diff {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        image: ImageOpts,
    },
    /// Additivity report for one generator pair, or all pairs under --root
    Additivity {
        #[arg(long, conflicts_with = "root", requires_all = ["gen_a", "gen_b"])]
        real: Option<PathBuf>,
        #[arg(long)]
        gen_a: Option<PathBuf>,
        #[arg(long)]
        gen_b: Option<PathBuf>,
        /// Directory holding `real/` and one subdirectory per generator
        #[arg(long, required_unless_present = "real")]
        root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-bin (P_sum, D_AB) scatter as CSV
        #[arg(long)]
        scatter: bool,
        #[command(flatten)]
        image: ImageOpts,
    },
}

#[derive(Subcommand, Debug)]
pub enum SynthCommand {
    /// PGM corpora: `real/` plus one directory per artifact generator
    Images {
        /// ImageCorpusConfig JSON; defaults to the stripe/spot preset
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fraction of spot gratings moved onto stripe bins (preset only)
        #[arg(long, conflicts_with = "config")]
        overlap: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ODPD train/test splits plus the ground-truth subspace sidecar
    Features {
        /// FeatureDatasetConfig JSON
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long, value_enum, default_value = "both")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
    Both,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TrainConfig JSON; missing fields take defaults, unknown fields are rejected
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mask_mode: Option<MaskMode>,
    #[arg(long)]
    pub purification_mode: Option<PurificationMode>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "hard")]
    pub mask_mode: MaskMode,
}

#[derive(Args, Debug)]
pub struct DisentangleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ground-truth subspace JSON; enables mask IoU
    #[arg(long)]
    pub subspaces: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "hard")]
    pub mask_mode: MaskMode,
    #[arg(long, default_value_t = odp_core::disentangle::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = odp_core::disentangle::DEFAULT_MAX_SAMPLES)]
    pub max_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum VerifyCommand {
    /// Finite-difference check of the full objective with masks frozen
    Grad {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// TrainConfig JSON supplying loss weights and modes
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Check at most this many random entries per tensor
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean normalized projection of the auth-head Jacobian on donor nuisance
    Ortho {
        /// Single checkpoint to measure
        #[arg(long, required_unless_present_all = ["before", "after"], conflicts_with_all = ["before", "after"])]
        model: Option<PathBuf>,
        #[arg(long, requires = "after")]
        before: Option<PathBuf>,
        #[arg(long, requires = "before")]
        after: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "hard")]
        mask_mode: MaskMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<odp_core::Error>() {
            return match e {
                odp_core::Error::Degenerate(_) => EXIT_DEGENERATE,
                odp_core::Error::Format { .. } | odp_core::Error::Image(_) => EXIT_FORMAT,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Spectra(c) => spectra::run(c),
        Command::Synth(c) => synth::run(c),
        Command::Train(a) => models::train(a),
        Command::Eval(a) => models::eval(a),
        Command::Disentangle(a) => models::disentangle(a),
        Command::Verify(c) => models::verify(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
