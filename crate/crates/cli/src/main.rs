mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use atlasseg_core::{Error, ErrorKind};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "atlasseg", version, about = "Atlas-based segmentation by learned deformable registration")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by the commands that read a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.optimizer.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Master seed. Replaces the synthetic-data seed, the augmentation seed and the
    /// trial seeds (seed, seed+1, ...).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop and normalize every case of a manifest onto the atlas grid.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network per seed and evaluate the selected models on the test split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trials trained concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Loss variant (vxm, new, iac, segthor, hkits21).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Number of trials; seeds run from the master seed (or 0) upwards.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Warp the atlas segmentation onto one image.
    Segment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained checkpoint; not used with --direct.
        #[arg(long, required_unless_present = "direct")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Directory holding atlas_image.dvol and atlas_mask.dvol.
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optimize the field for this image directly instead of running a network.
        #[arg(long)]
        direct: bool,
    },
    /// Score predicted masks (`PRED/<id>/mask.dvol`) against `GT/<id>_mask.dvol`.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Directory of `<id>_exclusion.dvol` masks.
        #[arg(long)]
        exclusion: Option<PathBuf>,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Method label written into the records.
        #[arg(long, default_value = "model")]
        method: String,
        /// Seed label written into the records.
        #[arg(long, default_value_t = 0)]
        trial_seed: u64,
    },
    /// Paired t-test between two record files on per-case medians over seeds.
    Ttest {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// dice or hd95.
        #[arg(long)]
        metric: String,
    },
    /// Finite-difference gradient checks; exits 3 when any check fails.
    Gradcheck {
        /// Check a single op or loss (see --list).
        #[arg(long, conflicts_with = "all")]
        op: Option<String>,
        #[arg(long)]
        all: bool,
        /// Print the available names.
        #[arg(long)]
        list: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Median-of-trials summary and pairwise tests over record files.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Method pair `LEFT:RIGHT` to test; default is every pair.
        #[arg(long = "pair")]
        pairs: Vec<String>,
    },
    /// Show or check run configurations.
    Config {
        /// Print the default configuration as JSON.
        #[arg(long)]
        dump_defaults: bool,
        /// Print every config key with its default.
        #[arg(long)]
        keys: bool,
        /// Load, apply overrides, validate and print the effective configuration.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    }
}

fn report_error(kind: ErrorKind, message: &str) -> ExitCode {
    let body = serde_json::json!({ "error": kind_name(kind), "code": exit_code(kind), "message": message });
    eprintln!("{body}");
    ExitCode::from(exit_code(kind))
}

fn main() -> ExitCode {
    let keys = config::key_listing();
    let mut cmd = Cli::command();
    for name in ["synth", "preprocess", "train", "segment", "eval", "config"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(keys.clone()));
    }
    let cmd = cmd.after_long_help(keys.clone());
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report_error(ErrorKind::Usage, e.to_string().trim());
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report_error(f.kind, &f.message),
    }
}

pub fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
