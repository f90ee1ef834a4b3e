//! Command-line pipeline: dataset generation, the two training stages,
//! inference, evaluation and ablations.

pub mod ablate;
pub mod commands;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use slicegap_core::Error;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => CliError::Numerical(e.to_string()),
            Error::Io { .. } | Error::Format { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(
    name = "slicegap",
    version,
    about = "Reduce MRI slice spacing by latent interpolation and 3D super-resolution"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sr.train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a train/test manifest.
    PhantomGen {
        #[arg(long)]
        n: usize,
        /// Volume size as DxHxW.
        #[arg(long, default_value = "33x64x64")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long)]
        noise_sd: Option<f64>,
    },
    /// Train the slice VAE on LR slices of the training set.
    TrainVae {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Up-sample LR volumes along z by latent interpolation.
    UpsampleVae {
        #[arg(long)]
        vae_ckpt: PathBuf,
        /// An SGV header or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "K", alias = "k")]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the 3D refinement generator.
    TrainSr {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Train on VAE-synthesized pairs from this VAE checkpoint.
        #[arg(
            long,
            conflicts_with = "supervised",
            required_unless_present = "supervised"
        )]
        vae_ckpt: Option<PathBuf>,
        /// Train on pairs built from the ground-truth HR volumes instead.
        #[arg(long)]
        supervised: bool,
    },
    /// Apply a trained generator to LR volumes.
    SuperResolve {
        #[arg(long)]
        sr_ckpt: PathBuf,
        /// An SGV header or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Expected ratio; must match the checkpoint when given.
        #[arg(long = "K", alias = "k")]
        k: Option<usize>,
    },
    /// Score methods on the held-out set and write report and panels.
    Evaluate {
        /// Comma list of trilinear, vae, proposed, supervised, truth, or
        /// NAME=DIR to load precomputed predictions `DIR/<id>.json`.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "trilinear,vae,proposed,supervised"
        )]
        methods: Vec<String>,
        #[arg(long)]
        test_manifest: PathBuf,
        #[arg(long = "K", alias = "k")]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vae_ckpt: Option<PathBuf>,
        /// Generator for the `proposed` method.
        #[arg(long)]
        sr_ckpt: Option<PathBuf>,
        /// Generator for the `supervised` method.
        #[arg(long)]
        supervised_ckpt: Option<PathBuf>,
        /// Also write every prediction under `OUT/predictions/<method>/`.
        #[arg(long)]
        save_predictions: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train paired VAEs with and without one loss term and compare them.
    Ablate {
        #[arg(long, value_enum)]
        which: ablate::Which,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::PhantomGen {
            n,
            size,
            seed,
            out,
            train_frac,
            noise_sd,
        } => commands::phantom_gen(n, &size, seed, &out, train_frac, noise_sd).map(|_| ()),
        Command::TrainVae { cfg, resume } => {
            commands::train_vae(&cfg.load()?, resume.as_deref()).map(|_| ())
        }
        Command::UpsampleVae {
            vae_ckpt,
            input,
            k,
            out,
        } => commands::upsample_vae(&vae_ckpt, &input, k, &out),
        Command::TrainSr {
            cfg,
            vae_ckpt,
            supervised: _,
        } => commands::train_sr(&cfg.load()?, vae_ckpt.as_deref()).map(|_| ()),
        Command::SuperResolve {
            sr_ckpt,
            input,
            out,
            k,
        } => commands::super_resolve(&sr_ckpt, &input, &out, k),
        Command::Evaluate {
            methods,
            test_manifest,
            k,
            out,
            vae_ckpt,
            sr_ckpt,
            supervised_ckpt,
            save_predictions,
            cfg,
        } => {
            let run_cfg = cfg.load()?;
            let req = commands::EvalRequest {
                methods,
                test_manifest,
                k,
                out,
                vae_ckpt,
                sr_ckpt,
                supervised_ckpt,
                save_predictions,
            };
            commands::evaluate(&req, &run_cfg).map(|_| ())
        }
        Command::Ablate { which, seeds, cfg } => {
            ablate::ablate(&cfg.load()?, which, seeds).map(|_| ())
        }
    }
}
