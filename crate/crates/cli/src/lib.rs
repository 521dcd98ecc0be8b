//! The `msm` command-line tool.
//!
//! Each subcommand reads its settings from the optional `--config` TOML file,
//! applies command-line overrides and calls into `msm_core`. Exit status is 0
//! on success, 1 for usage, configuration and I/O errors and 2 when the
//! numerics fail.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msm_core::MsmError;
use serde::de::DeserializeOwned;

pub mod commands;
pub mod config;
pub mod ingest;

#[derive(Debug, Parser)]
#[command(name = "msm", version, about = "Identifiable Markov switching models")]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (required by generate and fit, here or in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (default `.`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a ground-truth model and a labelled dataset.
    Generate(GenerateArgs),
    /// Estimate a model from sequences.
    Fit(FitArgs),
    /// Compare an estimated model with a reference model.
    Eval(EvalArgs),
    /// Posterior marginals and MAP states.
    Segment(SegmentArgs),
    /// Regime-dependent causal graphs.
    Graph(GraphArgs),
    /// Convert an external CSV series to the sequence format.
    Ingest(IngestArgs),
    /// Fit the affine map between two latent spaces.
    ResolveAffine(AffineArgs),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    let norm = s.trim().to_ascii_lowercase().replace('-', "_");
    serde_json::from_value(serde_json::Value::String(norm)).map_err(|e| e.to_string())
}

/// Options shared by the transition-mean constructors.
#[derive(Debug, Default, Clone, Args)]
pub struct TransitionArgs {
    /// linear | polynomial | mlp | locally_connected_mlp
    #[arg(long, value_parser = parse_enum::<msm_core::TransitionKind>)]
    pub kind: Option<msm_core::TransitionKind>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// softplus | cosine | leaky_relu
    #[arg(long, value_parser = parse_enum::<msm_core::Activation>)]
    pub activation: Option<msm_core::Activation>,
    #[arg(long)]
    pub interactions: Option<usize>,
}

#[derive(Debug, Default, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[command(flatten)]
    pub transition: TransitionArgs,
    #[arg(long)]
    pub p_stay: Option<f64>,
    #[arg(long)]
    pub first_layer_gain: Option<f64>,
    #[arg(long)]
    pub min_edge_weight: Option<f64>,
    /// Also write observations through a random emission network.
    #[arg(long)]
    pub emission_dim: Option<usize>,
}

#[derive(Debug, Default, Clone, Args)]
pub struct FitArgs {
    /// Sequence CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[command(flatten)]
    pub transition: TransitionArgs,
    /// diagonal | full
    #[arg(long, value_parser = parse_enum::<msm_core::CovarianceKind>)]
    pub covariance: Option<msm_core::CovarianceKind>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// adam | sgd
    #[arg(long, value_parser = parse_enum::<msm_core::Optimizer>)]
    pub optimizer: Option<msm_core::Optimizer>,
    #[arg(long)]
    pub plateau_tol: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Default, Clone, Args)]
pub struct EvalArgs {
    /// Reference (ground-truth) model.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Estimated model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Held-out sequences; labels enable segmentation F1.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Monte-Carlo samples for the L2 distances.
    #[arg(long)]
    pub samples: Option<usize>,
    /// auto | exhaustive | greedy
    #[arg(long = "match", value_parser = parse_enum::<msm_core::MatchMode>)]
    pub match_mode: Option<msm_core::MatchMode>,
}

#[derive(Debug, Default, Clone, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Date sidecar written by `ingest`; adds a per-month posterior table.
    #[arg(long)]
    pub dates: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Edge threshold on the averaged absolute Jacobian.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Locally connected reference model; its masks are scored against the
    /// extracted graphs.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Keep raw values instead of z-scoring each column.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Default, Clone, Args)]
pub struct AffineArgs {
    /// CSV rows `src1..srcm,dst1..dstm`, optional header.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Reference model; with `--model2`, reports the equivalence error.
    #[arg(long)]
    pub model1: Option<PathBuf>,
    #[arg(long)]
    pub model2: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long = "match", value_parser = parse_enum::<msm_core::MatchMode>)]
    pub match_mode: Option<msm_core::MatchMode>,
}

/// Exit status for a failed command.
pub fn exit_status(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<MsmError>().is_some_and(MsmError::is_numerical));
    if numerical {
        2
    } else {
        1
    }
}

/// Parse `args` and run; the process entry point.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
