//! TOML experiment configuration. Every section is optional; flags given on
//! the command line win over values read here.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msm_core::{FitConfig, MatchMode, SynthSpec};
use serde::de::DeserializeOwned;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed shared by `generate` and `fit`.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    /// A [`SynthSpec`] without its `seed`.
    pub generate: Option<toml::Table>,
    /// A [`FitConfig`] without its `seed`, plus `data`.
    pub fit: Option<toml::Table>,
    pub eval: Option<EvalSection>,
    pub segment: Option<SegmentSection>,
    pub graph: Option<GraphSection>,
    pub ingest: Option<IngestSection>,
    #[serde(rename = "resolve-affine", alias = "resolve_affine")]
    pub resolve_affine: Option<AffineSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    TransitionL2,
    Chain,
    SegmentationF1,
    Loglik,
}

pub const ALL_METRICS: [EvalMetric; 4] = [
    EvalMetric::TransitionL2,
    EvalMetric::Chain,
    EvalMetric::SegmentationF1,
    EvalMetric::Loglik,
];

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub truth: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub samples: Option<usize>,
    #[serde(rename = "match")]
    pub match_mode: Option<MatchMode>,
    pub metrics: Option<Vec<EvalMetric>>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub dates: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub tau: Option<f64>,
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub input: Option<PathBuf>,
    pub normalize: Option<bool>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineSection {
    pub pairs: Option<PathBuf>,
    pub model1: Option<PathBuf>,
    pub model2: Option<PathBuf>,
    pub samples: Option<usize>,
    #[serde(rename = "match")]
    pub match_mode: Option<MatchMode>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        section(self.generate.as_ref(), "generate", &[])
    }

    /// Fit settings and the optional `data` path of the `[fit]` section.
    pub fn fit_config(&self) -> Result<(FitConfig, Option<PathBuf>)> {
        let data = match self.fit.as_ref().and_then(|t| t.get("data")) {
            None => None,
            Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => bail!("[fit] data must be a path string"),
        };
        Ok((section(self.fit.as_ref(), "fit", &["data"])?, data))
    }
}

fn section<T: DeserializeOwned + Default>(table: Option<&toml::Table>, name: &str, extra: &[&str]) -> Result<T> {
    let Some(table) = table else {
        return Ok(T::default());
    };
    if table.contains_key("seed") {
        bail!("[{name}] may not set `seed`; use the top-level `seed` or --seed");
    }
    let mut table = table.clone();
    for key in extra {
        table.remove(*key);
    }
    toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("invalid [{name}] section"))
}

/// Fail with a usage error when a required path is missing.
pub fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let Some(p) = path else {
        bail!("missing {what}");
    };
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(p)
}
