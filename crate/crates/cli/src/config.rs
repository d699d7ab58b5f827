//! The experiment configuration file and its command-line overrides.
//!
//! Configs are flat TOML: every model knob is a top-level key with the same
//! name as the corresponding [`RunConfig`] field, next to the dataset keys
//! (`data_dir`, `normalize`, split counts) and the experiment keys (`seeds`,
//! `ablation`). `--set key=value` overrides are applied on the raw TOML
//! table before deserialization, so they go through exactly the same typing
//! and unknown-key checks as the file itself.

use std::path::Path;

use glearn_core::engine::{ablation_mode, AblationMode, RunConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Feature scaling applied right after the feature file is read.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Normalize {
    /// Per-column zero mean, unit variance; the default for tabular data.
    Standardize,
    /// Per-row unit L1 norm; the convention for bag-of-words features.
    #[serde(rename = "l1")]
    L1,
    /// Leave features exactly as stored.
    None,
}

/// Model variant selector mirroring the ablation study.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoGraphReg,
    NoIterative,
}

impl From<Ablation> for AblationMode {
    fn from(a: Ablation) -> AblationMode {
        match a {
            Ablation::Full => AblationMode::Full,
            Ablation::NoGraphReg => AblationMode::NoGraphReg,
            Ablation::NoIterative => AblationMode::NoIterative,
        }
    }
}

/// One fully resolved experiment: dataset, model knobs, seeds, variant.
///
/// Reports embed this struct verbatim, so a saved report plus the seed list
/// is enough to reproduce every run it describes.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding `features.csv`, `labels.csv`, and optionally
    /// `edges.txt` and `splits/`.
    pub data_dir: String,
    /// Display name; defaults to the last component of `data_dir`.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_normalize")]
    pub normalize: Normalize,
    /// Split sizes, used when the dataset has no `splits/` directory.
    #[serde(default)]
    pub split_train: usize,
    #[serde(default)]
    pub split_dev: usize,
    #[serde(default)]
    pub split_test: usize,
    /// Seed of the stratified split draw (fixed across run seeds, so every
    /// variant trains on identical masks).
    #[serde(default)]
    pub split_seed: u64,

    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::eta")]
    pub eta: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::knn")]
    pub knn: usize,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::stop_delta")]
    pub stop_delta: f64,
    #[serde(default = "defaults::max_iters")]
    pub max_iters: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default = "defaults::iter_dropout")]
    pub iter_dropout: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,

    /// One training run per seed; reports average over them.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_ablation")]
    pub ablation: Ablation,
}

fn default_normalize() -> Normalize {
    Normalize::Standardize
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_ablation() -> Ablation {
    Ablation::Full
}

/// Model-knob defaults, shared with [`RunConfig::default`] so a config file
/// that sets nothing trains the same model the library would by default.
mod defaults {
    use glearn_core::engine::RunConfig;

    macro_rules! forward {
        ($($name:ident: $ty:ty),* $(,)?) => {
            $(pub fn $name() -> $ty { RunConfig::default().$name })*
        };
    }

    forward! {
        lambda: f64, eta: f64, alpha: f64, beta: f64, gamma: f64,
        knn: usize, epsilon: f64, heads: usize, stop_delta: f64,
        max_iters: usize, hidden: usize, dropout: f64, iter_dropout: f64,
        learning_rate: f64, weight_decay: f64, max_epochs: usize,
        patience: usize,
    }
}

impl ExperimentConfig {
    /// Reads a config file and applies `key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        for kv in overrides {
            let (key, value) = parse_override(kv)?;
            table.insert(key, value);
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.data_dir.is_empty() {
            return Err(CliError::usage("data_dir must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::usage("seeds must list at least one seed"));
        }
        // Model-knob ranges are the library's call; fail fast here rather
        // than after the dataset loads.
        self.run_config(self.seeds[0]).validate().map_err(CliError::from)
    }

    /// Display name of the dataset.
    pub fn dataset_name(&self) -> String {
        match &self.name {
            Some(n) => n.clone(),
            None => Path::new(&self.data_dir)
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.data_dir.clone()),
        }
    }

    /// The library run configuration for one seed, with the configured
    /// ablation already applied.
    pub fn run_config(&self, seed: u64) -> RunConfig {
        let base = RunConfig {
            lambda: self.lambda,
            eta: self.eta,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            knn: self.knn,
            epsilon: self.epsilon,
            heads: self.heads,
            stop_delta: self.stop_delta,
            max_iters: self.max_iters,
            iterate: true,
            hidden: self.hidden,
            dropout: self.dropout,
            iter_dropout: self.iter_dropout,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        };
        ablation_mode(&base, self.ablation.into())
    }

    /// The plain-GCN reference for one seed: the starting graph is used
    /// as-is, nothing about the structure is learned or refined.
    pub fn gcn_reference(&self, seed: u64) -> RunConfig {
        RunConfig {
            lambda: 1.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            iterate: false,
            ..self.run_config(seed)
        }
    }
}

/// Splits `key=value` and parses the value as TOML, falling back to a plain
/// string so `--set ablation=no-iterative` works without shell quoting.
fn parse_override(kv: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override '{kv}' is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(CliError::usage(format!("override '{kv}' has an empty key")));
    }
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .or_else(|_| format!("v = {raw:?}").parse::<toml::Table>())
        .map_err(|e| CliError::usage(format!("override '{kv}': {e}")))?;
    Ok((key.to_owned(), parsed["v"].clone()))
}
