use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pairsearch_core::baselines::Strategy;
use pairsearch_core::embed::TrainConfig;
use pairsearch_core::learn2search::{power_schedule, EmbeddingMode};
use pairsearch_core::search::StopRule;
use serde::{Deserialize, Serialize};

/// Largest catalog the scaling suite accepts without `allow_large`.
pub const DEFAULT_MAX_N: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Scaling,
    Blind,
    Convergence,
    Calibrate,
    EmbedEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dataset {
    /// Uniform points in `[0, 1]^d`.
    Hypercube { n: usize, d: usize },
    /// An object CSV (`id,label[,image_ref],f1,…`); features are
    /// standardised per column unless disabled.
    Csv {
        path: PathBuf,
        #[serde(default = "yes")]
        standardize: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlindSpec {
    pub episodes: usize,
    /// Episode counts after which the embedding is retrained.
    pub schedule: Vec<usize>,
    pub modes: Vec<EmbeddingMode>,
}

impl Default for BlindSpec {
    fn default() -> Self {
        BlindSpec {
            episodes: 4000,
            schedule: power_schedule(13),
            modes: vec![EmbeddingMode::GaussEmbed, EmbeddingMode::GroundTruth, EmbeddingMode::RandomFixed],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceSpec {
    pub target: f64,
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub steps: usize,
    pub runs: usize,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        ConvergenceSpec { target: 3.0, prior_mean: 0.0, prior_variance: 1.0, steps: 10_000, runs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSpec {
    /// Triplets to simulate when no file is given.
    pub triplets: usize,
    /// Existing triplet log (`{i, j, k, source, ts}` per line).
    pub triplet_file: Option<PathBuf>,
    pub holdout_fraction: f64,
    /// Variance share that defines the estimated dimension.
    pub energy: f64,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        EmbedSpec { triplets: 10_000, triplet_file: None, holdout_fraction: 0.1, energy: 0.98 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub suite: Suite,
    pub dataset: Dataset,
    /// Catalog sizes for the scaling suite (synthetic data only).
    pub sizes: Vec<usize>,
    pub allow_large: bool,
    pub strategies: Vec<Strategy>,
    /// Target disagreement rate between noisy and noiseless answers.
    pub flip_rate: f64,
    /// Fixed answer noise; overrides the calibration.
    pub sigma_eps: Option<f64>,
    pub episodes: usize,
    pub seed: u64,
    pub window: usize,
    pub stop_rule: StopRule,
    pub max_steps: Option<usize>,
    pub blind: BlindSpec,
    pub convergence: ConvergenceSpec,
    pub embed: EmbedSpec,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            suite: Suite::Scaling,
            dataset: Dataset::Hypercube { n: 1000, d: 5 },
            sizes: vec![50, 100, 1000, 10_000],
            allow_large: false,
            strategies: Strategy::ALL.to_vec(),
            flip_rate: 0.10,
            sigma_eps: None,
            episodes: 200,
            seed: 0,
            window: 1000,
            stop_rule: StopRule::ArgmaxPosterior,
            max_steps: None,
            blind: BlindSpec::default(),
            convergence: ConvergenceSpec::default(),
            embed: EmbedSpec::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("results"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).context("invalid experiment config")?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            bail!("episodes must be positive");
        }
        if self.suite == Suite::Blind && (self.window == 0 || self.window > self.blind.episodes) {
            bail!("window {} must be within 1..={} blind episodes", self.window, self.blind.episodes);
        }
        if !(self.flip_rate >= 0.0 && self.flip_rate < 0.5) {
            bail!("flip rate {} must be in [0, 0.5)", self.flip_rate);
        }
        if let Some(&n) = self.sizes.iter().find(|&&n| n < 4) {
            bail!("catalog size {n} is too small");
        }
        if !self.allow_large {
            if let Some(&n) = self.sizes.iter().find(|&&n| n > DEFAULT_MAX_N) {
                bail!("catalog size {n} exceeds {DEFAULT_MAX_N}; set allow_large to run it");
            }
        }
        if !(self.embed.holdout_fraction > 0.0 && self.embed.holdout_fraction < 1.0) {
            bail!("holdout fraction must be in (0, 1)");
        }
        self.train.validate()?;
        Ok(())
    }
}
