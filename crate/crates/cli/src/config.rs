//! Per-subcommand JSON configuration documents. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nld_core::net::{Formulation, Hyper, NetKernel, NetworkConfig};
use nld_core::spectrum::ClassificationThresholds;
use nld_core::KernelSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "NLD_OUT";
pub const DEFAULT_OUT_DIR: &str = "nld-out";

/// A scalar weight or a `d x d` channel-mixing matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightConfig {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Sinkhorn,
    Rows,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepperKind {
    Proposed,
    Original,
    Markov,
}

fn rbf_adaptive() -> KernelSpec {
    KernelSpec::rbf_adaptive()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyTheoryConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "defaults::positions")]
    pub num_positions: usize,
    #[serde(default = "defaults::channels")]
    pub num_channels: usize,
    /// Width of the random features the kernel is built from.
    #[serde(default = "defaults::channels")]
    pub feature_channels: usize,
    #[serde(default = "rbf_adaptive")]
    pub kernel: KernelSpec,
    /// Explicit symmetric doubly stochastic kernel; overrides `kernel`.
    #[serde(default)]
    pub kernel_entries: Option<Vec<Vec<f64>>>,
    /// Explicit initial state; overrides the random draw.
    #[serde(default)]
    pub initial: Option<Vec<Vec<f64>>>,
    #[serde(default = "defaults::one")]
    pub weight: f64,
    #[serde(default = "defaults::theory_steps")]
    pub steps: usize,
    #[serde(default = "defaults::decay_tol")]
    pub decay_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub stepper: StepperKind,
    #[serde(default = "defaults::positions")]
    pub num_positions: usize,
    #[serde(default = "defaults::channels")]
    pub num_channels: usize,
    /// Affinity; for fixed-kernel steppers it is evaluated once on the
    /// initial state.
    #[serde(default = "rbf_adaptive")]
    pub kernel: KernelSpec,
    #[serde(default = "defaults::normalization")]
    pub normalization: Normalization,
    #[serde(default)]
    pub kernel_entries: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub initial: Option<Vec<Vec<f64>>>,
    #[serde(default = "defaults::weight")]
    pub weight: WeightConfig,
    #[serde(default = "defaults::theory_steps")]
    pub steps: usize,
    /// Marks a negative control: blow-up is the expected outcome.
    #[serde(default)]
    pub expect_blow_up: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Headerless numeric CSV; relative paths resolve against the config file.
    #[serde(default)]
    pub matrix: Option<PathBuf>,
    /// Checkpoint binary written by `train`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "defaults::top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub thresholds: ClassificationThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "defaults::task_positions")]
    pub num_positions: usize,
    #[serde(default = "defaults::task_channels")]
    pub num_channels: usize,
    #[serde(default = "defaults::classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::train_samples")]
    pub num_samples: usize,
    #[serde(default = "defaults::val_samples")]
    pub val_samples: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default = "defaults::top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub thresholds: ClassificationThresholds,
    /// Optional regression anchor on the final training accuracy.
    #[serde(default)]
    pub min_train_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub formulation: Formulation,
    pub sub_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskConfig,
    /// Trunk and head; its `stages` must be empty; each variant adds one.
    pub network: NetworkConfig,
    pub kernel: NetKernel,
    #[serde(default = "defaults::placement")]
    pub placement: usize,
    pub variants: Vec<VariantConfig>,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default = "defaults::top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub thresholds: ClassificationThresholds,
    /// Train variants concurrently; results are identical either way.
    #[serde(default)]
    pub parallel: bool,
    /// Ratio the original N >= 2 final loss must reach over the proposed one
    /// (unless it diverged).
    #[serde(default = "defaults::degradation_ratio")]
    pub degradation_ratio: f64,
}

mod defaults {
    use super::*;

    pub fn positions() -> usize {
        16
    }
    pub fn channels() -> usize {
        3
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn weight() -> WeightConfig {
        WeightConfig::Scalar(1.0)
    }
    pub fn theory_steps() -> usize {
        200
    }
    pub fn decay_tol() -> f64 {
        1e-6
    }
    pub fn normalization() -> Normalization {
        Normalization::Sinkhorn
    }
    pub fn top_k() -> usize {
        nld_core::spectrum::DEFAULT_TOP_K
    }
    pub fn task_positions() -> usize {
        16
    }
    pub fn task_channels() -> usize {
        4
    }
    pub fn classes() -> usize {
        2
    }
    pub fn train_samples() -> usize {
        512
    }
    pub fn val_samples() -> usize {
        256
    }
    pub fn placement() -> usize {
        1
    }
    pub fn degradation_ratio() -> f64 {
        2.0
    }
}

/// Flags that override the config document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Output directory precedence: `--out`, then the config's `out_dir`, then
/// `NLD_OUT`, then [`DEFAULT_OUT_DIR`].
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>, env: Option<&str>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn parse_config<C: DeserializeOwned>(text: &str, origin: &str) -> Result<C> {
    serde_json::from_str(text).with_context(|| format!("invalid config {origin}"))
}

pub fn load_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    parse_config(&text, &path.display().to_string())
}

/// Fields shared by every config document.
pub trait CommonConfig: Serialize + DeserializeOwned {
    fn seed_mut(&mut self) -> &mut u64;
    fn out_dir_mut(&mut self) -> &mut Option<PathBuf>;

    /// Applies flag overrides and the environment; returns the output directory.
    fn apply(&mut self, overrides: &Overrides, env_out: Option<&str>) -> PathBuf {
        if let Some(seed) = overrides.seed {
            *self.seed_mut() = seed;
        }
        let out = resolve_out_dir(overrides.out.as_deref(), self.out_dir_mut().as_deref(), env_out);
        *self.out_dir_mut() = Some(out.clone());
        out
    }
}

macro_rules! common_config {
    ($($t:ty),*) => {$(
        impl CommonConfig for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.seed
            }
            fn out_dir_mut(&mut self) -> &mut Option<PathBuf> {
                &mut self.out_dir
            }
        }
    )*};
}

common_config!(VerifyTheoryConfig, EvolveConfig, SpectrumConfig, TrainConfig, CompareConfig);
