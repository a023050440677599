//! Experiment configuration: one TOML file with dotted sections describes
//! the dataset and split, the architecture, per-step optimizer settings, the
//! covariance grid, DGL flags, monitoring cadence, seeds, and the output
//! directory. Unknown keys are errors everywhere. The resolved config (after
//! command-line overrides) is serialized back to TOML, written next to the
//! metrics, and hashed with FNV-1a so runs can be tied to exact settings.

use crate::{fnv1a64, CliError};
use data_io::{SplitSpec, TargetEncoding};
use nn::LayerActivation;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Blobs,
    Moons,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub dir: Option<PathBuf>,
    pub split: SplitSpec,
    #[serde(default = "default_encoding")]
    pub encoding: TargetEncoding,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub pool_per_class: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_blob_classes")]
    pub blob_classes: usize,
    #[serde(default = "default_blob_dim")]
    pub blob_dim: usize,
}

fn default_encoding() -> TargetEncoding {
    TargetEncoding::ZeroMeanOneHot
}

fn default_noise() -> f64 {
    0.08
}

fn default_blob_classes() -> usize {
    2
}

fn default_blob_dim() -> usize {
    8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub hidden_layers: usize,
    pub width: usize,
    #[serde(default = "default_activation")]
    pub activation: LayerActivation,
    #[serde(default = "default_sigma_w2")]
    pub sigma_w2: f64,
    #[serde(default)]
    pub sigma_b2: f64,
}

fn default_activation() -> LayerActivation {
    LayerActivation::ReLU
}

fn default_sigma_w2() -> f64 {
    2.0
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    pub init: u64,
    pub shuffle: u64,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        Self {
            init: 1,
            shuffle: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E2eConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Optional small grids; when non-empty, every (lr, wd) pair is trained
    /// and the one with minimal validation MSE is reported.
    #[serde(default)]
    pub lr_grid: Vec<f64>,
    #[serde(default)]
    pub wd_grid: Vec<f64>,
}

fn default_optimizer() -> OptimizerChoice {
    OptimizerChoice::Sgd
}

fn default_batch_size() -> usize {
    64
}

fn default_patience() -> usize {
    20
}

impl Default for E2eConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerChoice::Sgd,
            lr: 0.05,
            weight_decay: 0.0,
            epochs: 200,
            batch_size: default_batch_size(),
            patience: default_patience(),
            lr_grid: Vec::new(),
            wd_grid: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DglConfig {
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub include_variance: bool,
    /// Rows per DGL evaluation; 0 selects the default rule (full batch up to
    /// 2000 rows, 1000 rows beyond that).
    #[serde(default)]
    pub minibatch: usize,
}

fn default_jitter() -> f64 {
    1e-6
}

impl Default for DglConfig {
    fn default() -> Self {
        Self {
            jitter: default_jitter(),
            include_variance: false,
            minibatch: 0,
        }
    }
}

impl DglConfig {
    /// Rows used for one DGL evaluation on an n-row set.
    pub fn batch_limit(&self, n: usize) -> usize {
        if self.minibatch > 0 {
            self.minibatch.min(n)
        } else if n <= 2000 {
            n
        } else {
            1000
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelGridConfig {
    pub sigma_w2: Vec<f64>,
    pub sigma_b2: Vec<f64>,
}

impl Default for KernelGridConfig {
    fn default() -> Self {
        Self {
            sigma_w2: vec![0.5, 1.0, 1.5, 2.0, 2.5],
            sigma_b2: vec![0.0, 0.05, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    #[serde(default = "default_interval")]
    pub interval: usize,
}

fn default_interval() -> usize {
    10
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            interval: default_interval(),
        }
    }
}

/// Per-layer covariance parameters supplied directly in the config, for
/// LEGO runs that skip the fitting step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpecEntry {
    pub sigma_w2: f64,
    pub sigma_b2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegoConfig {
    #[serde(default = "default_lego_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_epochs_per_layer")]
    pub epochs_per_layer: usize,
    #[serde(default = "default_clf_optimizer")]
    pub classifier_optimizer: OptimizerChoice,
    #[serde(default = "default_lego_lr")]
    pub classifier_lr: f64,
    #[serde(default)]
    pub classifier_weight_decay: f64,
    #[serde(default = "default_clf_epochs")]
    pub classifier_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub classifier_batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub specs: Option<Vec<LayerSpecEntry>>,
}

fn default_lego_lr() -> f64 {
    1e-3
}

fn default_epochs_per_layer() -> usize {
    80
}

fn default_clf_optimizer() -> OptimizerChoice {
    OptimizerChoice::Adam
}

fn default_clf_epochs() -> usize {
    300
}

impl Default for LegoConfig {
    fn default() -> Self {
        Self {
            lr: default_lego_lr(),
            weight_decay: 0.0,
            epochs_per_layer: default_epochs_per_layer(),
            classifier_optimizer: default_clf_optimizer(),
            classifier_lr: default_lego_lr(),
            classifier_weight_decay: 0.0,
            classifier_epochs: default_clf_epochs(),
            classifier_batch_size: default_batch_size(),
            patience: default_patience(),
            specs: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbConfig {
    #[serde(default = "default_sigma_eps")]
    pub sigma_eps: Vec<f64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_subset")]
    pub subset: usize,
}

fn default_sigma_eps() -> Vec<f64> {
    vec![0.1, 0.25, 0.5]
}

fn default_bins() -> usize {
    64
}

fn default_subset() -> usize {
    512
}

impl Default for IbConfig {
    fn default() -> Self {
        Self {
            sigma_eps: default_sigma_eps(),
            bins: default_bins(),
            subset: default_subset(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub e2e: E2eConfig,
    #[serde(default)]
    pub dgl: DglConfig,
    #[serde(default)]
    pub kernel_grid: KernelGridConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub lego: LegoConfig,
    #[serde(default)]
    pub ib: IbConfig,
    pub output: OutputConfig,
}

/// Command-line overrides applied on top of the config file. The seed
/// override rebases the run-level seeds (init and shuffle) while leaving the
/// split seed alone, so the data identity is stable across reseeded runs.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seeds.init = seed;
            self.seeds.shuffle = seed.wrapping_add(1);
        }
        if let Some(out) = &overrides.out {
            self.output.dir = out.clone();
        }
        if let Some(dir) = &overrides.dataset_dir {
            self.dataset.dir = Some(dir.clone());
        }
    }

    /// The resolved TOML snapshot written next to the metrics.
    pub fn resolved(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// FNV-1a hash of the resolved snapshot, reported in every summary.
    pub fn hash(&self) -> Result<String, CliError> {
        Ok(format!("{:016x}", fnv1a64(self.resolved()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if matches!(self.dataset.kind, DatasetKind::Mnist | DatasetKind::Cifar10)
            && self.dataset.dir.is_none()
        {
            return bad("dataset.dir is required for on-disk datasets".into());
        }
        if self.dataset.split.train_size < 2 {
            return bad("dataset.split.train_size must be at least 2".into());
        }
        if self.architecture.hidden_layers == 0 || self.architecture.width == 0 {
            return bad("architecture needs at least one hidden layer and width 1".into());
        }
        if !(self.architecture.sigma_w2 > 0.0) || self.architecture.sigma_b2 < 0.0 {
            return bad("architecture.sigma_w2 must be positive, sigma_b2 nonnegative".into());
        }
        for (name, lr) in [("e2e.lr", self.e2e.lr), ("lego.lr", self.lego.lr)] {
            if !lr.is_finite() || lr < 0.0 {
                return bad(format!("{name} must be finite and nonnegative"));
            }
        }
        if self.e2e.epochs == 0 || self.e2e.batch_size == 0 {
            return bad("e2e.epochs and e2e.batch_size must be positive".into());
        }
        if !(self.dgl.jitter > 0.0) {
            return bad("dgl.jitter must be positive".into());
        }
        if self.kernel_grid.sigma_w2.is_empty() || self.kernel_grid.sigma_b2.is_empty() {
            return bad("kernel_grid lists must be non-empty".into());
        }
        if self.kernel_grid.sigma_w2.iter().any(|&v| !(v > 0.0))
            || self.kernel_grid.sigma_b2.iter().any(|&v| v < 0.0)
        {
            return bad("kernel_grid sigma_w2 must be positive, sigma_b2 nonnegative".into());
        }
        if self.monitor.interval == 0 {
            return bad("monitor.interval must be positive".into());
        }
        if self.lego.epochs_per_layer == 0
            || self.lego.classifier_epochs == 0
            || self.lego.classifier_batch_size == 0
        {
            return bad("lego epoch and batch settings must be positive".into());
        }
        if let Some(specs) = &self.lego.specs {
            if specs.len() != self.architecture.hidden_layers {
                return bad(format!(
                    "lego.specs has {} entries for {} hidden layers",
                    specs.len(),
                    self.architecture.hidden_layers
                ));
            }
            if specs.iter().any(|s| !(s.sigma_w2 > 0.0) || s.sigma_b2 < 0.0) {
                return bad("lego.specs sigma_w2 must be positive, sigma_b2 nonnegative".into());
            }
        }
        if self.ib.sigma_eps.iter().any(|&s| !(s > 0.0)) || self.ib.bins == 0 {
            return bad("ib.sigma_eps must be positive and ib.bins nonzero".into());
        }
        if self.output.dir.as_os_str().is_empty() {
            return bad("output.dir must be set".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        kind = "blobs"
        [dataset.split]
        train_size = 64
        balanced = true
        seed = 1
        [architecture]
        hidden_layers = 2
        width = 16
        [output]
        dir = "runs/blobs"
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config = ExperimentConfig::from_str(MINIMAL).unwrap();
        assert_eq!(config.e2e.batch_size, 64);
        assert_eq!(config.seeds.init, 1);
        assert_eq!(config.kernel_grid.sigma_w2.len(), 5);
        assert_eq!(config.dataset.encoding, TargetEncoding::ZeroMeanOneHot);
        assert!(!config.dataset.standardize);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("width = 16", "width = 16\nwdith = 3");
        let err = ExperimentConfig::from_str(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("wdith"));
    }

    #[test]
    fn on_disk_datasets_require_a_directory() {
        let text = MINIMAL.replace("kind = \"blobs\"", "kind = \"mnist\"");
        let err = ExperimentConfig::from_str(&text).unwrap_err();
        assert!(err.to_string().contains("dataset.dir"));
    }

    #[test]
    fn overrides_rebase_run_seeds_only() {
        let mut config = ExperimentConfig::from_str(MINIMAL).unwrap();
        let split_seed = config.dataset.split.seed;
        config.apply(&Overrides {
            seed: Some(99),
            out: Some(PathBuf::from("elsewhere")),
            dataset_dir: None,
        });
        assert_eq!(config.seeds.init, 99);
        assert_eq!(config.seeds.shuffle, 100);
        assert_eq!(config.dataset.split.seed, split_seed);
        assert_eq!(config.output.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn resolved_snapshot_round_trips_and_hash_is_stable() {
        let config = ExperimentConfig::from_str(MINIMAL).unwrap();
        let text = config.resolved().unwrap();
        let back = ExperimentConfig::from_str(&text).unwrap();
        assert_eq!(back.resolved().unwrap(), text);
        assert_eq!(config.hash().unwrap(), back.hash().unwrap());
        let mut other = config.clone();
        other.seeds.init = 7;
        assert_ne!(config.hash().unwrap(), other.hash().unwrap());
    }

    #[test]
    fn batch_limit_rule() {
        let dgl = DglConfig::default();
        assert_eq!(dgl.batch_limit(500), 500);
        assert_eq!(dgl.batch_limit(2000), 2000);
        assert_eq!(dgl.batch_limit(10000), 1000);
        let fixed = DglConfig {
            minibatch: 256,
            ..Default::default()
        };
        assert_eq!(fixed.batch_limit(2000), 256);
        assert_eq!(fixed.batch_limit(100), 100);
    }
}
