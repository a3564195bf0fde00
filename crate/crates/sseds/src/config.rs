//! Pipeline configuration: one JSON document with a version field. Every
//! default matches the reference hyperparameters (d=128, hidden 1024x2,
//! Adam lr 0.001, batch 2048, 3 epochs, kappa=0.1, winning-ticket retrain).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::synth::SynthSpec;
use crate::dataio::transform::NumericTransform;
use crate::dataio::formats::RawFormat;
use crate::error::{Error, Result};
use crate::model::adam::AdamHyper;
use crate::model::ModelConfig;
use crate::pruning::SelectionMode;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: RawFormat,
    /// Raw input file for criteo / avazu.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Generator settings when `format` is synth.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default = "default_min_freq")]
    pub min_freq: u64,
    #[serde(default)]
    pub transform: NumericTransform,
    #[serde(default = "default_ratios")]
    pub ratios: (u32, u32, u32),
    /// Strict parsing aborts on the first malformed row; lenient counts
    /// and skips.
    #[serde(default = "default_true")]
    pub strict: bool,
}

fn default_min_freq() -> u64 {
    10
}
fn default_ratios() -> (u32, u32, u32) {
    (8, 1, 1)
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    2048
}
fn default_epochs() -> usize {
    3
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
        }
    }
}

impl OptimizerConfig {
    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            ..AdamHyper::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningConfig {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// How many deterministic training batches the saliency gradient
    /// averages over. 1 keeps the single-pass guarantee.
    #[serde(default = "default_one")]
    pub saliency_batches: usize,
    #[serde(default)]
    pub selection: SelectionMode,
}

fn default_kappa() -> f64 {
    0.1
}
fn default_one() -> usize {
    1
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            kappa: default_kappa(),
            saliency_batches: default_one(),
            selection: SelectionMode::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetrainInit {
    #[default]
    WinningTicket,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    #[serde(default)]
    pub init: RetrainInit,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Identity alignment reproduces the pretrained model exactly at
    /// kappa = 1; random is the normal mode.
    #[serde(default = "default_true")]
    pub random_align: bool,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            init: RetrainInit::default(),
            epochs: default_epochs(),
            random_align: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(self.pruning.kappa > 0.0 && self.pruning.kappa <= 1.0) {
            return Err(Error::config(format!(
                "pruning.kappa must be in (0,1], got {}",
                self.pruning.kappa
            )));
        }
        if self.pruning.saliency_batches == 0 {
            return Err(Error::config("pruning.saliency_batches must be >= 1"));
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::config("model.embedding_dim must be >= 1"));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size must be >= 1"));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::config("optimizer.lr must be positive"));
        }
        let (a, b, c) = self.dataset.ratios;
        if a == 0 || b == 0 || c == 0 {
            return Err(Error::config("dataset.ratios parts must be positive"));
        }
        match self.dataset.format {
            RawFormat::Synth => {
                let spec = self
                    .dataset
                    .synth
                    .as_ref()
                    .ok_or_else(|| Error::config("synth format needs a dataset.synth block"))?;
                spec.validate()?;
            }
            _ => {
                if self.dataset.path.is_none() {
                    return Err(Error::config(format!(
                        "{:?} format needs dataset.path",
                        self.dataset.format
                    )));
                }
            }
        }
        Ok(())
    }

    /// Small synthetic-benchmark config used by tests and as a template.
    pub fn synthetic_example(out_dir: PathBuf) -> PipelineConfig {
        PipelineConfig {
            version: CONFIG_VERSION,
            dataset: DatasetConfig {
                format: RawFormat::Synth,
                path: None,
                synth: Some(SynthSpec::uniform_signal(4, 20, 4000, 4, 2, 1.5)),
                min_freq: 1,
                transform: NumericTransform::default(),
                ratios: default_ratios(),
                strict: true,
            },
            model: ModelConfig {
                architecture: crate::model::Architecture::Fm,
                embedding_dim: 8,
                hidden: vec![],
            },
            optimizer: OptimizerConfig {
                lr: 0.01,
                batch_size: 256,
                epochs: 2,
            },
            pruning: PruningConfig::default(),
            retrain: RetrainConfig {
                epochs: 2,
                ..RetrainConfig::default()
            },
            seed: 0,
            out_dir,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let json = r#"{
            "version": 1,
            "dataset": {"format": "criteo", "path": "train.txt"}
        }"#;
        let config: PipelineConfig = serde_json::from_str(json).unwrap();
        config.validate().unwrap();
        assert_eq!(config.model.embedding_dim, 128);
        assert_eq!(config.model.hidden, vec![1024, 1024]);
        assert_eq!(config.optimizer.lr, 0.001);
        assert_eq!(config.optimizer.batch_size, 2048);
        assert_eq!(config.optimizer.epochs, 3);
        assert_eq!(config.pruning.kappa, 0.1);
        assert_eq!(config.retrain.init, RetrainInit::WinningTicket);
        assert_eq!(config.retrain.epochs, 3);
        assert_eq!(config.dataset.min_freq, 10);
        assert_eq!(config.dataset.ratios, (8, 1, 1));
    }

    #[test]
    fn bad_version_rejected() {
        let json = r#"{"version": 99, "dataset": {"format": "criteo", "path": "x"}}"#;
        let config: PipelineConfig = serde_json::from_str(json).unwrap();
        let err = config.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn kappa_bounds_enforced() {
        let mut config = PipelineConfig::synthetic_example(PathBuf::from("o"));
        config.pruning.kappa = 0.0;
        assert!(config.validate().is_err());
        config.pruning.kappa = 1.1;
        assert!(config.validate().is_err());
        config.pruning.kappa = 1.0;
        assert!(config.validate().is_ok());
    }

    #[test]
    fn synth_requires_spec_and_criteo_requires_path() {
        let mut config = PipelineConfig::synthetic_example(PathBuf::from("o"));
        config.dataset.synth = None;
        assert!(config.validate().is_err());
        config.dataset.format = RawFormat::Criteo;
        assert!(config.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"version": 1, "dataset": {"format": "criteo", "path": "x", "bogus": 1}}"#;
        assert!(serde_json::from_str::<PipelineConfig>(json).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let config = PipelineConfig::synthetic_example(PathBuf::from("out"));
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(text, serde_json::to_string_pretty(&back).unwrap());
    }
}
