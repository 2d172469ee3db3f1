//! Run configuration: model, data, optimizer, schedule and loop settings in
//! one serializable document whose hash tags every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sera_core::config::{BackboneConfig, Components, ModelConfig};
use sera_synth::{DatasetConfig, Dialect, SynthConfig};
use sera_tensor::{AdamConfig, StepSchedule};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplicative lr decay applied at each milestone epoch.
    pub decay: f64,
    pub milestones: Vec<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.1,
            milestones: vec![20, 27],
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            initial: self.lr,
            factor: self.decay,
            milestones: self.milestones.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Generator settings; also validated against a dataset loaded from disk.
    pub data: DatasetConfig,
    /// Directory written by `gen-data`; when absent the data is generated in memory.
    pub data_dir: Option<PathBuf>,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_batch_size: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            data: DatasetConfig {
                synth: SynthConfig {
                    image_size: model.backbone.image_size,
                    ..SynthConfig::default()
                },
                ..DatasetConfig::default()
            },
            model,
            data_dir: None,
            optim: OptimConfig::default(),
            batch_size: 16,
            epochs: 30,
            seed: 0,
            eval_batch_size: 50,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// A reduced configuration sized for a single CPU core: 32×32 images,
    /// four-pixel patches, a depth-4 width-32 backbone and ten epochs.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.backbone = BackboneConfig {
            image_size: 32,
            patch_size: 4,
            depth: 4,
            dim: 32,
            heads: 4,
            registers: 2,
            ffn_ratio: 2,
            adapter_blocks: vec![1, 3],
            adapter_scale: 0.1,
            text_vocab: 32,
            text_dim: 32,
            text_heads: 4,
            text_max_len: 16,
        };
        cfg.model.adapter.dim = 16;
        cfg.model.adapter.heads = 2;
        cfg.model.fusion.context_heads = 4;
        cfg.data.synth = SynthConfig {
            image_size: 32,
            small_radius: 3.0,
            large_radius: 5.0,
            min_separation: 8.0,
            spatial_margin: 3.0,
            ..SynthConfig::default()
        };
        cfg.epochs = 10;
        cfg.optim.milestones = vec![7, 9];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(HarnessError::Config("batch sizes must be positive".into()));
        }
        if self.data.synth.image_size != self.model.backbone.image_size {
            return Err(HarnessError::Config(format!(
                "data image size {} differs from model image size {}",
                self.data.synth.image_size, self.model.backbone.image_size
            )));
        }
        if sera_synth::vocab::vocab_size() > self.model.backbone.text_vocab {
            return Err(HarnessError::Config(format!(
                "text vocab {} is smaller than the expression vocabulary ({})",
                self.model.backbone.text_vocab,
                sera_synth::vocab::vocab_size()
            )));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(HarnessError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Input {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn with_components(mut self, c: Components) -> Self {
        self.model.components = c;
        self
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.model.fusion.router.top_k = k;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_dialect(mut self, d: Dialect) -> Self {
        self.data.dialect = d;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            cfg.validate().unwrap();
            let json = serde_json::to_string(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back.hash(), cfg.hash());
        }
        let mut moved = RunConfig::desk();
        moved.out_dir = Some("elsewhere".into());
        assert_eq!(moved.hash(), RunConfig::desk().hash());
        assert_ne!(
            RunConfig::desk().with_seed(1).hash(),
            RunConfig::desk().hash()
        );
    }

    #[test]
    fn mismatched_image_size_is_rejected() {
        let mut cfg = RunConfig::desk();
        cfg.data.synth.image_size = 64;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }
}
