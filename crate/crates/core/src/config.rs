//! Serializable model configuration.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Top-K router settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub noise_std: f64,
    /// Hidden width of the router MLP; `None` means `max(C / 2, 8)`.
    pub hidden_dim: Option<usize>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 4,
            temperature: 1.0,
            noise_std: 0.1,
            hidden_dim: None,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(CoreError::Config(format!(
                "top_k {} must lie in 1..={}",
                self.top_k, self.num_experts
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CoreError::Config("router temperature must be > 0".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(CoreError::Config("router noise_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn hidden_for(&self, channels: usize) -> usize {
        self.hidden_dim.unwrap_or((channels / 2).max(8))
    }
}

/// Weights of the auxiliary routing losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeLossWeights {
    pub z: f64,
    pub logit: f64,
    pub balance: f64,
    pub token: f64,
}

impl Default for MoeLossWeights {
    fn default() -> Self {
        Self {
            z: 0.0,
            logit: 1e-3,
            balance: 1e-2,
            token: 1e-2,
        }
    }
}

impl MoeLossWeights {
    pub fn zero() -> Self {
        Self {
            z: 0.0,
            logit: 0.0,
            balance: 0.0,
            token: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("z", self.z),
            ("logit", self.logit),
            ("balance", self.balance),
            ("token", self.token),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::Config(format!(
                    "loss weight {name} must be >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Bottleneck width.
    pub dim: usize,
    pub heads: usize,
    /// Residual weight of the input inside the spatial expert.
    pub expert_alpha: f64,
    /// Weight of the depthwise path inside the boundary expert.
    pub expert_beta: f64,
    /// Weight of the spatial expert in the correction step.
    pub mix_alpha: f64,
    /// Weight of the boundary expert in the correction step.
    pub mix_beta: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            expert_alpha: 0.3,
            expert_beta: 0.1,
            mix_alpha: 0.25,
            mix_beta: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub router: RouterConfig,
    pub losses: MoeLossWeights,
    /// Strength of the coordinate injection in the spatial expert.
    pub spatial_alpha: f64,
    pub context_heads: usize,
    pub ffn_expansion: usize,
    /// Number of fusion blocks applied in sequence to the final feature map.
    pub blocks: usize,
    /// Optional initial bias of the router output layer, one entry per expert.
    pub router_bias_init: Option<Vec<f64>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            router: RouterConfig::default(),
            losses: MoeLossWeights::default(),
            spatial_alpha: 0.1,
            context_heads: 4,
            ffn_expansion: 2,
            blocks: 1,
            router_bias_init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub registers: usize,
    pub ffn_ratio: usize,
    pub adapter_blocks: Vec<usize>,
    /// Contribution of each adapter to its block's update.
    pub adapter_scale: f64,
    pub text_vocab: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            depth: 6,
            dim: 128,
            heads: 4,
            registers: 4,
            ffn_ratio: 4,
            adapter_blocks: vec![1, 3, 5],
            adapter_scale: 0.1,
            text_vocab: 64,
            text_dim: 64,
            text_heads: 4,
            text_max_len: 24,
        }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn prefix_count(&self) -> usize {
        1 + self.registers
    }

    pub fn token_count(&self) -> usize {
        self.prefix_count() + self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(CoreError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.adapter_blocks.iter().any(|&b| b >= self.depth) {
            return Err(CoreError::Config(
                "adapter block index outside the backbone depth".into(),
            ));
        }
        if !self.adapter_scale.is_finite() {
            return Err(CoreError::Config("adapter scale must be finite".into()));
        }
        if self.text_vocab < 2 || self.text_max_len == 0 {
            return Err(CoreError::Config(
                "text vocabulary and length must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which refinement components a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    Baseline,
    Adapter,
    Full,
}

impl Components {
    pub fn has_adapter(self) -> bool {
        !matches!(self, Components::Baseline)
    }

    pub fn has_fusion(self) -> bool {
        matches!(self, Components::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Components::Baseline => "baseline",
            Components::Adapter => "adapter",
            Components::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct HeadConfig {
    /// Width of the text-modulated hidden layer; `None` means the backbone dim.
    pub hidden: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub components: Components,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            components: Components::Full,
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.router.validate()?;
        self.fusion.losses.validate()?;
        if self.fusion.router.num_experts != 4 {
            return Err(CoreError::Config(
                "the fusion block has exactly four experts".into(),
            ));
        }
        if let Some(b) = &self.fusion.router_bias_init {
            if b.len() != 4 {
                return Err(CoreError::Config(
                    "router_bias_init needs one entry per expert".into(),
                ));
            }
        }
        if self.adapter.dim == 0 || self.adapter.dim > self.backbone.dim {
            return Err(CoreError::Config(
                "adapter dim must lie in 1..=backbone dim".into(),
            ));
        }
        Ok(())
    }
}
