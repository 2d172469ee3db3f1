//! Mixture-of-experts refinement for referring image segmentation.
//!
//! A toy vision transformer carries adapters that refine its tokens with two
//! softly routed convolutional experts and text cross-attention. Its final
//! feature grid passes through fusion blocks whose four experts (coordinate
//! injection, self-attention, Sobel edges, blur/Laplacian shape) are mixed by a
//! noisy Top-K router, then a text-modulated head decodes a mask.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod error;
pub mod experts;
pub mod freeze;
pub mod fusion;
pub mod model;
pub mod norm;
pub mod routing;
pub mod segmentation;

pub use config::{
    AdapterConfig, BackboneConfig, Components, FusionConfig, HeadConfig, ModelConfig,
    MoeLossWeights, RouterConfig,
};
pub use context::ForwardCtx;
pub use error::{CoreError, Result};
pub use model::{ModelOutput, SeraModel};
pub use norm::{BatchNorm2d, HasNorms};
pub use routing::{RoutingDecision, RoutingStats};
