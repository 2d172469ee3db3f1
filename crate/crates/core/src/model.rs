//! The assembled model: text encoder, backbone with optional adapters,
//! optional fusion blocks, and the mask head.

use sera_tensor::{Graph, ParamStore, Tensor, Var};

use crate::backbone::{TextEncoder, VisionBackbone};
use crate::config::ModelConfig;
use crate::context::ForwardCtx;
use crate::error::Result;
use crate::freeze::{apply_freeze_policy, FreezePolicy};
use crate::fusion::FusionBlock;
use crate::norm::{BatchNorm2d, HasNorms};
use crate::segmentation::MaskHead;

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, 1, H, W]` mask logits at image resolution.
    pub logits: Var,
    /// Summed routing losses of all fusion blocks (training only).
    pub aux_loss: Option<Var>,
    /// Feature grid entering the head, after fusion.
    pub features: Var,
    /// `[B, 1, d_t]` expression embeddings.
    pub text: Var,
}

#[derive(Clone, Debug)]
pub struct SeraModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub backbone: VisionBackbone,
    pub fusion: Vec<FusionBlock>,
    pub head: MaskHead,
}

impl SeraModel {
    /// Builds the model and applies the default freeze policy.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let b = &cfg.backbone;
        let text = TextEncoder::new(&mut store, b)?;
        let adapter = cfg.components.has_adapter().then_some(&cfg.adapter);
        let backbone = VisionBackbone::new(&mut store, b, adapter)?;
        let mut fusion = Vec::new();
        if cfg.components.has_fusion() {
            for i in 0..cfg.fusion.blocks {
                fusion.push(FusionBlock::new(
                    &mut store,
                    &format!("fusion{i}"),
                    b.dim,
                    &cfg.fusion,
                )?);
            }
        }
        let hidden = cfg.head.hidden.unwrap_or(b.dim);
        let head = MaskHead::new(&mut store, "head", b.dim, hidden, b.text_dim, b.patch_size)?;
        apply_freeze_policy(&mut store, FreezePolicy::BiasAndNorm);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            text,
            backbone,
            fusion,
            head,
        })
    }

    pub fn seed(&self) -> u64 {
        self.store.seed()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        images: &Tensor,
        expressions: &[Vec<usize>],
        ctx: &mut ForwardCtx,
    ) -> Result<ModelOutput> {
        let store = &self.store;
        let text = self.text.encode(g, store, expressions, ctx)?;
        let image = g.constant(images.clone())?;
        let tokens = self
            .backbone
            .encode_image(g, store, image, Some(text), ctx)?;
        let mut features = self.backbone.spatial_grid(g, tokens)?;
        let mut aux: Option<Var> = None;
        for block in &self.fusion {
            let out = block.forward(g, store, features, ctx)?;
            features = out.y;
            if let Some(l) = out.aux_loss {
                aux = Some(match aux {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
        }
        let logits = self.head.forward(g, store, features, text)?;
        Ok(ModelOutput {
            logits,
            aux_loss: aux,
            features,
            text,
        })
    }
}

impl HasNorms for SeraModel {
    fn norms(&self) -> Vec<&BatchNorm2d> {
        let mut v = self.backbone.norms();
        for f in &self.fusion {
            v.extend(f.norms());
        }
        v
    }
}

impl SeraModel {
    /// Installs running mean 0 / variance 1 in every batch norm.
    pub fn set_identity_running_stats(&mut self) -> Result<()> {
        let norms: Vec<BatchNorm2d> = self.norms().into_iter().cloned().collect();
        for n in norms {
            let c = self.store.tensor(n.running_mean).len();
            n.set_running_stats(&mut self.store, &vec![0.0; c], &vec![1.0; c])?;
        }
        Ok(())
    }
}
