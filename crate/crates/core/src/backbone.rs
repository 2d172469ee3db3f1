//! Toy vision transformer with prefix tokens and adapter slots, and the small
//! text encoder that produces one expression vector per sample.

use sera_tensor::{
    Graph, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamKind, ParamStore, Tensor, Var,
};

use crate::adapter::Adapter;
use crate::config::{AdapterConfig, BackboneConfig};
use crate::context::ForwardCtx;
use crate::error::{CoreError, Result};
use crate::experts::tokens_to_grid;
use crate::norm::BatchNorm2d;

/// Id of the start token prepended to every expression.
pub const START_TOKEN: usize = 0;

/// Pre-norm transformer block, optionally carrying an adapter:
/// `h = x + Attn(LN(x))`, then `h + FFN(LN(h)) + λ · A(h, T)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub adapter: Option<Adapter>,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, false)
                .map_err(|e| CoreError::Config(e.to_string()))?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn_in: Linear::new(
                store,
                &format!("{name}.ffn_in"),
                dim,
                dim * ffn_ratio,
                true,
                Init::FanIn,
            )?,
            ffn_out: Linear::new(
                store,
                &format!("{name}.ffn_out"),
                dim * ffn_ratio,
                dim,
                true,
                Init::FanIn,
            )?,
            adapter: None,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        text: Option<Var>,
        adapter_scale: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let n1 = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, n1, n1)?;
        let h = g.add(x, a)?;
        let n2 = self.norm2.forward(g, store, h)?;
        let f = self.ffn_in.forward(g, store, n2)?;
        let f = g.gelu(f)?;
        let f = self.ffn_out.forward(g, store, f)?;
        let out = g.add(h, f)?;
        match (&self.adapter, text) {
            (Some(adapter), Some(t)) => {
                let ad = adapter.forward(g, store, h, t, ctx)?;
                let ad = g.mul_scalar(ad, adapter_scale)?;
                Ok(g.add(out, ad)?)
            }
            (Some(_), None) => Err(CoreError::Contract(
                "adapter block needs a text embedding".into(),
            )),
            (None, _) => Ok(out),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VisionBackbone {
    pub cfg: BackboneConfig,
    pub patch: Linear,
    /// Class token followed by the register tokens, `[1, 1 + R, D]`.
    pub prefix: ParamId,
    /// Position embedding of the spatial tokens, `[1, N, D]`.
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl VisionBackbone {
    /// Builds the backbone; adapters go into `cfg.adapter_blocks` when
    /// `adapter` is given.
    pub fn new(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        adapter: Option<&AdapterConfig>,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let p = cfg.patch_size;
        let n = cfg.grid() * cfg.grid();
        let patch = Linear::new(store, "backbone.patch", 3 * p * p, d, true, Init::FanIn)?;
        let prefix = store.uniform_fan_in(
            "backbone.prefix",
            &[1, cfg.prefix_count(), d],
            d,
            ParamKind::Weight,
        )?;
        let position =
            store.uniform_fan_in("backbone.position", &[1, n, d], d, ParamKind::Weight)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut b = TransformerBlock::new(
                store,
                &format!("backbone.block{i}"),
                d,
                cfg.heads,
                cfg.ffn_ratio,
            )?;
            if let Some(acfg) = adapter {
                if cfg.adapter_blocks.contains(&i) {
                    b.adapter = Some(Adapter::new(
                        store,
                        &format!("adapter{i}"),
                        acfg,
                        d,
                        cfg.text_dim,
                        cfg.prefix_count(),
                        cfg.grid(),
                        cfg.grid(),
                    )?);
                }
            }
            blocks.push(b);
        }
        let norm = LayerNorm::new(store, "backbone.norm", d)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            prefix,
            position,
            blocks,
            norm,
        })
    }

    /// `[B, 3, H, W]` -> `[B, 1 + R + N, D]`.
    pub fn encode_image(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        text: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let c = &self.cfg;
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != c.image_size || s[3] != c.image_size {
            return Err(CoreError::Contract(format!(
                "expected images [B, 3, {0}, {0}], got {s:?}",
                c.image_size
            )));
        }
        let (b, p, gs) = (s[0], c.patch_size, c.grid());
        let r = g.reshape(image, &[b, 3, gs, p, gs, p])?;
        let r = g.permute(r, &[0, 2, 4, 1, 3, 5])?;
        let patches = g.reshape(r, &[b, gs * gs, 3 * p * p])?;
        let tokens = self.patch.forward(g, store, patches)?;
        let pos = g.param(store, self.position)?;
        let tokens = g.add(tokens, pos)?;
        let zeros = g.constant(Tensor::zeros(&[b, c.prefix_count(), c.dim]))?;
        let prefix = g.param(store, self.prefix)?;
        let prefix = g.add(zeros, prefix)?;
        let mut x = g.concat(&[prefix, tokens], 1)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, text, c.adapter_scale, ctx)?;
        }
        Ok(self.norm.forward(g, store, x)?)
    }

    /// Spatial tokens of an encoded sequence as a `[B, D, h, w]` grid.
    pub fn spatial_grid(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let gs = self.cfg.grid();
        let spatial = g.slice(tokens, 1, self.cfg.prefix_count(), gs * gs)?;
        tokens_to_grid(g, spatial, gs, gs)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Adapter> {
        self.blocks.iter().filter_map(|b| b.adapter.as_ref())
    }

    pub fn norms(&self) -> Vec<&BatchNorm2d> {
        self.adapters().flat_map(|a| a.norms()).collect()
    }
}

/// Embedding, one transformer block, final norm and mean pooling.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: usize,
    pub max_len: usize,
    pub embed: ParamId,
    pub position: ParamId,
    pub block: TransformerBlock,
    pub norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let d = cfg.text_dim;
        Ok(Self {
            vocab: cfg.text_vocab,
            max_len: cfg.text_max_len,
            embed: store.uniform("text.embed", &[cfg.text_vocab, d], 1.0, ParamKind::Weight)?,
            position: store.uniform_fan_in(
                "text.position",
                &[cfg.text_max_len + 1, d],
                d,
                ParamKind::Weight,
            )?,
            block: TransformerBlock::new(store, "text.block", d, cfg.text_heads, 2)?,
            norm: LayerNorm::new(store, "text.norm", d)?,
        })
    }

    /// One `[1, d_t]` vector per expression, stacked to `[B, 1, d_t]`. Every
    /// expression is prefixed with [`START_TOKEN`], so an empty one is valid.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        expressions: &[Vec<usize>],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if expressions.is_empty() {
            return Err(CoreError::Contract("no expressions to encode".into()));
        }
        let table = g.param(store, self.embed)?;
        let pos = g.param(store, self.position)?;
        let mut pooled = Vec::with_capacity(expressions.len());
        for ids in expressions {
            if ids.len() > self.max_len {
                return Err(CoreError::Contract(format!(
                    "expression of {} tokens exceeds the maximum {}",
                    ids.len(),
                    self.max_len
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
                return Err(CoreError::Contract(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.vocab
                )));
            }
            let mut seq = Vec::with_capacity(ids.len() + 1);
            seq.push(START_TOKEN);
            seq.extend_from_slice(ids);
            let l = seq.len();
            let e = g.embedding(table, &seq)?;
            let p = g.slice(pos, 0, 0, l)?;
            let x = g.add(e, p)?;
            let d = g.shape(x)[1];
            let x = g.reshape(x, &[1, l, d])?;
            let x = self.block.forward(g, store, x, None, 0.0, ctx)?;
            let x = self.norm.forward(g, store, x)?;
            pooled.push(g.mean_axis(x, 1)?);
        }
        let all = g.concat(&pooled, 0)?;
        let d = g.shape(all)[1];
        Ok(g.reshape(all, &[expressions.len(), 1, d])?)
    }
}
