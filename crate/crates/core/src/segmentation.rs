//! Mask head, segmentation loss and IoU metrics.

use sera_tensor::{Graph, Init, Linear, ParamId, ParamKind, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Smoothing constant of the Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

/// Text-modulated decoder: `ReLU(Conv1x1(F) · (1 + γ(t)) + β(t))`, then a 1×1
/// conv to one channel and bilinear upsampling by the patch size.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub proj: ParamId,
    pub proj_bias: ParamId,
    pub gamma: Linear,
    pub beta: Linear,
    pub out: ParamId,
    pub out_bias: ParamId,
    pub hidden: usize,
    pub upsample: usize,
}

impl MaskHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        text_dim: usize,
        upsample: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: store.uniform_fan_in(
                &format!("{name}.proj"),
                &[hidden, channels, 1, 1],
                channels,
                ParamKind::Weight,
            )?,
            proj_bias: store.zeros(&format!("{name}.proj_bias"), &[hidden], ParamKind::Bias)?,
            gamma: Linear::new(
                store,
                &format!("{name}.gamma"),
                text_dim,
                hidden,
                true,
                Init::FanIn,
            )?,
            beta: Linear::new(
                store,
                &format!("{name}.beta"),
                text_dim,
                hidden,
                true,
                Init::FanIn,
            )?,
            out: store.uniform_fan_in(
                &format!("{name}.out"),
                &[1, hidden, 1, 1],
                hidden,
                ParamKind::Weight,
            )?,
            out_bias: store.zeros(&format!("{name}.out_bias"), &[1], ParamKind::Bias)?,
            hidden,
            upsample,
        })
    }

    /// Text-conditioned features `[B, hidden, h, w]`.
    pub fn align(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        text: Var,
    ) -> Result<Var> {
        let b = g.shape(features)[0];
        let (w, bias) = (g.param(store, self.proj)?, g.param(store, self.proj_bias)?);
        let f = g.pointwise_conv(features, w, Some(bias))?;
        let gamma = self.gamma.forward(g, store, text)?;
        let gamma = g.reshape(gamma, &[b, self.hidden, 1, 1])?;
        let gamma = g.add_scalar(gamma, 1.0)?;
        let beta = self.beta.forward(g, store, text)?;
        let beta = g.reshape(beta, &[b, self.hidden, 1, 1])?;
        let m = g.mul(f, gamma)?;
        let m = g.add(m, beta)?;
        Ok(g.relu(m)?)
    }

    /// Full-resolution logits `[B, 1, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        text: Var,
    ) -> Result<Var> {
        let aligned = self.align(g, store, features, text)?;
        self.decode(g, store, aligned)
    }

    /// 1×1 conv to one channel and bilinear upsampling.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let (w, bias) = (g.param(store, self.out)?, g.param(store, self.out_bias)?);
        let logits = g.pointwise_conv(features, w, Some(bias))?;
        Ok(g.upsample_bilinear(logits, self.upsample)?)
    }
}

fn check_binary(gt: &Tensor) -> Result<()> {
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CoreError::Contract(
            "ground-truth mask is not binary".into(),
        ));
    }
    Ok(())
}

/// Mean per-sample Dice loss `1 - (2Σpt + s) / (Σp + Σt + s)` of sigmoid
/// probabilities.
pub fn dice_loss(g: &mut Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let b = s[0];
    let n: usize = s[1..].iter().product();
    let p = g.sigmoid(logits)?;
    let p = g.reshape(p, &[b, n])?;
    let t = g.constant(gt.clone().reshape(&[b, n])?)?;
    let pt = g.mul(p, t)?;
    let inter = g.sum_axis(pt, 1)?;
    let psum = g.sum_axis(p, 1)?;
    let tsum: Vec<f64> = gt
        .data()
        .chunks(n)
        .map(|c| c.iter().sum::<f64>() + DICE_SMOOTH)
        .collect();
    let tsum = g.constant(Tensor::new(&[b], tsum)?)?;
    let num = g.mul_scalar(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let den = g.add(psum, tsum)?;
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio)?;
    let neg = g.mul_scalar(m, -1.0)?;
    Ok(g.add_scalar(neg, 1.0)?)
}

/// BCE-with-logits plus Dice, equally weighted.
pub fn seg_loss(g: &mut Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    if g.shape(logits) != gt.shape() {
        return Err(CoreError::Contract(format!(
            "prediction {:?} and mask {:?} differ in shape",
            g.shape(logits),
            gt.shape()
        )));
    }
    check_binary(gt)?;
    let bce = g.bce_with_logits(logits, gt)?;
    let dice = dice_loss(g, logits, gt)?;
    Ok(g.add(bce, dice)?)
}

/// Segmentation loss plus the (already weighted) routing loss.
pub fn total_loss(g: &mut Graph, seg: Var, moe: Option<Var>) -> Result<Var> {
    match moe {
        Some(m) => Ok(g.add(seg, m)?),
        None => Ok(seg),
    }
}

/// Binarises logits at probability 0.5 (strictly above).
pub fn binarize(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&z| z > 0.0).collect()
}

/// Intersection and union pixel counts.
pub fn intersection_union(pred: &[bool], gt: &[bool]) -> (u64, u64) {
    let mut i = 0;
    let mut u = 0;
    for (&p, &t) in pred.iter().zip(gt) {
        i += (p && t) as u64;
        u += (p || t) as u64;
    }
    (i, u)
}

/// IoU with the empty-versus-empty case defined as 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (i, u) = intersection_union(pred, gt);
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }
}

/// Accumulates per-sample IoUs and cumulative intersection/union.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub samples: usize,
    iou_sum: CompensatedSum,
    pub intersection: u64,
    pub union: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &[bool], gt: &[bool]) {
        let (i, u) = intersection_union(pred, gt);
        self.iou_sum
            .add(if u == 0 { 1.0 } else { i as f64 / u as f64 });
        self.intersection += i;
        self.union += u;
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.samples += other.samples;
        self.iou_sum.merge(&other.iou_sum);
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// `(mIoU, oIoU)` as fractions in `[0, 1]`.
    pub fn compute(&self) -> Result<(f64, f64)> {
        if self.samples == 0 {
            return Err(CoreError::Contract("metrics of an empty set".into()));
        }
        let miou = self.iou_sum.value() / self.samples as f64;
        let oiou = if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        };
        Ok((miou, oiou))
    }
}
