//! Eval-mode passes: metrics and routing statistics, no noise, no routing loss.

use serde::{Deserialize, Serialize};

use sera_core::routing::routing_stats;
use sera_core::segmentation::{binarize, MetricAccumulator};
use sera_core::{ForwardCtx, RoutingStats, SeraModel};
use sera_synth::SampleRecord;
use sera_tensor::Graph;

use crate::data::Batch;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    /// Percent.
    pub miou: f64,
    /// Percent.
    pub oiou: f64,
    pub n_samples: usize,
    pub top_k: Option<usize>,
    pub per_expert_stats: Option<RoutingStats>,
}

/// A copy of `model` whose routers keep `k` experts.
pub fn with_top_k(model: &SeraModel, k: usize) -> Result<SeraModel> {
    let mut m = model.clone();
    m.cfg.fusion.router.top_k = k;
    m.cfg.validate()?;
    for block in &mut m.fusion {
        block.router.cfg.top_k = k;
    }
    Ok(m)
}

pub fn evaluate(
    model: &SeraModel,
    samples: &[SampleRecord],
    batch_size: usize,
    split: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(HarnessError::Config(format!("split {split} is empty")));
    }
    let mut acc = MetricAccumulator::new();
    let mut decisions = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let batch = Batch::new(&refs)?;
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let out = model.forward(&mut g, &batch.images, &batch.expressions, &mut ctx)?;
        if out.aux_loss.is_some() {
            return Err(HarnessError::Verification(
                "eval pass produced a routing loss".into(),
            ));
        }
        let logits = g.value(out.logits);
        let px = batch.masks.len() / batch.len();
        for (pred, gt) in logits.data().chunks(px).zip(batch.masks.data().chunks(px)) {
            let gt: Vec<bool> = gt.iter().map(|&v| v > 0.5).collect();
            acc.add(&binarize(pred), &gt);
        }
        decisions.extend(ctx.decisions);
    }
    let (miou, oiou) = acc.compute()?;
    let has_fusion = !model.fusion.is_empty();
    Ok(EvalReport {
        split: split.to_string(),
        miou: 100.0 * miou,
        oiou: 100.0 * oiou,
        n_samples: samples.len(),
        top_k: has_fusion.then_some(model.cfg.fusion.router.top_k),
        per_expert_stats: if has_fusion {
            Some(routing_stats(&decisions)?)
        } else {
            None
        },
    })
}
