//! The training loop.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sera_core::freeze::freeze_report;
use sera_core::routing::routing_stats;
use sera_core::segmentation::{seg_loss, total_loss};
use sera_core::{checkpoint, ForwardCtx, RoutingStats, SeraModel};
use sera_synth::{Dataset, SampleRecord};
use sera_tensor::{Adam, Graph, ParamKind};

use crate::config::RunConfig;
use crate::data::{epoch_order, Batch};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, EvalReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total objective over the epoch's batches.
    pub train_loss: f64,
    pub train_seg_loss: f64,
    pub train_aux_loss: f64,
    pub val: EvalReport,
    /// Routing of the training batches (noisy, training mode).
    pub train_routing: Option<RoutingStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub components: String,
    pub top_k: usize,
    pub dialect: String,
    pub train_size: usize,
    pub val_size: usize,
    pub trainable_params: usize,
    pub backbone_trainable_fraction: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub best_val_oiou: f64,
    pub final_val_miou: f64,
    pub final_val_oiou: f64,
    /// Every parameter outside the trainable set is bitwise unchanged.
    pub frozen_unchanged: bool,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub report: RunReport,
    /// Model from the epoch with the best validation mIoU.
    pub best: SeraModel,
    pub last: SeraModel,
}

fn add_into(acc: &mut Option<f64>, v: f64) {
    *acc = Some(acc.unwrap_or(0.0) + v);
}

/// Trains on `data.train`, validating after every epoch. When `checkpoint`
/// is set the best model is written there on each improvement.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    checkpoint_path: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(HarnessError::Config(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let start = Instant::now();
    let mut model = SeraModel::new(&cfg.model, cfg.seed)?;
    let initial = model.store.clone();
    let fr = freeze_report(&model.store);
    let mut adam = Adam::new(cfg.optim.adam())?;
    let schedule = cfg.optim.schedule();
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, EvalReport, SeraModel)> = None;

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        adam.set_lr(lr);
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let (mut total, mut seg_sum, mut aux_sum) = (0.0, 0.0, None);
        let mut decisions = Vec::new();
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&SampleRecord> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::new(&samples)?;
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::train(&mut noise);
            let out = model.forward(&mut g, &batch.images, &batch.expressions, &mut ctx)?;
            let seg = seg_loss(&mut g, out.logits, &batch.masks)?;
            let loss = total_loss(&mut g, seg, out.aux_loss)?;
            let (lv, sv) = (g.value(loss).data()[0], g.value(seg).data()[0]);
            let av = out.aux_loss.map(|a| g.value(a).data()[0]);
            if !lv.is_finite() {
                let logits = g.value(out.logits).data();
                let (lo, hi) = logits
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                        (l.min(v), h.max(v))
                    });
                return Err(HarnessError::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!(
                        "loss {lv}, seg {sv}, aux {av:?}, logits in [{lo}, {hi}], batch of {} samples starting at {}",
                        batch.len(),
                        idx[0]
                    ),
                });
            }
            g.backward(loss)?;
            adam.step(&mut model.store, &g.param_grads())?;
            ctx.apply_norm_updates(&mut model.store);
            total += lv;
            seg_sum += sv;
            if let Some(a) = av {
                add_into(&mut aux_sum, a);
            }
            decisions.extend(ctx.decisions);
            batches += 1;
        }
        let val = evaluate(&model, &data.val, cfg.eval_batch_size, "val")?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / batches as f64,
            train_seg_loss: seg_sum / batches as f64,
            train_aux_loss: aux_sum.unwrap_or(0.0) / batches as f64,
            val: val.clone(),
            train_routing: if decisions.is_empty() {
                None
            } else {
                Some(routing_stats(&decisions)?)
            },
        };
        progress(&record);
        epochs.push(record);
        if best.as_ref().is_none_or(|(_, b, _)| val.miou > b.miou) {
            if let Some(path) = checkpoint_path {
                checkpoint::save(path, &model)?;
            }
            best = Some((epoch, val, model.clone()));
        }
    }

    let frozen_unchanged = model
        .store
        .iter()
        .zip(initial.iter())
        .filter(|((_, p), _)| !p.trainable() && p.kind != ParamKind::RunningStat)
        .all(|((_, now), (_, before))| now.tensor.bit_eq(&before.tensor));
    let last_val = epochs.last().map(|e| e.val.clone());
    let (best_epoch, best_val, best_model) = match best {
        Some(b) => b,
        None => {
            let val = evaluate(&model, &data.val, cfg.eval_batch_size, "val")?;
            (0, val, model.clone())
        }
    };
    let last_val = last_val.unwrap_or_else(|| best_val.clone());
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        components: cfg.model.components.as_str().to_string(),
        top_k: cfg.model.fusion.router.top_k,
        dialect: cfg.data.dialect.as_str().to_string(),
        train_size: data.train.len(),
        val_size: data.val.len(),
        trainable_params: fr.trainable_total,
        backbone_trainable_fraction: fr.backbone_fraction,
        epochs,
        best_epoch,
        best_val_miou: best_val.miou,
        best_val_oiou: best_val.oiou,
        final_val_miou: last_val.miou,
        final_val_oiou: last_val.oiou,
        frozen_unchanged,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        report,
        best: best_model,
        last: model,
    })
}
