//! Multi-run protocols: Top-K and component ablations, zero-shot
//! cross-dialect transfer and the expert-collapse comparison. Runs are
//! memoized by config hash, so protocols sharing a configuration share runs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use sera_core::config::Components;
use sera_core::SeraModel;
use sera_synth::{random_object_miou, Dataset, DatasetConfig, Dialect};

use crate::config::RunConfig;
use crate::data::load_data;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::train::{train, EpochRecord, RunReport};

pub struct Run {
    pub report: RunReport,
    pub best: SeraModel,
    pub last: SeraModel,
}

/// Progress hook invoked after every training epoch.
pub type EpochHook = Box<dyn FnMut(&RunConfig, &EpochRecord)>;

/// Memoizing run executor.
#[derive(Default)]
pub struct Runner {
    data: HashMap<String, Dataset>,
    runs: HashMap<String, Run>,
    /// Called with the run config and each epoch record during training.
    pub on_epoch: Option<EpochHook>,
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn data(&mut self, cfg: &RunConfig) -> Result<&Dataset> {
        let key = format!("{}:{:?}", cfg.data.hash(), cfg.data_dir);
        if !self.data.contains_key(&key) {
            let ds = load_data(cfg)?;
            self.data.insert(key.clone(), ds);
        }
        Ok(&self.data[&key])
    }

    pub fn run(&mut self, cfg: &RunConfig) -> Result<&Run> {
        let key = cfg.hash();
        if !self.runs.contains_key(&key) {
            let data = self.data(cfg)?.clone();
            let mut hook = self.on_epoch.take();
            let out = train(cfg, &data, None, &mut |r| {
                if let Some(h) = hook.as_mut() {
                    h(cfg, r)
                }
            });
            self.on_epoch = hook;
            let out = out?;
            self.runs.insert(
                key.clone(),
                Run {
                    report: out.report,
                    best: out.best,
                    last: out.last,
                },
            );
        }
        Ok(&self.runs[&key])
    }
}

/// Median; the mean of the two central values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub config_hash: String,
    pub miou: f64,
    pub oiou: f64,
}

fn seed_results(runner: &mut Runner, base: &RunConfig, seeds: &[u64]) -> Result<Vec<SeedResult>> {
    seeds
        .iter()
        .map(|&s| {
            let cfg = base.clone().with_seed(s);
            let r = &runner.run(&cfg)?.report;
            Ok(SeedResult {
                seed: s,
                config_hash: r.config_hash.clone(),
                miou: r.best_val_miou,
                oiou: r.best_val_oiou,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKRow {
    pub k: usize,
    pub miou: f64,
    pub oiou: f64,
    pub delta_miou: f64,
    pub delta_oiou: f64,
    pub runs: Vec<SeedResult>,
}

/// Trains and evaluates the full model for every (K, seed); medians over
/// seeds, deltas relative to the K = 1 row (or the first row without one).
pub fn ablate_topk(
    runner: &mut Runner,
    base: &RunConfig,
    ks: &[usize],
    seeds: &[u64],
) -> Result<Vec<TopKRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let cfg = base.clone().with_components(Components::Full).with_top_k(k);
        let runs = seed_results(runner, &cfg, seeds)?;
        rows.push(TopKRow {
            k,
            miou: median(&runs.iter().map(|r| r.miou).collect::<Vec<_>>()),
            oiou: median(&runs.iter().map(|r| r.oiou).collect::<Vec<_>>()),
            delta_miou: 0.0,
            delta_oiou: 0.0,
            runs,
        });
    }
    let reference = rows
        .iter()
        .find(|r| r.k == 1)
        .or(rows.first())
        .map(|r| (r.miou, r.oiou));
    if let Some((m, o)) = reference {
        for r in &mut rows {
            r.delta_miou = r.miou - m;
            r.delta_oiou = r.oiou - o;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub components: String,
    pub miou: f64,
    pub oiou: f64,
    pub runs: Vec<SeedResult>,
}

pub fn ablate_components(
    runner: &mut Runner,
    base: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<ComponentRow>> {
    [Components::Baseline, Components::Adapter, Components::Full]
        .into_iter()
        .map(|c| {
            let runs = seed_results(runner, &base.clone().with_components(c), seeds)?;
            Ok(ComponentRow {
                components: c.as_str().to_string(),
                miou: median(&runs.iter().map(|r| r.miou).collect::<Vec<_>>()),
                oiou: median(&runs.iter().map(|r| r.oiou).collect::<Vec<_>>()),
                runs,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub eval: EvalReport,
    /// mIoU (percent) of a uniformly random scene object's mask on the same split.
    pub random_object_miou: f64,
}

/// The validation split of `target`, generated like the source data.
pub fn target_config(source: &RunConfig, target: Dialect) -> RunConfig {
    let mut cfg = source.clone().with_dialect(target);
    cfg.data_dir = None;
    cfg.data = DatasetConfig {
        train: 0,
        ..cfg.data.clone()
    };
    cfg
}

/// Zero-shot evaluation of `model` (trained on `source.data.dialect`) on the
/// validation split of every target dialect.
pub fn cross_dialect(
    runner: &mut Runner,
    source: &RunConfig,
    model: &SeraModel,
    seed: u64,
    targets: &[Dialect],
) -> Result<Vec<TransferRow>> {
    let mut rows = Vec::new();
    for &t in targets {
        // Validation samples do not depend on the training-split size, so
        // the source dialect's split is regenerated identically here.
        let data = runner.data(&target_config(source, t))?;
        let eval = evaluate(
            model,
            &data.val,
            source.eval_batch_size,
            &format!("{}-val", t.as_str()),
        )?;
        rows.push(TransferRow {
            seed,
            source: source.data.dialect.as_str().to_string(),
            target: t.as_str().to_string(),
            eval,
            random_object_miou: random_object_miou(&data.val),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseResult {
    pub balanced: bool,
    pub seed: u64,
    pub selection_freq: Vec<f64>,
    pub min_selection_freq: f64,
}

/// Trains the skewed configuration with the balancing losses off and on and
/// reports eval-mode expert selection frequencies of the final model.
pub fn collapse(
    runner: &mut Runner,
    skewed: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<CollapseResult>> {
    let mut out = Vec::new();
    for balanced in [false, true] {
        let mut cfg = skewed.clone();
        if !balanced {
            cfg.model.fusion.losses.balance = 0.0;
            cfg.model.fusion.losses.token = 0.0;
        }
        for &seed in seeds {
            let c = cfg.clone().with_seed(seed);
            let data = runner.data(&c)?.clone();
            let model = runner.run(&c)?.last.clone();
            let ev = evaluate(&model, &data.val, c.eval_batch_size, "val")?;
            let stats = ev.per_expert_stats.expect("full model routes");
            out.push(CollapseResult {
                balanced,
                seed,
                min_selection_freq: stats.min_selection_freq(),
                selection_freq: stats.selection_freq,
            });
        }
    }
    Ok(out)
}

/// A skew-inducing variant of `base`: Top-2 routing whose router starts with
/// a strong preference for the first expert.
pub fn skewed_config(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone().with_components(Components::Full).with_top_k(2);
    cfg.model.fusion.router_bias_init = Some(vec![3.0, 0.0, 0.0, 0.0]);
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
