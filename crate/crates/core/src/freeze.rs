//! Which parameters train: pretrained-encoder scope versus added modules.

use sera_tensor::{ParamKind, ParamStore, Parameter};
use serde::{Deserialize, Serialize};

/// Name prefixes of the encoder parameters treated as pretrained.
pub const BACKBONE_SCOPE: [&str; 2] = ["backbone.", "text."];

pub fn in_backbone_scope(name: &str) -> bool {
    BACKBONE_SCOPE.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Encoders train only biases and normalization affines.
    BiasAndNorm,
    /// Encoders are entirely frozen.
    Frozen,
    /// Everything learnable trains.
    TrainAll,
}

impl FreezePolicy {
    pub fn trainable(self, p: &Parameter) -> bool {
        if !p.kind.learnable() {
            return false;
        }
        if !in_backbone_scope(&p.name) {
            return true;
        }
        match self {
            FreezePolicy::BiasAndNorm => matches!(
                p.kind,
                ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift
            ),
            FreezePolicy::Frozen => false,
            FreezePolicy::TrainAll => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub trainable_backbone: usize,
    pub total_backbone: usize,
    /// `trainable_backbone / total_backbone`.
    pub backbone_fraction: f64,
    pub trainable_total: usize,
    pub total: usize,
}

pub fn freeze_report(store: &ParamStore) -> FreezeReport {
    let mut r = FreezeReport {
        trainable_backbone: 0,
        total_backbone: 0,
        backbone_fraction: 0.0,
        trainable_total: 0,
        total: 0,
    };
    for (_, p) in store.iter() {
        if !p.kind.learnable() {
            continue;
        }
        let n = p.numel();
        r.total += n;
        if p.trainable() {
            r.trainable_total += n;
        }
        if in_backbone_scope(&p.name) {
            r.total_backbone += n;
            if p.trainable() {
                r.trainable_backbone += n;
            }
        }
    }
    r.backbone_fraction = if r.total_backbone == 0 {
        0.0
    } else {
        r.trainable_backbone as f64 / r.total_backbone as f64
    };
    r
}

/// Sets every trainable flag according to `policy` and reports the counts.
pub fn apply_freeze_policy(store: &mut ParamStore, policy: FreezePolicy) -> FreezeReport {
    store.set_trainable_where(|p| policy.trainable(p));
    freeze_report(store)
}
