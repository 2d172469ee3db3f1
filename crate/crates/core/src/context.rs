//! Per-forward state: mode, noise source, and deferred state updates.

use rand_chacha::ChaCha8Rng;
use sera_tensor::{BatchStats, ParamId, ParamStore, BATCH_NORM_MOMENTUM};

use crate::error::{CoreError, Result};
use crate::routing::RoutingDecision;

/// Running-statistics update recorded by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub tracked: ParamId,
    pub stats: BatchStats,
}

/// Carries the mode of one forward pass. The parameter store is only read
/// during a forward pass; state changes are collected here and applied with
/// [`ForwardCtx::apply_norm_updates`] by whoever owns the store.
pub struct ForwardCtx<'a> {
    training: bool,
    rng: Option<&'a mut ChaCha8Rng>,
    pub(crate) norm_updates: Vec<NormUpdate>,
    /// Routing decisions of every fusion block, in evaluation order.
    pub decisions: Vec<RoutingDecision>,
}

impl<'a> ForwardCtx<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
            norm_updates: Vec::new(),
            decisions: Vec::new(),
        }
    }

    /// Training mode without a noise source; only valid when no router adds noise.
    pub fn train_without_noise() -> Self {
        Self {
            training: true,
            rng: None,
            norm_updates: Vec::new(),
            decisions: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
            norm_updates: Vec::new(),
            decisions: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub(crate) fn rng(&mut self) -> Result<&mut ChaCha8Rng> {
        self.rng
            .as_deref_mut()
            .ok_or_else(|| CoreError::Contract("routing noise requested without an rng".into()))
    }

    pub fn norm_updates(&self) -> &[NormUpdate] {
        &self.norm_updates
    }

    /// Folds recorded batch statistics into the running statistics with
    /// momentum 0.1 (unbiased variance).
    pub fn apply_norm_updates(&mut self, store: &mut ParamStore) {
        let m = BATCH_NORM_MOMENTUM;
        for u in self.norm_updates.drain(..) {
            for (id, fresh) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var_unbiased)] {
                let d = store.get_mut(id).tensor.data_mut();
                for (r, f) in d.iter_mut().zip(fresh) {
                    *r = (1.0 - m) * *r + m * f;
                }
            }
            store.get_mut(u.tracked).tensor.data_mut()[0] += 1.0;
        }
    }
}
