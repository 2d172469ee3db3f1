//! Adam over the trainable subset of a [`ParamStore`], plus a step-decay
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::param::{Gradients, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Parameters whose `trainable` flag is false are
/// never touched, whatever gradient is supplied for them.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr >= 0.0
            && (0.0..1.0).contains(&cfg.beta1)
            && (0.0..1.0).contains(&cfg.beta2)
            && cfg.eps > 0.0)
        {
            return Err(TensorError::Config(format!(
                "invalid Adam settings {cfg:?}"
            )));
        }
        Ok(Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable() {
                continue;
            }
            if g.len() != p.tensor.len() {
                return Err(TensorError::Contract(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    p.name,
                    g.len(),
                    p.tensor.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: "adam gradient",
                });
            }
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let data = p.tensor.data_mut();
            for i in 0..g.len() {
                st.m[i] = self.cfg.beta1 * st.m[i] + (1.0 - self.cfg.beta1) * g[i];
                st.v[i] = self.cfg.beta2 * st.v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                data[i] -= self.cfg.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `initial * factor^(milestones passed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub initial: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl StepSchedule {
    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamKind;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = ParamStore::new(0);
        let id = ps
            .add(
                "w",
                ParamKind::Weight,
                Tensor::new(&[2], vec![1.0, 1.0]).unwrap(),
            )
            .unwrap();
        let mut g = Gradients::new();
        g.accumulate(id, &[3.0, -0.5]);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        })
        .unwrap();
        adam.step(&mut ps, &g).unwrap();
        let d = ps.tensor(id).data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn frozen_parameters_stay_bitwise_fixed() {
        let mut ps = ParamStore::new(0);
        let id = ps.uniform_fan_in("w", &[4], 4, ParamKind::Weight).unwrap();
        ps.get_mut(id).set_trainable(false).unwrap();
        let before = ps.tensor(id).clone();
        let mut g = Gradients::new();
        g.accumulate(id, &[1.0; 4]);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        for _ in 0..10 {
            adam.step(&mut ps, &g).unwrap();
        }
        assert!(ps.tensor(id).bit_eq(&before));
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = StepSchedule {
            initial: 1e-4,
            factor: 0.1,
            milestones: vec![20, 27],
        };
        assert_eq!(s.lr_at(0), 1e-4);
        assert!((s.lr_at(20) - 1e-5).abs() < 1e-20);
        assert!((s.lr_at(29) - 1e-6).abs() < 1e-20);
    }
}
