//! Batch normalization with running statistics kept in the parameter store.

use sera_tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var, BATCH_NORM_EPS};

use crate::context::{ForwardCtx, NormUpdate};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Number of running-statistics updates; eval mode refuses to run at 0.
    pub tracked: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            scale: store.ones(&format!("{name}.scale"), &[channels], ParamKind::NormScale)?,
            shift: store.zeros(&format!("{name}.shift"), &[channels], ParamKind::NormShift)?,
            running_mean: store.zeros(
                &format!("{name}.running_mean"),
                &[channels],
                ParamKind::RunningStat,
            )?,
            running_var: store.ones(
                &format!("{name}.running_var"),
                &[channels],
                ParamKind::RunningStat,
            )?,
            tracked: store.zeros(&format!("{name}.tracked"), &[1], ParamKind::RunningStat)?,
        })
    }

    /// Installs explicit running statistics, making eval mode usable.
    pub fn set_running_stats(
        &self,
        store: &mut ParamStore,
        mean: &[f64],
        var: &[f64],
    ) -> Result<()> {
        let c = store.tensor(self.running_mean).len();
        store.set_tensor(self.running_mean, Tensor::new(&[c], mean.to_vec())?)?;
        store.set_tensor(self.running_var, Tensor::new(&[c], var.to_vec())?)?;
        store.set_tensor(self.tracked, Tensor::new(&[1], vec![1.0])?)?;
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let scale = g.param(store, self.scale)?;
        let shift = g.param(store, self.shift)?;
        if ctx.training() {
            let (y, stats) = g.batch_norm_train(x, scale, shift, BATCH_NORM_EPS)?;
            ctx.norm_updates.push(NormUpdate {
                mean: self.running_mean,
                var: self.running_var,
                tracked: self.tracked,
                stats,
            });
            Ok(y)
        } else {
            if store.tensor(self.tracked).data()[0] <= 0.0 {
                return Err(CoreError::State(format!(
                    "batch norm {} has no running statistics; run training or set them explicitly",
                    self.name
                )));
            }
            let mean = store.tensor(self.running_mean).data().to_vec();
            let var = store.tensor(self.running_var).data().to_vec();
            Ok(g.batch_norm_eval(x, scale, shift, &mean, &var, BATCH_NORM_EPS)?)
        }
    }
}

/// Every batch norm of a model, for bulk state operations.
pub trait HasNorms {
    fn norms(&self) -> Vec<&BatchNorm2d>;
}
