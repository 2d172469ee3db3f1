//! Named parameters, their kinds, and the store that owns them.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// What role a parameter plays. Drives the freeze policy and the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Fixed filters (Sobel, Laplace, blur). Never trainable.
    FixedKernel,
    /// Normalization running statistics. State, not a parameter; never trainable.
    RunningStat,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::NormScale => "norm_scale",
            ParamKind::NormShift => "norm_shift",
            ParamKind::FixedKernel => "fixed_kernel",
            ParamKind::RunningStat => "running_stat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm_scale" => ParamKind::NormScale,
            "norm_shift" => ParamKind::NormShift,
            "fixed_kernel" => ParamKind::FixedKernel,
            "running_stat" => ParamKind::RunningStat,
            _ => return None,
        })
    }

    /// Kinds that may ever carry `trainable = true`.
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::FixedKernel | ParamKind::RunningStat)
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Fails when asked to make a fixed kernel or running statistic trainable.
    pub fn set_trainable(&mut self, trainable: bool) -> Result<()> {
        if trainable && !self.kind.learnable() {
            return Err(TensorError::Contract(format!(
                "parameter {} of kind {} cannot be trainable",
                self.name, self.kind
            )));
        }
        self.trainable = trainable;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.tensor.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every parameter of a model. Initial values are a pure function of
/// `(seed, name)`, so adding a module never perturbs another module's init.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Deterministic generator for a named parameter.
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::Config(format!(
                "duplicate parameter name {name}"
            )));
        }
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite {
                op: "parameter init",
            });
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            kind,
            tensor,
            trainable: kind.learnable(),
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Symmetric uniform fan-in init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform_fan_in(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(name, shape, bound, kind)
    }

    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let mut rng = self.rng_for(name);
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.add(name, kind, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        self.add(name, kind, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        self.add(name, kind, Tensor::ones(shape))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    /// Overwrites a parameter's value; the shape must not change.
    pub fn set_tensor(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_tensor",
                lhs: p.tensor.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        p.tensor = t;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Applies `pred` to every learnable parameter's trainable flag.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&Parameter) -> bool) {
        for p in &mut self.params {
            p.trainable = p.kind.learnable() && pred(p);
        }
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        match self.grads.get_mut(&id) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(id, g.to_vec());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
