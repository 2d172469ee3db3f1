//! Dataset loading and batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sera_synth::{generate_dataset, read_dataset, Dataset, DatasetConfig, SampleRecord};
use sera_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::Result;

/// Loads the configured dataset from disk (verifying its config hash) or
/// generates it in memory.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Ok(match &cfg.data_dir {
        Some(dir) => read_dataset(dir, Some(&cfg.data))?,
        None => generate_dataset(&cfg.data)?,
    })
}

/// Only the validation split. Samples have independent rng streams, so a
/// generated validation split does not depend on the training-split size.
pub fn load_val(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    Ok(match &cfg.data_dir {
        Some(dir) => read_dataset(dir, Some(&cfg.data))?.val,
        None => {
            generate_dataset(&DatasetConfig {
                train: 0,
                ..cfg.data.clone()
            })?
            .val
        }
    })
}

pub struct Batch {
    /// `[B, 3, H, W]` in [0, 1].
    pub images: Tensor,
    /// `[B, 1, H, W]` binary.
    pub masks: Tensor,
    pub expressions: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(samples: &[&SampleRecord]) -> Result<Self> {
        let n = samples.len();
        let px = samples.first().map_or(0, |s| s.mask.len());
        let side = (px as f64).sqrt() as usize;
        let mut img = Vec::with_capacity(n * 3 * px);
        let mut mask = Vec::with_capacity(n * px);
        for s in samples {
            img.extend(s.image_f64());
            mask.extend(s.mask_f64());
        }
        Ok(Self {
            images: Tensor::new(&[n, 3, side, side], img)?,
            masks: Tensor::new(&[n, 1, side, side], mask)?,
            expressions: samples.iter().map(|s| s.expression.ids.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.expressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expressions.is_empty()
    }
}

/// Sample order for one epoch, a pure function of (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_reproducible_permutation() {
        let a = epoch_order(100, 3, 2);
        assert_eq!(a, epoch_order(100, 3, 2));
        assert_ne!(a, epoch_order(100, 3, 3));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }
}
