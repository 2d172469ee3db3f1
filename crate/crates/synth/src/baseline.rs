//! Reference scores that need no model.

use crate::dataset::SampleRecord;
use crate::render::object_mask;

/// IoU of two binary masks; two empty masks count as a perfect match.
pub fn mask_iou(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Expected mIoU (percent) of predicting the mask of one scene object chosen
/// uniformly at random: per sample, the mean IoU over all objects.
pub fn random_object_miou(samples: &[SampleRecord]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let size = (s.mask.len() as f64).sqrt() as usize;
            let objs = &s.scene.objects;
            objs.iter()
                .map(|o| mask_iou(&object_mask(o, size), &s.mask))
                .sum::<f64>()
                / objs.len() as f64
        })
        .sum();
    100.0 * total / samples.len() as f64
}
