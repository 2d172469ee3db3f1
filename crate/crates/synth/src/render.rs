//! Hard-edged rasterization of scenes into 8-bit images and binary masks.

use crate::scene::{Object, SceneSpec, Shape};

/// Neutral grey background.
pub const BACKGROUND: [u8; 3] = [128, 128, 128];

/// Whether the pixel with centre `(px, py)` lies inside the object.
pub fn covers(o: &Object, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - o.cx, py - o.cy);
    let r = o.radius;
    match o.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Triangle => {
            // Apex up at (0, -r), base corners at (±r, r).
            if dy < -r || dy > r {
                return false;
            }
            let half = r * (dy + r) / (2.0 * r);
            dx.abs() <= half
        }
    }
}

/// Pixel mask (row-major, `size × size`, 0/1) of one object.
pub fn object_mask(o: &Object, size: usize) -> Vec<u8> {
    let mut m = vec![0u8; size * size];
    for i in 0..size {
        for j in 0..size {
            if covers(o, j as f64 + 0.5, i as f64 + 0.5) {
                m[i * size + j] = 1;
            }
        }
    }
    m
}

/// `[3, size, size]` channel-major image and the referent's mask.
pub fn render(spec: &SceneSpec, referent: usize, size: usize) -> (Vec<u8>, Vec<u8>) {
    let plane = size * size;
    let mut image = Vec::with_capacity(3 * plane);
    for c in BACKGROUND {
        image.extend(std::iter::repeat_n(c, plane));
    }
    let mut mask = vec![0u8; plane];
    for (k, o) in spec.objects.iter().enumerate() {
        let m = object_mask(o, size);
        let rgb = o.color.rgb();
        for (p, &v) in m.iter().enumerate() {
            if v == 1 {
                for c in 0..3 {
                    image[c * plane + p] = rgb[c];
                }
                if k == referent {
                    mask[p] = 1;
                }
            }
        }
    }
    (image, mask)
}
