//! Raw slice kernels shared by the forward and backward passes.

use crate::tensor::strides;

/// `C = A·B + beta·C` for an `m×k` by `k×n` product with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * c_strides.0 + j * c_strides.1;
                c[idx] *= beta;
            }
        }
        return;
    }
    debug_assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    debug_assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    debug_assert!((m - 1) * c_strides.0 + (n - 1) * c_strides.1 < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // guarantees: all strided accesses stay inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Output shape of a right-aligned broadcast, or `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each linear index of `out`, the linear index into an operand of shape
/// `inp` broadcast to `out`. `None` means the shapes are identical.
pub(crate) fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let n: usize = out.iter().product();
    let lead = out.len() - inp.len();
    let in_strides = strides(inp);
    let mut eff = vec![0usize; out.len()];
    for (i, s) in in_strides.iter().enumerate() {
        if inp[i] != 1 {
            eff[lead + i] = *s;
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Copies `data` (shape `shape`) into the axis order `perm`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 {
        return (data.to_vec(), out_shape);
    }
    // Innermost axis is copied in a tight loop.
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let outer = n.checked_div(inner).unwrap_or(0);
    let mut idx = vec![0usize; nd.saturating_sub(1)];
    let mut off = 0usize;
    for _ in 0..outer {
        for j in 0..inner {
            out.push(data[off + j * inner_stride]);
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Same-size depthwise cross-correlation of one `h×w` plane with a `k×k` filter.
pub(crate) fn depthwise_plane(
    x: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    k: usize,
    replicate: bool,
    out: &mut [f64],
) {
    let p = (k / 2) as isize;
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for u in 0..k {
                let si = i as isize + u as isize - p;
                let si = if replicate {
                    si.clamp(0, h as isize - 1)
                } else if si < 0 || si >= h as isize {
                    continue;
                } else {
                    si
                } as usize;
                for v in 0..k {
                    let sj = j as isize + v as isize - p;
                    let sj = if replicate {
                        sj.clamp(0, w as isize - 1)
                    } else if sj < 0 || sj >= w as isize {
                        continue;
                    } else {
                        sj
                    } as usize;
                    acc += kernel[u * k + v] * x[si * w + sj];
                }
            }
            out[i * w + j] = acc;
        }
    }
}

/// Backward of [`depthwise_plane`]: accumulates into `dx` and `dk`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_plane_backward(
    x: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    k: usize,
    replicate: bool,
    gy: &[f64],
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let p = (k / 2) as isize;
    let mut dx = dx;
    let mut dk = dk;
    for i in 0..h {
        for j in 0..w {
            let g = gy[i * w + j];
            if g == 0.0 {
                continue;
            }
            for u in 0..k {
                let si = i as isize + u as isize - p;
                let si = if replicate {
                    si.clamp(0, h as isize - 1)
                } else if si < 0 || si >= h as isize {
                    continue;
                } else {
                    si
                } as usize;
                for v in 0..k {
                    let sj = j as isize + v as isize - p;
                    let sj = if replicate {
                        sj.clamp(0, w as isize - 1)
                    } else if sj < 0 || sj >= w as isize {
                        continue;
                    } else {
                        sj
                    } as usize;
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[si * w + sj] += kernel[u * k + v] * g;
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        dk[u * k + v] += x[si * w + sj] * g;
                    }
                }
            }
        }
    }
}

/// Interpolation taps for half-pixel bilinear resampling along one axis.
pub(crate) fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out = input * factor;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}
