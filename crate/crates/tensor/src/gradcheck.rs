//! Central finite-difference gradient oracle.
//!
//! The scalar function is rebuilt from scratch for every perturbation, so the
//! numeric side never touches the tape's backward rules.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Floor on the relative-error denominator `max(|a|, |n|, floor)`.
    pub denom_floor: f64,
    /// Coordinates whose absolute disagreement is at most this count as
    /// exact: below it, finite differences only measure rounding noise.
    pub abs_tol: f64,
    /// At most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            denom_floor: 1e-8,
            abs_tol: 1e-10,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Worst relative error per parameter, in the order checked.
    pub per_param: Vec<(String, f64)>,
}

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = f(store, &mut g)?;
    g.value(v).item()
}

fn coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            if m == 0 {
                return Vec::new();
            }
            let step = len as f64 / m as f64;
            (0..m).map(|i| ((i as f64 + 0.5) * step) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares tape gradients of `f` with central differences for every listed
/// parameter. `f` must build its scalar output on the supplied graph and be a
/// deterministic function of the store; a second evaluation that differs
/// bitwise is reported as a contract error.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    cfg: &GradCheckConfig,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    if cfg.h <= 0.0 {
        return Err(TensorError::Config(
            "finite-difference step must be > 0".into(),
        ));
    }
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    let base = g.value(out).item()?;
    let again = evaluate(store, &mut f)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Contract(
            "function under gradient check is not deterministic (is routing noise on?)".into(),
        ));
    }
    g.backward(out)?;
    let grads = g.param_grads();

    let mut report = GradCheckReport::default();
    for &id in ids {
        let name = store.get(id).name.clone();
        let len = store.get(id).numel();
        let analytic: Vec<f64> = grads.get(id).map_or_else(|| vec![0.0; len], |s| s.to_vec());
        let mut worst_here: f64 = 0.0;
        for i in coords(len, cfg.max_coords_per_param) {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + cfg.h;
            let plus = evaluate(store, &mut f);
            store.get_mut(id).tensor.data_mut()[i] = orig - cfg.h;
            let minus = evaluate(store, &mut f);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.h);
            let abs = (analytic[i] - numeric).abs();
            let rel = if abs <= cfg.abs_tol {
                0.0
            } else {
                relative_error(analytic[i], numeric, cfg.denom_floor)
            };
            report.coords_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), i));
            }
        }
        report.per_param.push((name, worst_here));
    }
    Ok(report)
}
