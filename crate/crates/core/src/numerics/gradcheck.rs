//! Central finite-difference checks against the reverse-mode gradients.

use alloc::vec::Vec;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Relative error `|a − n| / max(|a|, |n|)`, with differences below
/// `abs_floor` counted as zero error.
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let d = libm::fabs(analytic - numeric);
    if d <= abs_floor {
        return 0.0;
    }
    d / libm::fabs(analytic).max(libm::fabs(numeric))
}

/// One compared coordinate.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Checks `d f(x) / dx` at every coordinate of `x`, where `f` maps a
/// differentiable input to a scalar.
pub fn check_input<F>(x: &Tensor, f: F) -> Result<Vec<Probe>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let store = ParamStore::new();
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new(&store, false);
        let v = g.variable(t);
        let y = f(&mut g, v)?;
        Ok(g.scalar(y))
    };
    let mut g = Graph::new(&store, false);
    let v = g.variable(x);
    let y = f(&mut g, v)?;
    let grads = g.backward(y)?;
    let analytic = grads.wrt(v).map(|s| s.to_vec()).unwrap_or_else(|| alloc::vec![0.0; x.len()]);
    let mut probes = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let numeric = (eval(&xp)? - eval(&xm)?) / (2.0 * FD_STEP);
        probes.push(Probe { analytic: analytic[i], numeric, rel_err: rel_err(analytic[i], numeric, 1e-9) });
    }
    Ok(probes)
}

/// Checks the gradient of a scalar model loss with respect to selected
/// parameter coordinates. `f` must be deterministic: any noise has to be
/// drawn from a stream re-seeded inside `f`.
pub fn check_params<F>(store: &ParamStore, training: bool, coords: &[(ParamId, usize)], f: F) -> Result<Vec<Probe>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    check_params_step(store, training, coords, FD_STEP, f)
}

/// [`check_params`] with an explicit step. Large whole-model losses lose
/// digits to cancellation at [`FD_STEP`]; a wider step trades that for a
/// smaller truncation error.
pub fn check_params_step<F>(store: &ParamStore, training: bool, coords: &[(ParamId, usize)], step: f64, f: F) -> Result<Vec<Probe>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store, training);
    let y = f(&mut g)?;
    let grads = g.backward(y)?;
    let mut work = store.clone();
    let mut probes = Vec::with_capacity(coords.len());
    for &(id, k) in coords {
        let analytic = grads.param(id).map_or(0.0, |gr| gr[k]);
        let orig = work.get(id).tensor.data()[k];
        work.get_mut(id).tensor.data_mut()[k] = orig + step;
        let plus = {
            let mut g = Graph::new(&work, training);
            let y = f(&mut g)?;
            g.scalar(y)
        };
        work.get_mut(id).tensor.data_mut()[k] = orig - step;
        let minus = {
            let mut g = Graph::new(&work, training);
            let y = f(&mut g)?;
            g.scalar(y)
        };
        work.get_mut(id).tensor.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        probes.push(Probe { analytic, numeric, rel_err: rel_err(analytic, numeric, 1e-9) });
    }
    Ok(probes)
}

pub fn max_rel_err(probes: &[Probe]) -> f64 {
    probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
}
