//! Central finite-difference gradient checks.
//!
//! Independent of the tape's analytic backward rules: the function under
//! test is only ever evaluated forward.

use rand::Rng;

use crate::tensor::{ParamGrads, ParamId, ParamStore};

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` with respect to coordinate `i` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Compare `analytic` against finite differences at the given coordinates;
/// returns the worst relative error.
pub fn max_rel_err(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    floor: f64,
) -> f64 {
    coords
        .iter()
        .map(|&i| rel_err(analytic[i], central_diff(f, x, i, h), floor))
        .fold(0.0, f64::max)
}

/// Worst relative error between `analytic` parameter gradients and central
/// differences of `loss` at the given `(parameter, element)` probes.
pub fn max_param_rel_err(
    store: &ParamStore,
    probes: &[(ParamId, usize)],
    analytic: &ParamGrads,
    loss: impl Fn(&ParamStore) -> f64,
    h: f64,
    floor: f64,
) -> f64 {
    let mut work = store.clone();
    probes
        .iter()
        .map(|&(id, k)| {
            let x0 = store.tensor(id).data()[k];
            work.tensor_mut(id).data_mut()[k] = x0 + h;
            let fp = loss(&work);
            work.tensor_mut(id).data_mut()[k] = x0 - h;
            let fm = loss(&work);
            work.tensor_mut(id).data_mut()[k] = x0;
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            rel_err(a, (fp - fm) / (2.0 * h), floor)
        })
        .fold(0.0, f64::max)
}

/// `count` random `(parameter, element)` pairs spread over the store.
pub fn random_probes<R: Rng>(store: &ParamStore, count: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    (0..count)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..store.tensor(id).numel()))
        })
        .collect()
}
