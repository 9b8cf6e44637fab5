//! Finite-difference gradient verification with a fourth-order central
//! stencil.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

pub const FD_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn coords(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// `f'(x) ≈ (8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, from
/// samples at `[x−2h, x−h, x+h, x+2h]`.
fn five_point(f: [f64; 4]) -> f64 {
    (8.0 * (f[2] - f[1]) - (f[3] - f[0])) / (12.0 * FD_STEP)
}

const OFFSETS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

fn eval(f: &mut impl FnMut(&ParamStore) -> Result<f64>, store: &ParamStore) -> Result<f64> {
    let y = f(store)?;
    if !y.is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    Ok(y)
}

/// Compares the gradients currently accumulated in `store` against central
/// differences of `f`, over up to `per_param` sampled coordinates of every
/// trainable parameter. Returns the max of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_difference_check(
    store: &mut ParamStore,
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    per_param: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.get(id).numel();
        for i in coords(n, per_param, &mut rng) {
            let analytic = store.get(id).grad.data()[i];
            let orig = store.get(id).value.data()[i];
            let mut samples = [0.0; 4];
            for (s, k) in samples.iter_mut().zip(OFFSETS) {
                store.get_mut(id).value.data_mut()[i] = orig + k * FD_STEP;
                *s = eval(&mut f, store)?;
            }
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = five_point(samples);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Same check for a free tensor input `x` with known gradient `analytic`.
pub fn finite_difference_check_input(
    x: &Tensor,
    analytic: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    x.same_shape(analytic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in coords(x.len(), max_coords, &mut rng) {
        let orig = probe.data()[i];
        let mut samples = [0.0; 4];
        for (s, k) in samples.iter_mut().zip(OFFSETS) {
            probe.data_mut()[i] = orig + k * FD_STEP;
            *s = f(&probe)?;
            if !s.is_finite() {
                return Err(Error::Numeric("objective is not finite".into()));
            }
        }
        probe.data_mut()[i] = orig;
        let numeric = five_point(samples);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}
