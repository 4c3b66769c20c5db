//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_param: String,
    pub checked: usize,
}

/// Picks `count` parameter coordinates deterministically from `seed`,
/// spread over the whole flat vector.
pub fn sample_coords(flat_len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..flat_len).collect();
    all.shuffle(&mut rng);
    all.truncate(count.min(flat_len));
    all.sort_unstable();
    all
}

/// Compares an analytic gradient against central differences of `loss` at
/// the listed coordinates. Relative error is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
///
/// `params` is perturbed in place and restored bit-exactly before returning.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    analytic: &[f64],
    coords: &[usize],
    step: f64,
    mut loss: F,
) -> Result<GradCheckOutcome>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Validation(format!("step must be positive, got {step}")));
    }
    if analytic.len() != params.flat_len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, store holds {}",
            analytic.len(),
            params.flat_len()
        )));
    }
    let mut outcome = GradCheckOutcome {
        max_rel_err: 0.0,
        worst_coord: 0,
        worst_param: String::new(),
        checked: 0,
    };
    for &i in coords {
        let original = params.flat_get(i);
        params.flat_set(i, original + step);
        let up = loss(params)?;
        params.flat_set(i, original - step);
        let down = loss(params)?;
        params.flat_set(i, original);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while probing coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        outcome.checked += 1;
        if rel > outcome.max_rel_err {
            outcome.max_rel_err = rel;
            outcome.worst_coord = i;
            outcome.worst_param = params.owner_of(i).to_string();
        }
    }
    Ok(outcome)
}
