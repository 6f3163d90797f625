use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tensor::{Gradients, ParamStore};
use super::NumericsError;

/// Anything that owns a [`ParamStore`] that can be perturbed in place.
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

pub const MIN_SAMPLES_PER_GROUP: usize = 32;

/// Compares tape gradients with central differences on a random subsample of
/// at least 32 coordinates per parameter tensor (all of them when smaller).
///
/// `f` returns the objective and its gradient; only the value is used at
/// perturbed points.
pub fn grad_check<S, F>(
    state: &mut S,
    f: F,
    eps: f64,
    samples_per_group: usize,
    seed: u64,
) -> Result<Vec<GroupReport>, NumericsError>
where
    S: HasParams,
    F: Fn(&S) -> Result<(f64, Gradients), NumericsError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NumericsError::InvalidEpsilon(eps));
    }
    let (base, analytic) = f(state)?;
    if !base.is_finite() {
        return Err(NumericsError::NonFiniteLoss(base));
    }
    let samples = samples_per_group.max(MIN_SAMPLES_PER_GROUP);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = state.params().ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let len = state.params().get(id).len();
        let coords: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, samples).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = state.params().get(id).data()[c];
            state.params_mut().get_mut(id).data_mut()[c] = orig + eps;
            let plus = f(state)?.0;
            state.params_mut().get_mut(id).data_mut()[c] = orig - eps;
            let minus = f(state)?.0;
            state.params_mut().get_mut(id).data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFiniteLoss(if plus.is_finite() { minus } else { plus }));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.get(id).data()[c];
            worst = worst.max(relative_error(exact, numeric));
        }
        reports.push(GroupReport {
            name: state.params().name(id).to_string(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
