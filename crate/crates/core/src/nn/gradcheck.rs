//! Finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::params::ParameterStore;
use crate::seeding::stream_rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// How the per-parameter coordinate subsample is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordSelection {
    /// Seeded uniform subsample.
    Random,
    /// The coordinates with the largest analytic gradient magnitudes. Deep
    /// networks at initialization carry many coordinates with gradients
    /// below the f64 finite-difference noise floor (~1e-9); the dominant
    /// coordinates of each tensor are the ones a wrong backward formula
    /// would corrupt, and the ones central differences can actually resolve.
    LargestAnalytic,
}

/// Compare the gradients currently stored for every trainable parameter
/// against central finite differences of `loss_fn`, on a subsample of at
/// most `max_coords_per_param` coordinates per parameter.
///
/// Relative error per coordinate: |ga - gn| / max(|ga|, |gn|, 1e-8). The
/// caller must have run the analytic backward already so the grad slots are
/// populated, and `loss_fn` must be a pure function of the parameter values
/// (fix any dropout seeds; skip running-stat updates).
pub fn gradient_check<F>(
    store: &mut ParameterStore,
    loss_fn: F,
    h: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    gradient_check_with(store, loss_fn, h, max_coords_per_param, seed, CoordSelection::Random)
}

pub fn gradient_check_with<F>(
    store: &mut ParameterStore,
    mut loss_fn: F,
    h: f64,
    max_coords_per_param: usize,
    seed: u64,
    selection: CoordSelection,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::validation("finite-difference step must be positive"));
    }
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let mut rng = stream_rng(seed, "gradcheck");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    for name in names {
        let len = store.value(&name).len();
        let mut coords: Vec<usize> = (0..len).collect();
        match selection {
            CoordSelection::Random => coords.shuffle(&mut rng),
            CoordSelection::LargestAnalytic => {
                let grads = store.get(&name).grad.data();
                coords.sort_by(|&a, &b| {
                    grads[b]
                        .abs()
                        .partial_cmp(&grads[a].abs())
                        .expect("finite gradients")
                });
            }
        }
        coords.truncate(max_coords_per_param);
        coords.sort_unstable();
        for idx in coords {
            let analytic = store.get(&name).grad.data()[idx];
            let original = store.value(&name).data()[idx];

            store.get_mut(&name).value.data_mut()[idx] = original + h;
            let plus = loss_fn(store)?;
            store.get_mut(&name).value.data_mut()[idx] = original - h;
            let minus = loss_fn(store)?;
            store.get_mut(&name).value.data_mut()[idx] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss while perturbing {name}[{idx}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{idx}]");
            }
        }
    }
    Ok(report)
}
