//! Central finite-difference checks of tape gradients.

use super::params::{ParamId, ParamRole, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Differences below this magnitude count as agreement.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        !self.entries.is_empty() && self.max_rel_error() <= tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the gradient of the scalar built by `loss` against central
/// differences with the given step. Up to `per_param` coordinates of each
/// parameter in `params` are probed (all of them when `params` is empty,
/// running statistics excluded).
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    per_param: usize,
    step: f64,
    seed: u64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
{
    let ids: Vec<ParamId> = if params.is_empty() {
        store
            .iter()
            .filter(|(_, p)| p.role != ParamRole::Buffer)
            .map(|(id, _)| id)
            .collect()
    } else {
        params.to_vec()
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out)?;
    tape.accumulate_into(store);
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.get(id).grad.clone()).collect();

    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, store)?;
        Ok(t.value(v).data()[0])
    };

    let mut rng = Rng::new(seed);
    let mut report = GradCheckReport::default();
    for (&id, grad) in ids.iter().zip(&analytic) {
        let len = grad.len();
        let coords: Vec<usize> = if per_param >= len {
            (0..len).collect()
        } else {
            let mut all: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut all);
            all.truncate(per_param);
            all
        };
        let mut worst = 0.0f64;
        for &k in &coords {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_error(grad[k], numeric));
        }
        report.entries.push(GradCheckEntry {
            name: store.get(id).name.clone(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
