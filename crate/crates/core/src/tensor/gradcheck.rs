//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per parameter; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares tape gradients of the scalar returned by `f` against central
/// differences for every parameter in `params` (all parameters when `None`).
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: Option<&[ParamId]>,
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok(tape.value(out).data()[0])
    };

    store.zero_grad();
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        tape.backward(out, store)?;
    }
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.ids().collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for id in ids {
        let analytic = store.grad(id).clone();
        let name = store.get(id).name().to_string();
        if !analytic.all_finite() {
            return Err(Error::NonFiniteGradient { name });
        }
        let n = analytic.len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + cfg.step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - cfg.step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient { name });
            }
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
