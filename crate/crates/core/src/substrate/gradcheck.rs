//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Number of parameter coordinates to probe; all of them if the store is
    /// smaller.
    pub coords: usize,
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so that coordinates whose
    /// true gradient is numerically zero are judged on absolute error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords: 200,
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `grad_fn`'s gradients with central differences of `loss_fn`
/// over a seeded sample of coordinates from non-frozen parameters.
pub fn grad_check<L, G>(
    store: &ParamStore<f64>,
    loss_fn: L,
    grad_fn: G,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamStore<f64>) -> Result<f64>,
    G: Fn(&ParamStore<f64>) -> Result<Gradients<f64>>,
{
    let analytic = grad_fn(store)?;
    let coords: Vec<(super::ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .flat_map(|(id, p)| (0..p.tensor.len()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picked: Vec<usize> = if coords.len() <= cfg.coords {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut rng, coords.len(), cfg.coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for k in picked {
        let (id, i) = coords[k];
        let orig = store.tensor(id).data()[i];
        probe.get_mut(id).tensor.data_mut()[i] = orig + cfg.step;
        let up = loss_fn(&probe)?;
        probe.get_mut(id).tensor.data_mut()[i] = orig - cfg.step;
        let down = loss_fn(&probe)?;
        probe.get_mut(id).tensor.data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic.param(id).map_or(0.0, |t| t.data()[i]);
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err);
        if rel_err.is_nan() || rel_err >= cfg.tol {
            report.failures.push(GradCheckFailure {
                param: store.get(id).name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    Ok(report)
}
