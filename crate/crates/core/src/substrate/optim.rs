use super::params::{Gradients, ParamStore};
use super::{lit, Real};
use crate::error::{ensure, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |p: &super::Parameter<T>| vec![T::zero(); p.tensor.len()];
        Self {
            step: 0,
            first: store.iter().map(|(_, p)| zeros(p)).collect(),
            second: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }
}

/// One bias-corrected Adam update of every non-frozen parameter that has a
/// gradient.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hp: Adam,
) -> Result<()> {
    ensure!(
        state.first.len() == store.len() && grads.len() <= store.len(),
        Shape,
        "optimizer state does not match the parameter store"
    );
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (lit::<T>(hp.beta1), lit::<T>(hp.beta2));
    let (one_b1, one_b2) = (lit::<T>(1.0 - hp.beta1), lit::<T>(1.0 - hp.beta2));
    let step_size = lit::<T>(lr / bc1);
    let inv_bc2 = lit::<T>(1.0 / bc2);
    let eps = lit::<T>(hp.eps);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let Some(g) = grads.param(id) else { continue };
        let p = store.get_mut(id);
        if p.frozen {
            continue;
        }
        ensure!(
            g.len() == p.tensor.len(),
            Shape,
            "gradient shape mismatch for {}",
            p.name
        );
        let m = &mut state.first[id.index()];
        let v = &mut state.second[id.index()];
        for (((w, &gv), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + one_b1 * gv;
            *vi = b2 * *vi + one_b2 * gv * gv;
            *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
