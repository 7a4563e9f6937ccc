//! Adamax (infinity-norm Adam) with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cast, Params, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamaxConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First moment, infinity-norm second moment and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState<F> {
    pub m: Vec<F>,
    pub u: Vec<F>,
    pub t: u64,
}

impl<F: Real> AdamaxState<F> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![F::zero(); n],
            u: vec![F::zero(); n],
            t: 0,
        }
    }
}

/// One update of a flat parameter vector. Increments `state.t` first, so the
/// first call uses bias correction `1 - beta1`.
pub fn adamax_step<F: Real>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamaxState<F>,
    cfg: &AdamaxConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Argument(format!(
            "adamax shape mismatch: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite gradient at coordinate {i}"
        )));
    }
    state.t += 1;
    let b1 = cast::<F>(cfg.beta1);
    let b2 = cast::<F>(cfg.beta2);
    let eps = cast::<F>(cfg.eps);
    let lr = cast::<F>(cfg.learning_rate);
    let step = lr / cast::<F>(1.0 - cfg.beta1.powi(state.t as i32));
    let decay = F::one() - lr * cast::<F>(cfg.weight_decay);
    for (((p, &g), m), u) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.u.iter_mut())
    {
        *m = b1 * *m + (F::one() - b1) * g;
        *u = (b2 * *u).max(g.abs());
        *p -= step * *m / (*u + eps);
        *p *= decay;
    }
    Ok(())
}

/// Adamax bound to one parameter set.
#[derive(Debug, Clone)]
pub struct Adamax<F> {
    pub config: AdamaxConfig,
    pub state: AdamaxState<F>,
}

impl<F: Real> Adamax<F> {
    pub fn new(config: AdamaxConfig, num_params: usize) -> Self {
        Self {
            config,
            state: AdamaxState::new(num_params),
        }
    }

    pub fn step<P: Params<F>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.to_flat();
        let mut flat = params.to_flat();
        adamax_step(&mut flat, &g, &mut self.state, &self.config)?;
        let mut off = 0;
        params.visit_mut("", &mut |_, _, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
        Ok(())
    }
}
