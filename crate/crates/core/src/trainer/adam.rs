//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::ndcore::{Array, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates mirroring a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (n, a) in params.iter() {
                s.insert(n, Array::zeros(a.shape())).expect("names unique");
            }
            s
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, params: &ParamStore<T>) -> Result<()> {
        let same = |s: &ParamStore<T>| {
            s.len() == params.len()
                && s.iter().zip(params.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
        };
        if !same(&self.m) || !same(&self.v) {
            return Err(Error::Shape("optimizer moments do not mirror the parameters".into()));
        }
        Ok(())
    }
}

/// One update. `grads` follows the store's parameter order. Nothing is
/// modified when a gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Array<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.check(params)?;
    if grads.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient for {name} has shape {:?}", g.shape())));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name} at element {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((((_, p), (_, m)), (_, v)), g) in params.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()).zip(grads) {
        for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let gf = g.as_f64();
            let mf = b1 * m.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * v.as_f64() + (1.0 - b2) * gf * gf;
            *m = T::lit(mf);
            *v = T::lit(vf);
            let upd = cfg.lr * (mf / c1) / ((vf / c2).sqrt() + cfg.eps);
            *p = T::lit(p.as_f64() - upd);
        }
    }
    Ok(())
}
