//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments of one parameter tensor and the number of updates it received.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Optimizer state. Moments are created on a parameter's first gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub moments: BTreeMap<String, Moments>,
    /// Completed calls to [`adam_step`].
    pub steps: u64,
}

/// One update of every parameter that has a gradient in `grads`.
/// Parameters without a gradient are left untouched, moments included.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        if p.len() != g.len() {
            return Err(Error::dim(format!(
                "gradient of `{name}` has {} entries, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
            step: 0,
        });
        mo.step += 1;
        let c1 = 1.0 - hyper.beta1.powi(mo.step as i32);
        let c2 = 1.0 - hyper.beta2.powi(mo.step as i32);
        for (((x, &gi), m), v) in p.data_mut().iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * gi;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    state.steps += 1;
    Ok(())
}
