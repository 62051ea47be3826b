use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::Real;

/// Adaptive-moment optimizer with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: BTreeMap<String, i32>,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, steps: BTreeMap::new(), m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Updates every parameter named in `grads`; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let eps = T::lit(self.eps);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.len() != g.len() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} has {} values, parameter {}",
                    g.len(),
                    p.len()
                )));
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = T::lit(1.0 - self.beta1.powi(*t));
            let c2 = T::lit(1.0 - self.beta2.powi(*t));
            let lr = T::lit(self.lr);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flatten()
        .map(|g| {
            let g = g.to_f64().unwrap();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
