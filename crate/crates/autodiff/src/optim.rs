//! Adam optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    t: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S, beta1: S, beta2: S, eps: S) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every gradient entry. Parameters without a gradient
    /// this step keep their moment state untouched.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &BTreeMap<String, Vec<S>>) {
        self.t += 1;
        let t = S::from_u64(self.t).unwrap();
        let bc1 = S::one() - self.beta1.powf(t);
        let bc2 = S::one() - self.beta2.powf(t);
        for (name, grad) in grads {
            let value = params
                .get_mut(name)
                .unwrap_or_else(|_| panic!("gradient for unknown parameter {name:?}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); grad.len()]);
            for ((p, &g), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (S::one() - self.beta1) * g;
                *vi = self.beta2 * *vi + (S::one() - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
