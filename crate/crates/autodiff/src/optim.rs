use std::collections::BTreeMap;

use crate::{Gradients, ParamId, ParamStore};

/// Adam with bias correction. The learning rate is a public field so callers
/// can apply their own schedule between steps.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.params() {
            if store.entry(id).is_buffer {
                continue;
            }
            let n = g.numel();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                // parameter was resized (e.g. grown); restart its moments
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            let w = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
