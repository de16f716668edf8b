//! Optimizers over [`TensorMap`]s.

use super::tensor::{GradSet, TensorMap};

/// `θ ← θ − lr·g` on every name present in `grads`.
pub fn sgd_step(params: &mut TensorMap, grads: &GradSet, lr: f64) {
    params.add_scaled(grads, -lr);
}

/// Adam, used for the non-private training loops (base pretraining, MLM
/// adaptation, tagging).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: TensorMap,
    v: TensorMap,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: TensorMap::new(),
            v: TensorMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut TensorMap, grads: &GradSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), g.mapv(|_| 0.0));
                self.v.insert(name.clone(), g.mapv(|_| 0.0));
            }
            let m = self.m.get_mut(name).expect("inserted above");
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v.get_mut(name).expect("inserted above");
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let m = self.m.get(name);
            let v = self.v.get(name);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
        }
    }
}
