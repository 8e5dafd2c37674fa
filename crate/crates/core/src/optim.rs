//! First-order optimizers over a [`ParamStore`].

use crate::params::ParamStore;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the accumulated grads, then clears them.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.velocity.is_empty() {
            self.velocity = params.tensors_mut().map(|t| vec![0.0; t.len()]).collect();
        }
        for (t, vel) in params.tensors_mut().zip(&mut self.velocity) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let wd = self.weight_decay;
            for ((w, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(&g) {
                *v = self.momentum * *v + g + wd * *w;
                *w -= self.lr * *v;
            }
            t.zero_grad();
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = params.tensors_mut().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic_grad(store: &mut ParamStore) {
        // loss = 0.5·Σ(w − 3)²
        for t in store.tensors_mut() {
            let g: Vec<f64> = t.data().iter().map(|w| w - 3.0).collect();
            t.accumulate_grad(&g).unwrap();
        }
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3]));
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for _ in 0..300 {
            quadratic_grad(&mut store);
            opt.step(&mut store);
        }
        for &w in store.iter().next().unwrap().1.data() {
            assert!((w - 3.0).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]));
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..2000 {
            quadratic_grad(&mut store);
            opt.step(&mut store);
        }
        for &w in store.iter().next().unwrap().1.data() {
            assert!((w - 3.0).abs() < 1e-3, "{w}");
        }
    }
}
