use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction over the accumulated gradients of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr`. Every gradient is checked
    /// before any parameter changes.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for p in store.iter() {
            if let Some((i, v)) = p.grad.first_non_finite() {
                return Err(Error::numerics(
                    format!("gradient of {}", p.name),
                    format!("non-finite value {v} at flat index {i}"),
                ));
            }
        }
        self.steps += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in store.iter_mut() {
            let grad = p.grad.data();
            let m = p.m.data_mut();
            for (mv, &g) in m.iter_mut().zip(grad) {
                *mv = T::from_f64_lossy(beta1 * mv.as_f64() + (1.0 - beta1) * g.as_f64());
            }
            let v = p.v.data_mut();
            for (vv, &g) in v.iter_mut().zip(grad) {
                let g = g.as_f64();
                *vv = T::from_f64_lossy(beta2 * vv.as_f64() + (1.0 - beta2) * g * g);
            }
            let (m, v) = (p.m.data(), p.v.data());
            let value = p.value.data_mut();
            for ((w, &mv), &vv) in value.iter_mut().zip(m).zip(v) {
                let m_hat = mv.as_f64() / c1;
                let v_hat = vv.as_f64() / c2;
                let mut x = w.as_f64();
                if weight_decay != 0.0 {
                    x -= lr * weight_decay * x;
                }
                x -= lr * m_hat / (v_hat.sqrt() + eps);
                *w = T::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Half-cosine decay from `lr_init` at iteration 0 to `lr_final` at
/// iteration `total_iters − 1`.
pub fn cosine_lr(iter: usize, total_iters: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total_iters <= 1 {
        return lr_init;
    }
    let last = (total_iters - 1) as f64;
    let t = (iter as f64).min(last);
    if t == last {
        return lr_final;
    }
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (PI * t / last).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Shape, Tensor};

    fn scalar_store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add(Parameter::new("p", vec![1], Tensor::scalar(value)).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::scalar(grad);
        store
    }

    fn value(store: &ParamStore<f64>) -> f64 {
        store.iter().next().unwrap().value.data()[0]
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // m̂ = 1, v̂ = 1, so p = 1 − lr / (1 + eps).
        let mut store = scalar_store(1.0, 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, 1e-3).unwrap();
        assert_eq!(value(&store), 1.0 - 1e-3 / (1.0 + 1e-8));
        assert!((value(&store) - 0.99900000000999999990).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_value_and_decays_moments() {
        let mut store = scalar_store(0.25, 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, 1e-3).unwrap();
        let after_first = value(&store);
        let p = store.iter_mut().next().unwrap();
        p.grad = Tensor::scalar(0.0);
        let (m0, v0) = (p.m.data()[0], p.v.data()[0]);
        let mut untouched = scalar_store(-3.0, 0.0);
        for _ in 0..5 {
            adam.step(&mut untouched, 1e-2).unwrap();
        }
        assert_eq!(value(&untouched), -3.0);
        adam.step(&mut store, 1e-3).unwrap();
        let p = store.iter().next().unwrap();
        assert!(p.m.data()[0].abs() < m0.abs() && p.v.data()[0] < v0);
        assert!(value(&store) < after_first);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut store = scalar_store(0.0, 0.5);
        let mut adam = Adam::new(AdamConfig::default());
        let mut last = 0.0;
        for _ in 0..200 {
            let before = value(&store);
            adam.step(&mut store, 1e-3).unwrap();
            last = before - value(&store);
        }
        assert!((last - 1e-3).abs() < 1e-9, "{last}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = scalar_store(1.0, f64::NAN);
        let err = Adam::new(AdamConfig::default()).step(&mut store, 1e-3).unwrap_err();
        match err {
            Error::Numerics { context, .. } => assert!(context.contains('p')),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(value(&store), 1.0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add(Parameter::new("w", vec![2], Tensor::zeros(Shape::new(1, 2, 1, 1))).unwrap())
            .unwrap();
        store.get_mut(id).grad = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = store.get(id).grad.data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let (a, b) = (1e-3, 1e-6);
        assert_eq!(cosine_lr(0, 101, a, b), a);
        assert_eq!(cosine_lr(100, 101, a, b), b);
        assert!((cosine_lr(50, 101, a, b) - (a + b) / 2.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for i in 0..101 {
            let lr = cosine_lr(i, 101, a, b);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(cosine_lr(0, 1, a, b), a);
    }
}
