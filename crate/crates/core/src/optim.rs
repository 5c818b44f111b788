//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Updates every parameter in the store and clears its gradient.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        self.step_scaled(store, |_| 1.0)
    }

    /// Like [`Adam::step`] with a per-parameter learning-rate multiplier.
    pub fn step_scaled(&self, store: &mut ParamStore, lr_scale: impl Fn(ParamId) -> f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.tensor.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        for i in 0..store.len() {
            let id = ParamId(i);
            let lr = self.lr * lr_scale(id);
            let p = store.get_mut(id);
            let grad = p.tensor.grad.take().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut p.first_moment, &mut p.second_moment);
            for (k, value) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *value -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(0.0);
        s.get_mut(id).tensor.accumulate_grad(&[1.0]);
        Adam::with_lr(1e-4).step(&mut s).unwrap();
        assert!((s.tensor(id).item() + 1e-4).abs() < 1e-12);
        assert!(s.get(id).tensor.grad.is_none());
        assert_eq!(s.get(id).step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = scalar_store(2.5);
        s.get_mut(id).tensor.accumulate_grad(&[0.0]);
        Adam::with_lr(0.1).step(&mut s).unwrap();
        assert_eq!(s.tensor(id).item(), 2.5);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (mut s, _) = scalar_store(0.0);
        match Adam::default().step(&mut s) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Reference scalar Adam written out independently.
    fn reference_adam(mut w: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t as i32))) / ((v / (1.0 - b2.powi(t as i32))).sqrt() + eps);
        }
        w
    }

    #[test]
    fn quadratic_bowl_converges() {
        let expected = reference_adam(0.0, 0.1, 500);
        assert!((expected - 3.0).abs() < 0.05, "reference ended at {expected}");
        let (mut s, id) = scalar_store(0.0);
        let opt = Adam::with_lr(0.1);
        for _ in 0..500 {
            let w = s.tensor(id).item();
            s.get_mut(id).tensor.accumulate_grad(&[2.0 * (w - 3.0)]);
            opt.step(&mut s).unwrap();
        }
        let w = s.tensor(id).item();
        assert!((w - 3.0).abs() < 0.05);
        assert_eq!(w, expected);
    }
}
