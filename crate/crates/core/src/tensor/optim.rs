use super::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) step: u64,
    pub(crate) first: Vec<Vec<f64>>,
    pub(crate) second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.grad().all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: p.name().to_string(),
                });
            }
        }
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = store.grad(id).data().to_vec();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn quadratic_store(w: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![w])).unwrap();
        store
    }

    fn loss_and_grad(store: &mut ParamStore) -> f64 {
        store.zero_grad();
        let id = store.id("w").unwrap();
        let mut tape = Tape::new();
        let w = tape.param(store, id);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, store).unwrap();
        tape.value(loss).data()[0]
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut store = quadratic_store(0.7);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(store.id("w").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for (w, dir) in [(2.0, -1.0), (-3.0, 1.0)] {
            let mut store = quadratic_store(w);
            loss_and_grad(&mut store);
            let mut adam = Adam::new(0.01);
            adam.step(&mut store).unwrap();
            let moved = store.value(store.id("w").unwrap()).data()[0] - w;
            assert!((moved - dir * 0.01).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn quadratic_decreases_every_step() {
        // Scalar simulation of the same recurrence, independent of the tape.
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            expected.push(w * w);
        }

        let mut store = quadratic_store(1.0);
        let mut adam = Adam::new(0.1);
        let mut prev = loss_and_grad(&mut store);
        for want in expected {
            adam.step(&mut store).unwrap();
            let now = loss_and_grad(&mut store);
            assert!(now < prev);
            assert!((now - want).abs() < 1e-12);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = quadratic_store(1.0);
        let id = store.id("w").unwrap();
        store.grad_mut(id).data_mut()[0] = f64::NAN;
        let err = Adam::new(0.1).step(&mut store).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { name } if name == "w"));
        assert_eq!(store.value(id).data(), &[1.0]);
    }
}
