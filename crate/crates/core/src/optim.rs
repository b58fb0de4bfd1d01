use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl Adam {
    /// Updates every parameter in `active` from its accumulated gradient,
    /// then clears all gradients in the store.
    pub fn step(&self, store: &mut ParamStore, active: &[ParamId]) -> Result<()> {
        if let Some(&missing) = active.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(Error::MissingGradient(store.get(missing).name.clone()));
        }
        for &id in active {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            p.step += 1;
            let bias1 = 1.0 - self.beta1.powi(p.step as i32);
            let bias2 = 1.0 - self.beta2.powi(p.step as i32);
            let values = p.value.data_mut();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for i in 0..values.len() {
                let g = grad.data()[i] + self.weight_decay * values[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn quadratic_step(store: &mut ParamStore, id: ParamId, adam: &Adam) {
        let mut tape = Tape::new();
        let w = tape.param(store, id);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, store).unwrap();
        adam.step(store, &[id]).unwrap();
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![0.3, -0.7])).unwrap();
        store.get_mut(id).grad = Some(Tensor::zeros(1, 2));
        let adam = Adam {
            weight_decay: 0.0,
            ..Adam::default()
        };
        adam.step(&mut store, &[id]).unwrap();
        assert_eq!(store.value(id).data(), &[0.3, -0.7]);
    }

    #[test]
    fn one_step_descends() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        quadratic_step(&mut store, id, &Adam { lr: 0.1, ..Adam::default() });
        assert!(store.value(id).item() < 1.0);
    }

    #[test]
    fn converges_on_two_dimensional_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0, -1.5])).unwrap();
        let adam = Adam { lr: 0.1, ..Adam::default() };
        for _ in 0..200 {
            quadratic_step(&mut store, id, &adam);
        }
        assert!(store.value(id).frobenius_norm() < 1e-2);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("attn.score", Tensor::scalar(1.0)).unwrap();
        let err = Adam::default().step(&mut store, &[id]).unwrap_err();
        assert!(err.to_string().contains("attn.score"));
    }
}
