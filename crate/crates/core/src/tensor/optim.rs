//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use crate::error::{IvaError, Result};
use crate::tensor::param::ParamStore;

/// Cosine decay from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn default_config(weight_decay: f64) -> Self {
        Self::new(0.9, 0.999, 1e-8, weight_decay)
    }

    /// One update over every non-frozen parameter. Frozen parameters are
    /// left bitwise unchanged. A missing gradient on a non-frozen parameter
    /// is a state error.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.get(id).frozen {
                continue;
            }
            let idx = id.0;
            while self.m.len() <= idx {
                self.m.push(Vec::new());
                self.v.push(Vec::new());
            }
            let param = store.get_mut(id);
            let n = param.tensor.numel();
            let grad = match param.tensor.grad() {
                Some(g) => g.to_vec(),
                None => {
                    return Err(IvaError::State(format!(
                        "missing gradient on non-frozen parameter `{}`",
                        param.name
                    )))
                }
            };
            if self.m[idx].is_empty() {
                self.m[idx] = vec![0.0; n];
                self.v[idx] = vec![0.0; n];
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data = param.tensor.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                // Decoupled decay: applied to the value, not the gradient.
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 3e-4, 0.0), 3e-4);
        assert!(cosine_lr(100, 100, 3e-4, 0.0).abs() < 1e-18);
        let mid = cosine_lr(50, 100, 3e-4, 0.0);
        assert!((mid - 1.5e-4).abs() < 1e-12);
    }

    #[test]
    fn frozen_param_bitwise_unchanged() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap())
            .unwrap();
        store.get_mut(id).frozen = true;
        store.tensor_mut(id).accumulate_grad(&[10.0, -10.0]);
        let before: Vec<u64> = store.tensor(id).data().iter().map(|f| f.to_bits()).collect();
        let mut opt = AdamW::default_config(0.01);
        opt.step(&mut store, 1e-2).unwrap();
        let after: Vec<u64> = store.tensor(id).data().iter().map(|f| f.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(vec![2])).unwrap();
        let mut opt = AdamW::default_config(0.0);
        let err = opt.step(&mut store, 1e-3).unwrap_err();
        assert!(matches!(err, IvaError::State(_)));
    }

    #[test]
    fn quadratic_converges() {
        // min (x - 3)^2 from x = 0.
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0)).unwrap();
        let mut opt = AdamW::default_config(0.0);
        for _ in 0..200 {
            let x = store.tensor(id).data()[0];
            let grad = 2.0 * (x - 3.0);
            store.zero_grads();
            store.tensor_mut(id).accumulate_grad(&[grad]);
            opt.step(&mut store, 0.1).unwrap();
        }
        let x = store.tensor(id).data()[0];
        assert!((x - 3.0).abs() < 1e-3, "converged to {x}");
    }
}
