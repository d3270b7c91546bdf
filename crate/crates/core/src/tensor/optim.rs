use super::array::Tensor;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr`; `lr == 0` leaves parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
            }
            if lr == 0.0 {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            for j in 0..g.len() {
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at epoch 0 towards zero at `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let g = store.get(w).map(|x| 2.0 * x);
            opt.step(&mut store, &[g], 0.01).unwrap();
        }
        assert!(store.get(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.25, -0.0]));
        let before = store.clone();
        let mut opt = Adam::new(&store);
        opt.step(&mut store, &[Tensor::vector(vec![1.0, -1.0])], 0.0).unwrap();
        assert!(store.bit_identical(&before));
        assert_eq!(opt.steps(), 1);
        assert!(opt.step(&mut store, &[], 0.1).is_err());
        let _ = w;
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 9, 10) > 0.0);
    }
}
