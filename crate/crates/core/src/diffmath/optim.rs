//! Adam with decoupled weight decay and a single-cycle cosine learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `lr(t) = eta_min + (base - eta_min) * (1 + cos(pi * t / horizon)) / 2`,
/// held at `eta_min` past the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub eta_min: f64,
    pub horizon: f64,
}

impl CosineSchedule {
    pub const DEFAULT_ETA_MIN: f64 = 1e-6;

    pub fn new(base_lr: f64, eta_min: f64, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::Config(format!(
                "cosine horizon must be positive, got {horizon}"
            )));
        }
        if eta_min > base_lr {
            return Err(Error::Config(
                "eta_min exceeds the base learning rate".into(),
            ));
        }
        Ok(Self {
            base_lr,
            eta_min,
            horizon,
        })
    }

    pub fn lr_at(&self, t: f64) -> f64 {
        let progress = (t / self.horizon).clamp(0.0, 1.0);
        self.eta_min
            + (self.base_lr - self.eta_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First/second moment accumulators, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor2::zeros(t.rows(), t.cols()))
                .collect()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Weight decay is applied to the
    /// parameter directly (`w -= lr * wd * w`) before the moment step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::dim(
                "optimizer, parameters and gradients disagree in length",
            ));
        }
        for id in params.ids() {
            if !grads.get(id).same_shape(params.get(id))
                || !self.first[id.index()].same_shape(params.get(id))
            {
                return Err(Error::dim(format!(
                    "gradient shape mismatch for {}",
                    params.name(id)
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let g = grads.get(id).data();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let w = params.get_mut(id).data_mut();
            for k in 0..w.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                w[k] -= lr * weight_decay * w[k];
                w[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor2::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let before = store.get(id).clone();
        let mut adam = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &store,
        );
        let grads = Grads::zeros_like(&store);
        for _ in 0..5 {
            adam.step(&mut store, &grads, 1e-3).unwrap();
        }
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn scalar_hand_trace_on_square() {
        // f(w) = w^2 at w = 1: g = 2. Step 1: m = 0.2, v = 0.004,
        // m_hat = 2, v_hat = 4, update = lr * 2 / (2 + 1e-8).
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor2::scalar(1.0)).unwrap();
        let mut grads = Grads::zeros_like(&store);
        grads.get_mut(id).data_mut()[0] = 2.0;
        let lr = 1e-4;
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &grads, lr).unwrap();
        let decayed = 1.0 - lr * 1e-3;
        let want = decayed - lr * 2.0 / (2.0 + 1e-8);
        assert!((store.get(id).item() - want).abs() < 1e-15);

        // Step 2 at the new w with g = 2w.
        let w1 = store.get(id).item();
        grads.get_mut(id).data_mut()[0] = 2.0 * w1;
        adam.step(&mut store, &grads, lr).unwrap();
        let m = 0.9 * 0.2 + 0.1 * 2.0 * w1;
        let v = 0.999 * 0.004 + 0.001 * (2.0 * w1).powi(2);
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.998_001);
        let want2 = w1 * (1.0 - lr * 1e-3) - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((store.get(id).item() - want2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::zeros(2, 2)).unwrap();
        let mut other = ParamStore::new();
        other.insert("w", Tensor2::zeros(1, 2)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = Grads::zeros_like(&other);
        assert!(matches!(
            adam.step(&mut store, &grads, 1e-3),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cosine_endpoints_and_monotonicity() {
        let s = CosineSchedule::new(1e-4, 1e-6, 50.0).unwrap();
        assert_eq!(s.lr_at(0.0), 1e-4);
        assert!((s.lr_at(50.0) - 1e-6).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for i in 0..=500 {
            let lr = s.lr_at(i as f64 * 0.1);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!((s.lr_at(25.0) - (1e-6 + (1e-4 - 1e-6) * 0.5)).abs() < 1e-18);
        assert!(CosineSchedule::new(1e-4, 1e-6, 0.0).is_err());
    }

    #[test]
    fn cosine_is_continuous() {
        let s = CosineSchedule::new(1e-4, 1e-6, 10.0).unwrap();
        for i in 0..1000 {
            let t = i as f64 * 0.01;
            assert!((s.lr_at(t + 1e-9) - s.lr_at(t)).abs() < 1e-12);
        }
    }
}
