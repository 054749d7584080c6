//! Adam with bias correction and the warmup/cosine learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{err, Result};
use crate::nn::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One update over every trainable parameter. Each trainable parameter
    /// must have a gradient entry, otherwise the step is refused.
    pub fn step<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: T,
    ) -> Result<()> {
        let names: alloc::vec::Vec<_> = store.names().to_vec();
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        for name in names {
            let trainable = store.get(&name)?.trainable;
            if !trainable {
                continue;
            }
            let g = grads
                .get(&name)
                .ok_or_else(|| err!(Config, "missing gradient for trainable parameter {name}"))?;
            let entry = store.get_mut(&name)?;
            if g.shape() != entry.tensor.shape() {
                return Err(err!(
                    Shape,
                    "gradient {:?} vs parameter {:?} for {name}",
                    g.shape(),
                    entry.tensor.shape()
                ));
            }
            if entry.adam_m.is_none() {
                entry.adam_m = Some(Tensor::zeros(entry.tensor.shape()));
                entry.adam_v = Some(Tensor::zeros(entry.tensor.shape()));
            }
            entry.step += 1;
            let t = entry.step as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let m = entry.adam_m.as_mut().unwrap().data_mut();
            let v = entry.adam_v.as_mut().unwrap().data_mut();
            for ((p, &gv), (mv, vv)) in entry
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from zero to `max_lr`, then cosine decay to zero at
/// `total_steps`; steps past the end stay at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(max_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if max_lr <= 0.0 {
            return Err(err!(Config, "max_lr must be positive, got {max_lr}"));
        }
        if warmup_steps > total_steps {
            return Err(err!(
                Config,
                "warmup {warmup_steps} exceeds total steps {total_steps}"
            ));
        }
        Ok(Self {
            max_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.max_lr * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            let span = (self.total_steps - self.warmup_steps) as f64;
            let phase = (step - self.warmup_steps) as f64 / span;
            self.max_lr * 0.5 * (1.0 + (core::f64::consts::PI * phase).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::string::ToString;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(1e-4, 2000, 10_000).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(2000) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(1000) - 5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(10_000), 0.0);
        assert_eq!(s.lr_at(20_000), 0.0);
        // halfway through the cosine span: half the max
        assert!((s.lr_at(6000) - 5e-5).abs() < 1e-12);
        assert!(LrSchedule::new(1e-4, 10, 5).is_err());
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParameterStore::<f64>::new();
        store
            .register("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), true)
            .unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        let adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut store, &grads, 0.1).unwrap();
        }
        assert_eq!(store.get("w").unwrap().tensor.data(), &[1.0, -2.0]);
    }

    #[test]
    fn quadratic_descends() {
        // minimize w^2 from w = 1: strictly decreasing |w| over early steps
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::scalar(1.0), true).unwrap();
        let adam = Adam::default();
        let mut prev = 1.0;
        for _ in 0..20 {
            let w = store.get("w").unwrap().tensor.item();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::scalar(2.0 * w));
            adam.step(&mut store, &grads, 0.05).unwrap();
            let now = store.get("w").unwrap().tensor.item();
            assert!(now < prev, "w should decrease: {now} vs {prev}");
            prev = now;
        }
    }

    #[test]
    fn missing_gradient_for_trainable_is_an_error() {
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::scalar(1.0), true).unwrap();
        let grads = BTreeMap::new();
        assert!(Adam::default().step(&mut store, &grads, 0.1).is_err());
    }

    /// Ten steps against a reference Adam written independently of the
    /// production update loop.
    #[test]
    fn matches_reference_adam() {
        struct RefAdam {
            m: Vec<f64>,
            v: Vec<f64>,
            t: i32,
        }
        impl RefAdam {
            fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
                self.t += 1;
                for i in 0..w.len() {
                    self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
                    self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
                    let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
                    let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
                    w[i] -= lr * mh / (vh.sqrt() + 1e-8);
                }
            }
        }
        let mut store = ParameterStore::<f64>::new();
        let init = vec![0.7, -0.3, 1.4];
        store
            .register("w", Tensor::new(&[3], init.clone()).unwrap(), true)
            .unwrap();
        let mut reference = init.clone();
        let mut ra = RefAdam {
            m: vec![0.0; 3],
            v: vec![0.0; 3],
            t: 0,
        };
        let adam = Adam::default();
        // deterministic pseudo-gradient sequence
        for k in 0..10 {
            let g: Vec<f64> = (0..3).map(|i| ((k * 3 + i) as f64 * 0.731).sin()).collect();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::new(&[3], g.clone()).unwrap());
            adam.step(&mut store, &grads, 0.01).unwrap();
            ra.step(&mut reference, &g, 0.01);
        }
        let got = store.get("w").unwrap().tensor.data();
        for (a, b) in got.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
