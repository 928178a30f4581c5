use serde::{Deserialize, Serialize};

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

/// Schedule, regularization and batching for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerPolicy {
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub step_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Linear ramp from 0, advanced every iteration.
    pub warmup_epochs: usize,
    /// L2 coefficient added to the gradient of decaying parameters.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Beta(alpha, alpha) mixup; 0 disables it.
    pub mixup_alpha: f64,
    pub augment: AugmentPolicy,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerPolicy {
    fn default() -> Self {
        Self::first_stage()
    }
}

impl OptimizerPolicy {
    /// Real-weight stage on CIFAR: lr 1e-3, decay 1e-5, 5 warm-up epochs.
    pub fn first_stage() -> Self {
        OptimizerPolicy {
            lr: 1e-3,
            step_epochs: vec![150, 250, 320],
            decay_factor: 0.1,
            warmup_epochs: 5,
            weight_decay: 1e-5,
            epochs: 350,
            batch_size: 128,
            seed: 0,
            mixup_alpha: 1.0,
            augment: AugmentPolicy::CifarTrain,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Binary-weight stage: lr 2e-4, no weight decay, no warm-up.
    pub fn second_stage() -> Self {
        OptimizerPolicy {
            lr: 2e-4,
            warmup_epochs: 0,
            weight_decay: 0.0,
            ..Self::first_stage()
        }
    }

    /// Same shape of schedule compressed to `epochs`, with steps at the same
    /// fractions of training.
    pub fn rescaled(&self, epochs: usize) -> Self {
        let steps = self
            .step_epochs
            .iter()
            .map(|&s| s * epochs / self.epochs.max(1))
            .filter(|&s| s > 0 && s < epochs)
            .fold(Vec::new(), |mut acc: Vec<usize>, s| {
                if acc.last() != Some(&s) {
                    acc.push(s);
                }
                acc
            });
        OptimizerPolicy {
            epochs,
            step_epochs: steps,
            warmup_epochs: self.warmup_epochs.min(epochs / 4),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.decay_factor > 0.0) {
            return bad(format!("lr {} and decay factor {} must be positive", self.lr, self.decay_factor));
        }
        if !(self.weight_decay >= 0.0) || !(self.mixup_alpha >= 0.0) {
            return bad("weight decay and mixup alpha must be >= 0".into());
        }
        if self.step_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("step epochs {:?} must be strictly increasing", self.step_epochs));
        }
        if self.step_epochs.last().is_some_and(|&s| s >= self.epochs) {
            return bad(format!("step epochs {:?} must be below {} epochs", self.step_epochs, self.epochs));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must be in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    /// Learning rate `fraction` of the way through `epoch` (`fraction` in
    /// `[0, 1]`). Step decay depends on the epoch index only.
    pub fn lr_at(&self, epoch: usize, fraction: f64) -> f64 {
        let steps = self.step_epochs.iter().filter(|&&s| s <= epoch).count();
        let mut lr = self.lr * self.decay_factor.powi(steps as i32);
        if epoch < self.warmup_epochs {
            lr *= (epoch as f64 + fraction) / self.warmup_epochs as f64;
        }
        lr
    }
}

/// Gradient the optimizer sees: the loss gradient plus `weight_decay * w`
/// for parameters that decay.
pub fn effective_gradient(param: &Param, weight_decay: f64) -> Option<Tensor> {
    let g = param.grad.as_ref()?;
    if weight_decay != 0.0 && param.decays() {
        Some(g.zip_map(&param.value, |g, w| g + weight_decay * w).expect("gradient shape matches value"))
    } else {
        Some(g.clone())
    }
}

/// Adam with L2 regularization folded into the gradient.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    t: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter holding a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, policy: &OptimizerPolicy) {
        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - policy.beta1.powi(self.t as i32);
        let bc2 = 1.0 - policy.beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = effective_gradient(p, policy.weight_decay) else {
                continue;
            };
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gj), mj), vj) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = policy.beta1 * *mj + (1.0 - policy.beta1) * gj;
                *vj = policy.beta2 * *vj + (1.0 - policy.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *w -= lr * mhat / (vhat.sqrt() + policy.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn step_schedule_at_cifar_defaults() {
        let p = OptimizerPolicy {
            warmup_epochs: 0,
            ..OptimizerPolicy::first_stage()
        };
        let close = |a: f64, b: f64| (a - b).abs() < 1e-18;
        assert!(close(p.lr_at(149, 1.0), 1e-3));
        assert!(close(p.lr_at(150, 0.0), 1e-4));
        assert!(close(p.lr_at(250, 0.0), 1e-5));
        assert!(close(p.lr_at(320, 0.0), 1e-6));
        assert!(close(p.lr_at(349, 1.0), 1e-6));
    }

    #[test]
    fn warmup_is_linear_from_zero() {
        let p = OptimizerPolicy::first_stage();
        assert_eq!(p.lr_at(0, 0.0), 0.0);
        for e in 0..5 {
            for f in [0.25, 0.5, 1.0] {
                let expect = 1e-3 * (e as f64 + f) / 5.0;
                assert!((p.lr_at(e, f) - expect).abs() < 1e-18);
            }
        }
        assert_eq!(p.lr_at(5, 0.0), 1e-3);
    }

    #[test]
    fn policy_validation() {
        assert!(OptimizerPolicy::first_stage().validate().is_ok());
        assert!(OptimizerPolicy::second_stage().validate().is_ok());
        let mut p = OptimizerPolicy::first_stage();
        p.step_epochs = vec![10, 10];
        assert!(p.validate().is_err());
        p.step_epochs = vec![10, 400];
        assert!(p.validate().is_err());
        p.step_epochs = vec![];
        p.batch_size = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn rescaled_keeps_fractions() {
        let p = OptimizerPolicy::first_stage().rescaled(35);
        assert_eq!(p.step_epochs, vec![15, 25, 32]);
        assert!(p.validate().is_ok());
        let tiny = OptimizerPolicy::first_stage().rescaled(2);
        assert!(tiny.validate().is_ok());
        assert_eq!(tiny.warmup_epochs, 0);
    }

    #[test]
    fn decay_skips_sign_constrained_and_bn() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::ConvWeight, Tensor::full(&[2], 0.5));
        let s = store.add("s", ParamKind::ConvWeight, Tensor::full(&[2], 0.5));
        let b = store.add("b", ParamKind::BatchNormScale, Tensor::full(&[2], 0.5));
        store.get_mut(s).sign_constrained = true;
        for id in [w, s, b] {
            store.get_mut(id).grad = Some(Tensor::full(&[2], 1.0));
        }
        let with = |id| effective_gradient(store.get(id), 0.1).unwrap();
        let without = |id| effective_gradient(store.get(id), 0.0).unwrap();
        assert_eq!(with(s), without(s));
        assert_eq!(with(b), without(b));
        assert_eq!(with(w).data(), &[1.05, 1.05]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::LinearWeight, Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        store.get_mut(id).grad = Some(Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
        let policy = OptimizerPolicy {
            weight_decay: 0.0,
            ..OptimizerPolicy::first_stage()
        };
        let mut adam = Adam::new();
        adam.step(&mut store, 0.01, &policy);
        // bias-corrected first step is lr * g / (|g| + eps)
        let v = store.value(id).data();
        assert!((v[0] - 0.99).abs() < 1e-9);
        assert!((v[1] + 0.99).abs() < 1e-9);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Bias, Tensor::new(vec![3], vec![2.0, -3.0, 0.5]).unwrap());
        let policy = OptimizerPolicy {
            weight_decay: 0.0,
            ..OptimizerPolicy::first_stage()
        };
        let mut adam = Adam::new();
        for _ in 0..2000 {
            let g = store.value(id).scale(2.0);
            store.get_mut(id).grad = Some(g);
            adam.step(&mut store, 0.01, &policy);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
