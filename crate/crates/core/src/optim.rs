//! Training objective for the W-Net, the Adam optimizer and a plateau
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_BETA1: f64 = 0.5;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Mean per-pixel binary cross-entropy between `sigmoid(logits)` and binary
/// targets, in the overflow-free `softplus(l) - y*l` form.
pub fn sigmoid_cross_entropy<T: Element>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    if let Some(bad) = targets.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(Error::InvalidArgument(format!(
            "cross-entropy targets must be 0 or 1, found {bad:?}"
        )));
    }
    tape.bce_with_logits(logits, targets.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(Tensor::zeros_like).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Apply one update. Gradients are validated before anything is touched,
    /// so a rejected step leaves parameters and moments unchanged.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", g.shape(), p.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", params.name(i))));
            }
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    /// Epochs without a new best validation loss before decaying.
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_lr: DEFAULT_LR,
            patience: 5,
            factor: 0.5,
            floor: 1e-6,
        }
    }
}

impl LrSchedule {
    /// Learning rate after replaying the per-epoch validation history.
    pub fn lr_for(&self, history: &[f64]) -> Result<f64> {
        let (first, rest) = history
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("validation history is empty".into()))?;
        let mut lr = self.initial_lr.max(self.floor);
        let mut best = *first;
        let mut stale = 0;
        for &loss in rest {
            if loss < best {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.patience.max(1) {
                    lr = (lr * self.factor).max(self.floor);
                    stale = 0;
                }
            }
        }
        Ok(lr)
    }
}
