use std::collections::BTreeMap;

use super::config::{LrSchedule, TrainConfig};
use crate::models::ParamStore;
use crate::substrate::Tensor;
use crate::{Error, Result};

/// Learning rate for zero-based `epoch` of `cfg.epochs`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    let total = cfg.epochs.max(1) as f64;
    let frac = epoch as f64 / total;
    if frac < cfg.phase_boundary {
        return cfg.lr_phase1;
    }
    match cfg.lr_schedule {
        LrSchedule::Step => cfg.lr_phase2,
        LrSchedule::Linear => {
            let last = (total - 1.0) / total;
            let span = last - cfg.phase_boundary;
            let t = if span > 0.0 {
                ((frac - cfg.phase_boundary) / span).clamp(0.0, 1.0)
            } else {
                1.0
            };
            cfg.lr_phase1 + t * (cfg.lr_phase2 - cfg.lr_phase1)
        }
    }
}

/// Adam with bias correction over a named subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every `(name, gradient)` pair at rate `lr`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(String, Tensor)],
        lr: f64,
    ) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
            if param.shape() != grad.shape() {
                return Err(Error::Invalid(format!(
                    "{name}: gradient shape {:?} does not match {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let n = grad.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
