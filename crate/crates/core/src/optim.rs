//! Adam with bias correction and a per-epoch cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_start: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_start: 0.001,
            lr_min: 0.0,
            total_epochs: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_min && self.lr_min >= 0.0 && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_min >= 0 (got {} and {})",
                self.lr_start, self.lr_min
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// `lr_min + (lr_start - lr_min) (1 + cos(π t / T)) / 2` for `0 <= t <= T`.
pub fn cosine_lr(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if epoch > cfg.total_epochs {
        return Err(Error::Schedule(format!(
            "epoch {epoch} outside 0..={}",
            cfg.total_epochs
        )));
    }
    let phase = std::f64::consts::PI * epoch as f64 / cfg.total_epochs as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_start - cfg.lr_min) * (1.0 + phase.cos()))
}

/// First and second moment estimates for every model parameter.
///
/// Each parameter keeps its own bias-correction step so a parameter that sat out
/// some updates (no gradient reached it) is corrected by the number of updates it
/// actually received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub param_steps: Vec<u64>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        Self::with_hyper(model, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(model: &Model, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let shapes = model.param_shapes();
        AdamState {
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            param_steps: vec![0; shapes.len()],
        }
    }

    fn check_shapes(&self, model: &Model) -> Result<()> {
        let shapes = model.param_shapes();
        let ok = shapes.len() == self.m.len()
            && shapes.len() == self.v.len()
            && shapes.len() == self.param_steps.len()
            && shapes
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(s, (m, v))| m.shape() == s.as_slice() && v.shape() == s.as_slice());
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(
                "optimizer state shapes do not match model parameters".into(),
            ))
        }
    }
}

/// One Adam update of every parameter that received a gradient since the last
/// step, then clears all gradient slots.
pub fn adam_step(model: &mut Model, state: &mut AdamState, lr: f64) -> Result<()> {
    state.check_shapes(model)?;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (i, p) in model.params_mut().into_iter().enumerate() {
        if p.touched {
            state.param_steps[i] += 1;
            let t = state.param_steps[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        p.grad.fill(0.0);
        p.touched = false;
    }
    state.step_count += 1;
    Ok(())
}
