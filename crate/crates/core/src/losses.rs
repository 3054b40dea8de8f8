//! Focal loss for the expression head, mean binary cross-entropy for the AU
//! head, and their equal-weight sum. Each loss returns its batch-mean value and
//! the analytic gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid_scalar, softmax_in_place, Tensor, NUM_AUS, NUM_EXPRESSIONS};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Per-class weights; `None` means uniform weight 1.
    pub alpha: Option<[f64; NUM_EXPRESSIONS]>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            gamma: 2.0,
            alpha: None,
        }
    }
}

impl FocalConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        FocalConfig { gamma, alpha: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if let Some(alpha) = &self.alpha {
            if alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                return Err(Error::Config(format!(
                    "focal alpha weights must be positive, got {alpha:?}"
                )));
            }
        }
        Ok(())
    }

    fn alpha(&self, class: usize) -> f64 {
        self.alpha.map_or(1.0, |a| a[class])
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-sample focal loss `-α (1-p)^γ ln p` for a target probability `p`.
pub fn focal_term(p_target: f64, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_prob(p_target);
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

/// Mean focal loss over the batch and its gradient w.r.t. the 7 logits.
pub fn focal_loss(logits: &Tensor, targets: &[usize], cfg: &FocalConfig) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    let n = logits.rows();
    if n == 0 || logits.shape() != [n, NUM_EXPRESSIONS] {
        return Err(Error::dim(
            "focal_loss logits",
            &[n.max(1), NUM_EXPRESSIONS],
            logits.shape(),
        ));
    }
    if targets.len() != n {
        return Err(Error::dim("focal_loss targets", &[n], &[targets.len()]));
    }
    if let Some(i) = targets.iter().position(|&t| t >= NUM_EXPRESSIONS) {
        return Err(Error::Label {
            record: format!("batch row {i}"),
            message: format!("expression class {} outside 0..6", targets[i]),
        });
    }

    let gamma = cfg.gamma;
    let scale = 1.0 / n as f64;
    let mut grads = logits.clone();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = grads.row_mut(i);
        softmax_in_place(row);
        let alpha = cfg.alpha(t);
        let p = clamp_prob(row[t]);
        let one_minus = 1.0 - p;
        total += -alpha * one_minus.powf(gamma) * p.ln();
        // dL/dz_k = g (δ_tk - p_k), g = α [γ (1-p)^(γ-1) p ln p - (1-p)^γ]
        let focus = if gamma == 0.0 {
            0.0
        } else {
            gamma * one_minus.powf(gamma - 1.0) * p * p.ln()
        };
        let g = alpha * (focus - one_minus.powf(gamma)) * scale;
        for (k, v) in row.iter_mut().enumerate() {
            let delta = if k == t { 1.0 } else { 0.0 };
            *v = g * (delta - *v);
        }
    }
    Ok((total * scale, grads))
}

/// Mean binary cross-entropy over all `12 n` cells and its gradient
/// `(p - y) / (12 n)` w.r.t. the AU logits.
pub fn bce_loss(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let n = logits.rows();
    if n == 0 || logits.shape() != [n, NUM_AUS] {
        return Err(Error::dim("bce_loss logits", &[n.max(1), NUM_AUS], logits.shape()));
    }
    if targets.shape() != logits.shape() {
        return Err(Error::dim("bce_loss targets", logits.shape(), targets.shape()));
    }
    if let Some(pos) = targets.data().iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Label {
            record: format!("batch row {}", pos / NUM_AUS),
            message: format!(
                "AU {} target {} is not binary",
                pos % NUM_AUS,
                targets.data()[pos]
            ),
        });
    }
    let scale = 1.0 / (NUM_AUS * n) as f64;
    let mut total = 0.0;
    let mut grads = Tensor::zeros(logits.shape());
    for ((g, &z), &y) in grads
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(targets.data())
    {
        let p = sigmoid_scalar(z);
        let pc = clamp_prob(p);
        total += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        *g = (p - y) * scale;
    }
    Ok((total * scale, grads))
}

/// Equal-weight sum of the expression and AU losses.
pub fn combined_loss(expr_part: f64, au_part: f64) -> f64 {
    expr_part + au_part
}
