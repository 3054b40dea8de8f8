//! Challenge metrics: macro F1 and accuracy per task, blended into
//! `0.67 F1 + 0.33 Acc` for expressions and `0.5 F1 + 0.5 Acc` for AUs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{AuVector, Dataset};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax, Model, Tensor, NUM_AUS, NUM_EXPRESSIONS};

pub const EXPR_F1_WEIGHT: f64 = 0.67;
pub const EXPR_ACC_WEIGHT: f64 = 0.33;
pub const AU_F1_WEIGHT: f64 = 0.5;
pub const AU_ACC_WEIGHT: f64 = 0.5;
pub const DEFAULT_AU_THRESHOLD: f64 = 0.5;

/// `2 tp / (2 tp + fp + fn)`, defined as 0 when the class never occurs in
/// either predictions or ground truth.
fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExprMetrics {
    pub f1: f64,
    pub acc: f64,
    pub per_class_f1: [f64; NUM_EXPRESSIONS],
    /// `confusion[truth][pred]`
    pub confusion: [[u64; NUM_EXPRESSIONS]; NUM_EXPRESSIONS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuMetrics {
    pub f1: f64,
    pub acc: f64,
    pub per_au_f1: [f64; NUM_AUS],
}

pub fn expr_metrics(preds: &[u8], truth: &[u8]) -> Result<ExprMetrics> {
    if preds.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} expression predictions for {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("no expression samples to score".into()));
    }
    let mut confusion = [[0u64; NUM_EXPRESSIONS]; NUM_EXPRESSIONS];
    for (&p, &t) in preds.iter().zip(truth) {
        if p as usize >= NUM_EXPRESSIONS || t as usize >= NUM_EXPRESSIONS {
            return Err(Error::Contract(format!(
                "expression class out of range (pred {p}, truth {t})"
            )));
        }
        confusion[t as usize][p as usize] += 1;
    }
    let mut per_class_f1 = [0.0; NUM_EXPRESSIONS];
    for (k, f1) in per_class_f1.iter_mut().enumerate() {
        let tp = confusion[k][k];
        let predicted: u64 = (0..NUM_EXPRESSIONS).map(|t| confusion[t][k]).sum();
        let actual: u64 = confusion[k].iter().sum();
        *f1 = f1_from_counts(tp, predicted - tp, actual - tp);
    }
    let correct: u64 = (0..NUM_EXPRESSIONS).map(|k| confusion[k][k]).sum();
    Ok(ExprMetrics {
        f1: per_class_f1.iter().sum::<f64>() / NUM_EXPRESSIONS as f64,
        acc: correct as f64 / preds.len() as f64,
        per_class_f1,
        confusion,
    })
}

/// Binarizes `probs` (`[n, 12]`) with `p >= threshold` and scores each AU
/// over the samples; accuracy is over all `12 n` cells.
pub fn au_metrics(probs: &Tensor, truth: &[AuVector], threshold: f64) -> Result<AuMetrics> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("AU threshold {threshold} outside (0, 1)")));
    }
    let n = truth.len();
    if probs.shape() != [n, NUM_AUS] {
        return Err(Error::Contract(format!(
            "AU probabilities shaped {:?} for {n} labels",
            probs.shape()
        )));
    }
    if n == 0 {
        return Err(Error::Contract("no AU samples to score".into()));
    }
    let mut tp = [0u64; NUM_AUS];
    let mut fp = [0u64; NUM_AUS];
    let mut fn_ = [0u64; NUM_AUS];
    let mut correct = 0u64;
    for (i, t) in truth.iter().enumerate() {
        for (j, &p) in probs.row(i).iter().enumerate() {
            let pred = p >= threshold;
            let actual = t[j] == 1;
            match (pred, actual) {
                (true, true) => tp[j] += 1,
                (true, false) => fp[j] += 1,
                (false, true) => fn_[j] += 1,
                (false, false) => {}
            }
            if pred == actual {
                correct += 1;
            }
        }
    }
    let mut per_au_f1 = [0.0; NUM_AUS];
    for j in 0..NUM_AUS {
        per_au_f1[j] = f1_from_counts(tp[j], fp[j], fn_[j]);
    }
    Ok(AuMetrics {
        f1: per_au_f1.iter().sum::<f64>() / NUM_AUS as f64,
        acc: correct as f64 / (n * NUM_AUS) as f64,
        per_au_f1,
    })
}

pub fn expr_blend(f1: f64, acc: f64) -> f64 {
    EXPR_F1_WEIGHT * f1 + EXPR_ACC_WEIGHT * acc
}

pub fn au_blend(f1: f64, acc: f64) -> f64 {
    AU_F1_WEIGHT * f1 + AU_ACC_WEIGHT * acc
}

/// `(0.67 expr_f1 + 0.33 expr_acc, 0.5 au_f1 + 0.5 au_acc)`
pub fn blended_scores(expr_f1: f64, expr_acc: f64, au_f1: f64, au_acc: f64) -> (f64, f64) {
    (expr_blend(expr_f1, expr_acc), au_blend(au_f1, au_acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExprReport {
    pub n: usize,
    pub f1: f64,
    pub acc: f64,
    pub score: f64,
    pub per_class_f1: [f64; NUM_EXPRESSIONS],
    pub confusion: [[u64; NUM_EXPRESSIONS]; NUM_EXPRESSIONS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuReport {
    pub n: usize,
    pub f1: f64,
    pub acc: f64,
    pub score: f64,
    pub per_au_f1: [f64; NUM_AUS],
}

/// Per-task results; a task is `None` when no evaluated sample carried its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub expr: Option<ExprReport>,
    pub au: Option<AuReport>,
}

impl ExprReport {
    pub fn from_metrics(n: usize, m: ExprMetrics) -> Self {
        ExprReport {
            n,
            f1: m.f1,
            acc: m.acc,
            score: expr_blend(m.f1, m.acc),
            per_class_f1: m.per_class_f1,
            confusion: m.confusion,
        }
    }
}

impl AuReport {
    pub fn from_metrics(n: usize, m: AuMetrics) -> Self {
        AuReport {
            n,
            f1: m.f1,
            acc: m.acc,
            score: au_blend(m.f1, m.acc),
            per_au_f1: m.per_au_f1,
        }
    }
}

impl MetricsReport {
    /// Scores whichever tasks have labels among the paired predictions.
    pub fn from_predictions(
        expr: Option<(&[u8], &[u8])>,
        au: Option<(&Tensor, &[AuVector])>,
        threshold: f64,
    ) -> Result<Self> {
        let expr = match expr {
            Some((p, t)) if !t.is_empty() => Some(ExprReport::from_metrics(t.len(), expr_metrics(p, t)?)),
            _ => None,
        };
        let au = match au {
            Some((p, t)) if !t.is_empty() => {
                Some(AuReport::from_metrics(t.len(), au_metrics(p, t, threshold)?))
            }
            _ => None,
        };
        Ok(MetricsReport { expr, au })
    }

    pub fn expr_score(&self) -> Option<f64> {
        self.expr.as_ref().map(|e| e.score)
    }

    pub fn au_score(&self) -> Option<f64> {
        self.au.as_ref().map(|a| a.score)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Renders reports as the two result tables (expression, then AU), one row per
/// labeled report. Tables with no rows are omitted.
pub fn render_tables(rows: &[(String, MetricsReport)]) -> String {
    let width = rows
        .iter()
        .map(|(name, _)| name.len())
        .chain([12])
        .max()
        .unwrap_or(12);
    let mut out = String::new();
    let expr_rows: Vec<_> = rows
        .iter()
        .filter_map(|(name, r)| r.expr.as_ref().map(|e| (name, e.f1, e.acc, e.score)))
        .collect();
    let au_rows: Vec<_> = rows
        .iter()
        .filter_map(|(name, r)| r.au.as_ref().map(|a| (name, a.f1, a.acc, a.score)))
        .collect();
    for (title, blend, table) in [
        ("Expression", "0.67* F1 + 0.33* Acc", expr_rows),
        ("Action Units", "0.5* F1 + 0.5* Acc", au_rows),
    ] {
        if table.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "{title:<width$}  {:>8}  {:>8}  {blend:>20}", "F1_Score", "Accuracy");
        for (name, f1, acc, score) in table {
            let _ = writeln!(out, "{name:<width$}  {f1:>8.3}  {acc:>8.3}  {score:>20.3}");
        }
    }
    out
}

/// Model outputs turned into labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Argmax expression class per sample; the lowest index wins ties.
    pub expr: Vec<u8>,
    /// Sigmoid AU probabilities, `[n, 12]`.
    pub au_probs: Tensor,
    /// `au_probs >= threshold`
    pub au_bits: Vec<AuVector>,
}

pub fn predict(model: &Model, batch: &Tensor, threshold: f64) -> Result<PredictionSet> {
    let out = model.forward(batch)?;
    let probs = softmax(&out.expr_logits);
    let expr = (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    let au_probs = sigmoid(&out.au_logits);
    let au_bits = (0..au_probs.rows())
        .map(|i| {
            let mut bits = [0u8; NUM_AUS];
            for (b, &p) in bits.iter_mut().zip(au_probs.row(i)) {
                *b = u8::from(p >= threshold);
            }
            bits
        })
        .collect();
    Ok(PredictionSet {
        expr,
        au_probs,
        au_bits,
    })
}

/// Predicts on `indices` of `data` in chunks and scores every available label.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize], threshold: f64) -> Result<MetricsReport> {
    let mut expr_pred = Vec::new();
    let mut expr_true = Vec::new();
    let mut au_prob_rows = Vec::new();
    let mut au_true = Vec::new();
    for chunk in indices.chunks(256) {
        let batch = data.batch_inputs(chunk)?;
        let preds = predict(model, &batch, threshold)?;
        for (k, &i) in chunk.iter().enumerate() {
            let rec = &data.records[i];
            if let Some(e) = rec.expr {
                expr_pred.push(preds.expr[k]);
                expr_true.push(e);
            }
            if let Some(a) = rec.aus {
                au_prob_rows.extend_from_slice(preds.au_probs.row(k));
                au_true.push(a);
            }
        }
    }
    let au_probs = Tensor::from_vec(&[au_true.len(), NUM_AUS], au_prob_rows)?;
    MetricsReport::from_predictions(
        Some((&expr_pred, &expr_true)),
        Some((&au_probs, &au_true)),
        threshold,
    )
}
