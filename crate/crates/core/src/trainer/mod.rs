//! The partial-label epoch loop.
//!
//! In multitask mode each epoch runs three sequential phases: expression-only
//! samples with the focal loss, AU-only samples with BCE, then fully labeled
//! samples with the sum of both. Every batch is followed by one Adam step at
//! the epoch's cosine-annealed learning rate.

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{make_batches, partition, Dataset, DatasetPartition};
use crate::error::{Error, Result};
use crate::losses::{bce_loss, combined_loss, focal_loss, FocalConfig};
use crate::metrics::{evaluate, MetricsReport, DEFAULT_AU_THRESHOLD};
use crate::nn::{Architecture, Model, Tensor, TrunkPreset, DEFAULT_INIT_SCALE, NUM_AUS};
use crate::optim::{adam_step, cosine_lr, AdamState, ScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Expression head only, trained on every expression label (E ∪ B).
    ExprOnly,
    /// AU head only, trained on every AU label (A ∪ B).
    AuOnly,
    /// Shared trunk, alternating E and A phases, no combined phase.
    SharedBackbone,
    /// E, A, then B phases with the combined loss.
    Multitask,
}

impl TrainMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "expr_only" => Some(TrainMode::ExprOnly),
            "au_only" => Some(TrainMode::AuOnly),
            "shared_backbone" => Some(TrainMode::SharedBackbone),
            "multitask" => Some(TrainMode::Multitask),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::ExprOnly => "expr_only",
            TrainMode::AuOnly => "au_only",
            TrainMode::SharedBackbone => "shared_backbone",
            TrainMode::Multitask => "multitask",
        }
    }

    /// Validation score used to pick the best checkpoint.
    pub fn selection_score(&self, report: &MetricsReport) -> Option<f64> {
        match self {
            TrainMode::ExprOnly | TrainMode::SharedBackbone => report.expr_score(),
            TrainMode::AuOnly => report.au_score(),
            TrainMode::Multitask => match (report.expr_score(), report.au_score()) {
                (Some(e), Some(a)) => Some(0.5 * (e + a)),
                (e, a) => e.or(a),
            },
        }
    }
}

/// Which labels a phase trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "E")]
    Expr,
    #[serde(rename = "A")]
    Au,
    #[serde(rename = "B")]
    Both,
}

impl Phase {
    fn salt(self) -> u64 {
        match self {
            Phase::Expr => 0x45,
            Phase::Au => 0x41,
            Phase::Both => 0x42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_min: f64,
    pub focal: FocalConfig,
    pub seed: u64,
    pub trunk: TrunkPreset,
    pub init_scale: f64,
    pub au_threshold: f64,
    /// Fraction carved off for validation when no validation set is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Multitask,
            epochs: 10,
            batch_size: 64,
            lr_start: 0.001,
            lr_min: 0.0,
            focal: FocalConfig::default(),
            seed: 0,
            trunk: TrunkPreset::Mlp,
            init_scale: DEFAULT_INIT_SCALE,
            au_threshold: DEFAULT_AU_THRESHOLD,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_start: self.lr_start,
            lr_min: self.lr_min,
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        self.schedule().validate()?;
        self.focal.validate()
    }

    /// Phases this mode runs, in order, with the indices each one trains on.
    pub fn phase_plan(&self, part: &DatasetPartition) -> Vec<(Phase, Vec<usize>)> {
        let union = |a: &[usize], b: &[usize]| {
            let mut v = a.to_vec();
            v.extend_from_slice(b);
            v
        };
        match self.mode {
            TrainMode::Multitask => vec![
                (Phase::Expr, part.expr_only.clone()),
                (Phase::Au, part.au_only.clone()),
                (Phase::Both, part.both.clone()),
            ],
            TrainMode::SharedBackbone => vec![
                (Phase::Expr, part.expr_only.clone()),
                (Phase::Au, part.au_only.clone()),
            ],
            TrainMode::ExprOnly => vec![(Phase::Expr, union(&part.expr_only, &part.both))],
            TrainMode::AuOnly => vec![(Phase::Au, union(&part.au_only, &part.both))],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub phase: Phase,
    pub samples: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Phases in the order they ran.
    pub phases: Vec<PhaseStats>,
    pub optimizer_steps: u64,
    pub val: Option<MetricsReport>,
    pub val_score: Option<f64>,
}

impl EpochStats {
    pub fn phase(&self, phase: Phase) -> Option<&PhaseStats> {
        self.phases.iter().find(|p| p.phase == phase)
    }
}

/// Emitted after every optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEvent {
    pub epoch: usize,
    pub phase: Phase,
    pub step_in_phase: usize,
    pub batch: Vec<usize>,
    pub loss: f64,
}

fn expr_targets(data: &Dataset, idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            data.records[i].expr.map(usize::from).ok_or_else(|| Error::Label {
                record: data.records[i].id.clone(),
                message: "expression phase got a record without an expression label".into(),
            })
        })
        .collect()
}

fn au_targets(data: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(idx.len() * NUM_AUS);
    for &i in idx {
        let aus = data.records[i].aus.ok_or_else(|| Error::Label {
            record: data.records[i].id.clone(),
            message: "AU phase got a record without AU labels".into(),
        })?;
        flat.extend(aus.iter().map(|&b| f64::from(b)));
    }
    Tensor::from_vec(&[idx.len(), NUM_AUS], flat)
}

/// Runs one epoch of the mode's phases over `part` (indices into `data`).
pub fn train_epoch(
    model: &mut Model,
    opt: &mut AdamState,
    part: &DatasetPartition,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    mut on_step: Option<&mut dyn FnMut(&StepEvent, &Model)>,
) -> Result<EpochStats> {
    cfg.validate()?;
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    let plan = cfg.phase_plan(part);
    if plan.iter().all(|(_, idx)| idx.is_empty()) {
        return Err(Error::Config(format!(
            "no training samples carry the labels {} mode needs",
            cfg.mode.as_str()
        )));
    }
    let lr = cosine_lr(epoch, &cfg.schedule())?;
    let steps_before = opt.step_count;
    let mut phases = Vec::new();
    for (phase, indices) in plan {
        if indices.is_empty() {
            continue;
        }
        let batches = make_batches(&indices, cfg.batch_size, cfg.seed ^ phase.salt(), epoch as u64);
        let mut loss_sum = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let inputs = data.batch_inputs(batch)?;
            let out = model.forward(&inputs)?;
            let loss = match phase {
                Phase::Expr => {
                    let (l, g) = focal_loss(&out.expr_logits, &expr_targets(data, batch)?, &cfg.focal)?;
                    model.backward(&out.cache, Some(&g), None)?;
                    l
                }
                Phase::Au => {
                    let (l, g) = bce_loss(&out.au_logits, &au_targets(data, batch)?)?;
                    model.backward(&out.cache, None, Some(&g))?;
                    l
                }
                Phase::Both => {
                    let (le, ge) = focal_loss(&out.expr_logits, &expr_targets(data, batch)?, &cfg.focal)?;
                    let (la, ga) = bce_loss(&out.au_logits, &au_targets(data, batch)?)?;
                    model.backward(&out.cache, Some(&ge), Some(&ga))?;
                    combined_loss(le, la)
                }
            };
            adam_step(model, opt, lr)?;
            loss_sum += loss;
            if let Some(cb) = on_step.as_deref_mut() {
                cb(
                    &StepEvent {
                        epoch,
                        phase,
                        step_in_phase: step,
                        batch: batch.clone(),
                        loss,
                    },
                    model,
                );
            }
        }
        phases.push(PhaseStats {
            phase,
            samples: indices.len(),
            steps: batches.len(),
            mean_loss: loss_sum / batches.len() as f64,
        });
    }
    Ok(EpochStats {
        epoch,
        lr,
        phases,
        optimizer_steps: opt.step_count - steps_before,
        val: None,
        val_score: None,
    })
}

/// Deterministic train/validation split: a seeded shuffle of all indices with
/// the last `val_fraction` going to validation.
pub fn split_train_val(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..n).collect();
    let shuffled = make_batches(&all, n.max(1), seed, u64::MAX).concat();
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let cut = n - n_val.min(n);
    let (train, val) = shuffled.split_at(cut);
    (train.to_vec(), val.to_vec())
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: Model,
    pub stats: Vec<EpochStats>,
    pub best: Checkpoint,
    /// Validation report of the best checkpoint.
    pub best_report: Option<MetricsReport>,
}

pub fn build_architecture(cfg: &TrainConfig, data: &Dataset) -> Result<Architecture> {
    let shape = data
        .input_shape()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    cfg.trunk.for_input(shape)
}

/// Trains for `cfg.epochs` epochs, scoring each on the validation data and
/// keeping the best-scoring checkpoint (earliest epoch on ties).
///
/// Without `val`, a `val_fraction` split of `train` is held out.
pub fn fit(
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(&EpochStats)>,
) -> Result<FitOutput> {
    cfg.validate()?;
    let carved;
    let (train, val) = match val {
        Some(v) => (std::borrow::Cow::Borrowed(train), v),
        None => {
            let (tr, va) = split_train_val(train.len(), cfg.val_fraction, cfg.seed);
            carved = train.subset(&va);
            (std::borrow::Cow::Owned(train.subset(&tr)), &carved)
        }
    };
    let arch = build_architecture(cfg, &train)?;
    let part = partition(&train.records);
    let mut model = Model::build(&arch, cfg.seed, cfg.init_scale)?;
    let mut opt = AdamState::new(&model);
    let val_idx: Vec<usize> = (0..val.len()).collect();

    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint, Option<MetricsReport>)> = None;
    for epoch in 0..cfg.epochs {
        let mut es = train_epoch(&mut model, &mut opt, &part, &train, cfg, epoch, None)?;
        if !val.is_empty() {
            let report = evaluate(&model, val, &val_idx, cfg.au_threshold)?;
            es.val_score = cfg.mode.selection_score(&report);
            es.val = Some(report);
        }
        let score = es.val_score.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((
                score,
                Checkpoint::new(model.clone(), opt.clone(), epoch),
                es.val.clone(),
            ));
        }
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&es);
        }
        stats.push(es);
    }
    let (_, best, best_report) = best.expect("at least one epoch");
    Ok(FitOutput {
        model,
        stats,
        best,
        best_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, AnnotationRecord, ImageRef, PreprocessConfig, SynthConfig};
    use crate::nn::ParamGroup;

    /// |E|, |A|, |B| records with 4x4 constant images.
    fn toy_dataset(e: usize, a: usize, b: usize) -> Dataset {
        let mut records = Vec::new();
        let mut inputs = Vec::new();
        for i in 0..e + a + b {
            let expr = (i < e || i >= e + a).then_some((i % 7) as u8);
            let aus = (i >= e).then_some([(i % 2) as u8; 12]);
            records.push(AnnotationRecord::new(ImageRef::Packed(i), expr, aus));
            inputs.push(Tensor::full(&[3, 4, 4], (i as f64 / 10.0).sin()));
        }
        Dataset { records, inputs }
    }

    fn head_values(model: &Model, group: ParamGroup) -> Vec<Tensor> {
        model
            .params_with_group()
            .into_iter()
            .filter(|(g, _)| *g == group)
            .map(|(_, p)| p.value.clone())
            .collect()
    }

    #[test]
    fn phase_steps_follow_ceil_arithmetic() {
        let data = toy_dataset(10, 6, 4);
        let part = partition(&data.records);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            ..Default::default()
        };
        let arch = build_architecture(&cfg, &data).unwrap();
        let mut model = Model::build(&arch, 1, DEFAULT_INIT_SCALE).unwrap();
        let mut opt = AdamState::new(&model);
        let mut order = Vec::new();
        let mut cb = |ev: &StepEvent, _: &Model| order.push(ev.phase);
        let es = train_epoch(&mut model, &mut opt, &part, &data, &cfg, 0, Some(&mut cb)).unwrap();
        let steps: Vec<usize> = es.phases.iter().map(|p| p.steps).collect();
        assert_eq!(steps, vec![3, 2, 1]);
        assert_eq!(es.optimizer_steps, 6);
        assert_eq!(opt.step_count, 6);
        let mut expected = vec![Phase::Expr; 3];
        expected.extend([Phase::Au; 2]);
        expected.push(Phase::Both);
        assert_eq!(order, expected);
    }

    #[test]
    fn shared_backbone_skips_combined_phase() {
        let data = toy_dataset(10, 6, 4);
        let part = partition(&data.records);
        let cfg = TrainConfig {
            batch_size: 4,
            mode: TrainMode::SharedBackbone,
            ..Default::default()
        };
        let arch = build_architecture(&cfg, &data).unwrap();
        let mut model = Model::build(&arch, 1, DEFAULT_INIT_SCALE).unwrap();
        let mut opt = AdamState::new(&model);
        let es = train_epoch(&mut model, &mut opt, &part, &data, &cfg, 0, None).unwrap();
        assert_eq!(es.phases.len(), 2);
        assert_eq!(es.optimizer_steps, 5);
    }

    #[test]
    fn single_task_modes_use_union_with_both() {
        let part = partition(&toy_dataset(10, 6, 4).records);
        let cfg = TrainConfig {
            mode: TrainMode::ExprOnly,
            ..Default::default()
        };
        let plan = cfg.phase_plan(&part);
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].1.len(), 14);
        let cfg = TrainConfig {
            mode: TrainMode::AuOnly,
            ..Default::default()
        };
        assert_eq!(cfg.phase_plan(&part)[0].1.len(), 10);
    }

    #[test]
    fn expr_only_without_expression_labels_fails() {
        let data = toy_dataset(0, 6, 0);
        let part = partition(&data.records);
        let cfg = TrainConfig {
            mode: TrainMode::ExprOnly,
            ..Default::default()
        };
        let arch = build_architecture(&cfg, &data).unwrap();
        let mut model = Model::build(&arch, 1, 1.0).unwrap();
        let mut opt = AdamState::new(&model);
        let err = train_epoch(&mut model, &mut opt, &part, &data, &cfg, 0, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn heads_are_frozen_outside_their_phases() {
        let data = toy_dataset(10, 6, 4);
        let part = partition(&data.records);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 3,
            ..Default::default()
        };
        let arch = build_architecture(&cfg, &data).unwrap();
        let mut model = Model::build(&arch, 5, DEFAULT_INIT_SCALE).unwrap();
        let mut opt = AdamState::new(&model);
        for epoch in 0..3 {
            let mut prev = model.clone();
            let mut violations = 0;
            let mut cb = |ev: &StepEvent, m: &Model| {
                let frozen = match ev.phase {
                    Phase::Expr => Some(ParamGroup::AuHead),
                    Phase::Au => Some(ParamGroup::ExprHead),
                    Phase::Both => None,
                };
                if let Some(g) = frozen {
                    if head_values(m, g) != head_values(&prev, g) {
                        violations += 1;
                    }
                }
                prev = m.clone();
            };
            train_epoch(&mut model, &mut opt, &part, &data, &cfg, epoch, Some(&mut cb)).unwrap();
            assert_eq!(violations, 0, "epoch {epoch}");
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (tr, va) = split_train_val(100, 0.2, 3);
        assert_eq!((tr.len(), va.len()), (80, 20));
        assert_eq!(split_train_val(100, 0.2, 3), (tr.clone(), va.clone()));
        let mut all = [tr, va].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn fit_single_epoch_and_determinism() {
        let synth = synth_generate(&SynthConfig {
            n_samples: 120,
            image_size: 8,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let data = Dataset::from_raw(synth.records, &synth.images, &PreprocessConfig::square(8)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            seed: 2,
            ..Default::default()
        };
        let a = fit(&data, None, &cfg, None).unwrap();
        assert_eq!(a.stats.len(), 1);
        assert_eq!(a.best.epoch, 0);
        let cfg3 = TrainConfig { epochs: 3, ..cfg };
        let b = fit(&data, None, &cfg3, None).unwrap();
        let c = fit(&data, None, &cfg3, None).unwrap();
        assert_eq!(b.model, c.model);
        assert_eq!(b.stats, c.stats);
        assert_eq!(b.best, c.best);
    }
}
