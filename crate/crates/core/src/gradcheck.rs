//! Central finite-difference checks of the analytic gradients.
//!
//! Each case builds a small randomly initialized model, feeds a random batch,
//! and compares every parameter gradient element against
//! `(L(θ + h) - L(θ - h)) / 2h`. Relative error is
//! `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
//! turning round-off into huge ratios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{bce_loss, focal_loss, FocalConfig};
use crate::nn::{Architecture, LayerSpec, Model, Tensor, TrunkPreset, DEFAULT_INIT_SCALE, NUM_AUS, NUM_EXPRESSIONS};

pub const FD_STEP: f64 = 1e-6;
pub const PARAM_TOLERANCE: f64 = 1e-4;
pub const LOGIT_TOLERANCE: f64 = 1e-6;
pub const PARAM_FLOOR: f64 = 1e-5;
pub const LOGIT_FLOOR: f64 = 1e-3;
const BATCH: usize = 4;

/// Loss driving a check. `Combined` backpropagates through both heads at once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CheckLoss {
    Focal { gamma: f64 },
    Bce,
    Combined { gamma: f64 },
}

impl CheckLoss {
    pub fn label(&self) -> String {
        match self {
            CheckLoss::Focal { gamma } => format!("focal(gamma={gamma})"),
            CheckLoss::Bce => "bce".to_string(),
            CheckLoss::Combined { gamma } => format!("focal(gamma={gamma})+bce"),
        }
    }

    pub fn standard() -> Vec<CheckLoss> {
        vec![
            CheckLoss::Focal { gamma: 0.0 },
            CheckLoss::Focal { gamma: 2.0 },
            CheckLoss::Bce,
            CheckLoss::Combined { gamma: 2.0 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: Vec<u64>,
    pub presets: Vec<TrunkPreset>,
    pub losses: Vec<CheckLoss>,
    /// Test hook: added to the first analytic gradient element of every case,
    /// so the detector can be shown to fire.
    pub corrupt: Option<f64>,
}

impl GradcheckConfig {
    /// Five consecutive seeds starting at `base_seed`, both presets, all losses.
    pub fn standard(base_seed: u64) -> Self {
        GradcheckConfig {
            seeds: (0..5).map(|i| base_seed.wrapping_add(i)).collect(),
            presets: vec![TrunkPreset::Mlp, TrunkPreset::SmallCnn],
            losses: CheckLoss::standard(),
            corrupt: None,
        }
    }
}

/// Worst element seen for one component across all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub tolerance: f64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
    pub max_parameters: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentResult::passed)
    }

    pub fn render(&self) -> String {
        let width = self
            .components
            .iter()
            .map(|c| c.component.len())
            .max()
            .unwrap_or(9)
            .max(9);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>12}  {:>9}  status  worst\n",
            "component", "checked", "max_rel_err", "tolerance"
        );
        for c in &self.components {
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>12.3e}  {:>9.0e}  {:<6}  {}\n",
                c.component,
                c.checked,
                c.max_rel_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" },
                c.worst
            ));
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Narrow variant of a trunk preset, small enough to check every element.
pub fn check_architecture(preset: TrunkPreset) -> Result<Architecture> {
    match preset {
        TrunkPreset::Mlp => Architecture::with_feature_dim(
            &[3, 4, 4],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 48, out_dim: 16 },
                LayerSpec::Relu,
            ],
            16,
        ),
        TrunkPreset::SmallCnn => Architecture::with_feature_dim(
            &[3, 11, 11],
            vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    out_channels: 4,
                    kernel_size: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: 4,
                    out_channels: 4,
                    kernel_size: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: 16, out_dim: 8 },
                LayerSpec::Relu,
            ],
            12,
        ),
    }
}

struct Batch {
    inputs: Tensor,
    expr: Vec<usize>,
    aus: Tensor,
}

fn random_batch(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut full = vec![BATCH];
    full.extend_from_slice(shape);
    let len: usize = full.iter().product();
    let data = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let inputs = Tensor::from_vec(&full, data)?;
    let expr = (0..BATCH).map(|_| rng.random_range(0..NUM_EXPRESSIONS)).collect();
    let aus = (0..BATCH * NUM_AUS)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    Ok(Batch {
        inputs,
        expr,
        aus: Tensor::from_vec(&[BATCH, NUM_AUS], aus)?,
    })
}

fn loss_value(model: &Model, batch: &Batch, loss: CheckLoss) -> Result<f64> {
    let out = model.forward(&batch.inputs)?;
    Ok(match loss {
        CheckLoss::Focal { gamma } => focal_loss(&out.expr_logits, &batch.expr, &FocalConfig::with_gamma(gamma))?.0,
        CheckLoss::Bce => bce_loss(&out.au_logits, &batch.aus)?.0,
        CheckLoss::Combined { gamma } => {
            focal_loss(&out.expr_logits, &batch.expr, &FocalConfig::with_gamma(gamma))?.0
                + bce_loss(&out.au_logits, &batch.aus)?.0
        }
    })
}

fn backprop(model: &mut Model, batch: &Batch, loss: CheckLoss) -> Result<()> {
    model.zero_grad();
    let out = model.forward(&batch.inputs)?;
    match loss {
        CheckLoss::Focal { gamma } => {
            let (_, g) = focal_loss(&out.expr_logits, &batch.expr, &FocalConfig::with_gamma(gamma))?;
            model.backward(&out.cache, Some(&g), None)
        }
        CheckLoss::Bce => {
            let (_, g) = bce_loss(&out.au_logits, &batch.aus)?;
            model.backward(&out.cache, None, Some(&g))
        }
        CheckLoss::Combined { gamma } => {
            let (_, ge) = focal_loss(&out.expr_logits, &batch.expr, &FocalConfig::with_gamma(gamma))?;
            let (_, ga) = bce_loss(&out.au_logits, &batch.aus)?;
            model.backward(&out.cache, Some(&ge), Some(&ga))
        }
    }
}

/// Checks every parameter element of `model` on a seeded random batch.
/// Returns (elements checked, max relative error, worst element).
pub fn check_model(model: &mut Model, loss: CheckLoss, seed: u64, corrupt: Option<f64>) -> Result<(usize, f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let shape = model.architecture().input_shape.clone();
    let batch = random_batch(&shape, &mut rng)?;
    backprop(model, &batch, loss)?;
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();

    let mut checked = 0;
    let mut worst = (0.0f64, String::new());
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let a = if pi == 0 && ei == 0 { a + corrupt.unwrap_or(0.0) } else { a };
            let orig = model.params()[pi].value.data()[ei];
            model.params_mut()[pi].value.data_mut()[ei] = orig + FD_STEP;
            let plus = loss_value(model, &batch, loss)?;
            model.params_mut()[pi].value.data_mut()[ei] = orig - FD_STEP;
            let minus = loss_value(model, &batch, loss)?;
            model.params_mut()[pi].value.data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(a, numeric, PARAM_FLOOR);
            checked += 1;
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{}[{ei}] seed {seed}", names[pi]));
            }
        }
    }
    Ok((checked, worst.0, worst.1))
}

fn check_logits(loss: CheckLoss, seed: u64) -> Result<(usize, f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let width = match loss {
        CheckLoss::Bce => NUM_AUS,
        _ => NUM_EXPRESSIONS,
    };
    let mut logits: Vec<f64> = (0..BATCH * width)
        .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let expr: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..NUM_EXPRESSIONS)).collect();
    let aus = Tensor::from_vec(
        &[BATCH, NUM_AUS],
        (0..BATCH * NUM_AUS).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect(),
    )?;
    let eval = |l: &[f64]| -> Result<(f64, Tensor)> {
        let t = Tensor::from_vec(&[BATCH, width], l.to_vec())?;
        match loss {
            CheckLoss::Bce => bce_loss(&t, &aus),
            CheckLoss::Focal { gamma } | CheckLoss::Combined { gamma } => {
                focal_loss(&t, &expr, &FocalConfig::with_gamma(gamma))
            }
        }
    };
    let (_, grad) = eval(&logits)?;
    let mut worst = (0.0f64, String::new());
    for i in 0..logits.len() {
        let orig = logits[i];
        logits[i] = orig + FD_STEP;
        let plus = eval(&logits)?.0;
        logits[i] = orig - FD_STEP;
        let minus = eval(&logits)?.0;
        logits[i] = orig;
        let err = relative_error(grad.data()[i], (plus - minus) / (2.0 * FD_STEP), LOGIT_FLOOR);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, format!("logit[{i}] seed {seed}"));
        }
    }
    Ok((logits.len(), worst.0, worst.1))
}

fn merge(into: &mut Option<ComponentResult>, name: &str, tolerance: f64, (n, err, at): (usize, f64, String)) {
    let c = into.get_or_insert_with(|| ComponentResult {
        component: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: at.clone(),
        tolerance,
    });
    c.checked += n;
    if err > c.max_rel_error {
        c.max_rel_error = err;
        c.worst = at;
    }
}

/// Runs every (preset, loss) case over all seeds, plus logit-level checks of
/// each loss on its own.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("gradient check needs at least one seed".into()));
    }
    let mut components = Vec::new();
    let mut max_parameters = 0;
    for &preset in &cfg.presets {
        let arch = check_architecture(preset)?;
        for &loss in &cfg.losses {
            let mut acc = None;
            for &seed in &cfg.seeds {
                let mut model = Model::build(&arch, seed, DEFAULT_INIT_SCALE)?;
                max_parameters = max_parameters.max(model.num_parameters());
                let res = check_model(&mut model, loss, seed, cfg.corrupt)?;
                merge(&mut acc, &format!("{}/{}", preset.as_str(), loss.label()), PARAM_TOLERANCE, res);
            }
            components.extend(acc);
        }
    }
    for &loss in &cfg.losses {
        if matches!(loss, CheckLoss::Combined { .. }) {
            continue;
        }
        let mut acc = None;
        for &seed in &cfg.seeds {
            merge(&mut acc, &format!("logits/{}", loss.label()), LOGIT_TOLERANCE, check_logits(loss, seed)?);
        }
        components.extend(acc);
    }
    Ok(GradcheckReport {
        components,
        max_parameters,
    })
}
