//! Command-line front end: `synth`, `train`, `eval`, `gradcheck`, `report`.
//!
//! Every command is deterministic given its flags. A `--config` file holds
//! `key = value` lines named after the long flags; its values win over flags
//! given on the command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_annotations, packed_path_for, partition, synth_generate, write_manifest, write_packed_images, AnnotationRecord,
    Dataset, PreprocessConfig, SynthConfig, SynthOutput,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::losses::FocalConfig;
use crate::metrics::{evaluate, render_tables, MetricsReport, DEFAULT_AU_THRESHOLD};
use crate::nn::{Tensor, TrunkPreset, DEFAULT_INIT_SCALE, NUM_AUS, NUM_EXPRESSIONS};
use crate::trainer::{fit, load_checkpoint, save_checkpoint, EpochStats, TrainConfig, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "mtaffect", version, about = "Multi-task expression and action-unit training")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Dataset directory (train.csv, optional val.csv) or a single manifest.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// key = value file whose entries override command-line flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic partially labeled dataset.
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file against labeled data.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Render result tables, or compare training modes across seeds.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub frac_expr_only: f64,
    #[arg(long, default_value_t = 0.7)]
    pub frac_au_only: f64,
    #[arg(long, default_value_t = 0.2)]
    pub frac_both: f64,
    #[arg(long, default_value_t = 0.05)]
    pub label_noise: f64,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long)]
    pub patch_amplitude: Option<f64>,
    #[arg(long)]
    pub pixel_noise: Option<f64>,
    /// Seven comma-separated relative class frequencies.
    #[arg(long)]
    pub emotion_weights: Option<String>,
    /// Size of a separately drawn, fully labeled validation set (0 = none).
    #[arg(long, default_value_t = 0)]
    pub val_n: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "multitask")]
    pub mode: String,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    /// Seven comma-separated focal class weights (uniform if absent).
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long, default_value = "mlp")]
    pub trunk: String,
    #[arg(long, default_value_t = DEFAULT_INIT_SCALE)]
    pub init_scale: f64,
    #[arg(long, default_value_t = DEFAULT_AU_THRESHOLD)]
    pub au_threshold: f64,
    /// Held-out fraction when the data has no validation set.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    /// Validation manifest; overrides `val.csv` next to the training data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Re-run exactly the configuration recorded in a run manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Manifest-format file of predicted labels, matched to the data by id.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_AU_THRESHOLD)]
    pub au_threshold: f64,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Adds this value to one analytic gradient element; the check must then fail.
    #[arg(long, hide = true)]
    pub corrupt_grad: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// metrics.json files to tabulate.
    #[arg(long, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Comma-separated modes to train and compare on `--data`.
    #[arg(long)]
    pub compare: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value = "mlp")]
    pub trunk: String,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_CONFIG,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Schedule(_) => EXIT_CONFIG,
                Error::Dimension { .. }
                | Error::Label { .. }
                | Error::Parse { .. }
                | Error::Preprocess(_)
                | Error::Corrupt { .. }
                | Error::Version { .. }
                | Error::HashMismatch { .. }
                | Error::Image { .. } => EXIT_DATA,
                Error::Io { .. } => EXIT_IO,
                Error::Contract(_) => EXIT_INTERNAL,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub image_size: usize,
    pub train_data: PathBuf,
    pub val_data: Option<PathBuf>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

/// Parses `key = value` lines into `--key value` arguments.
pub fn config_file_args(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut args = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: "expected key = value".into(),
        })?;
        let key = key.trim().replace('_', "-");
        if key == "config" {
            return Err(Error::Config("config files cannot include other config files".into()));
        }
        let value = value.trim();
        match value {
            "true" => args.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                args.push(format!("--{key}").into());
                args.push(value.into());
            }
        }
    }
    Ok(args)
}

/// Runs the tool on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cli = match &cli.common.config {
        None => cli,
        Some(path) => match config_file_args(path) {
            Ok(extra) => {
                args.extend(extra);
                match Cli::try_parse_from(&args) {
                    Ok(cli) => cli,
                    Err(e) => {
                        eprintln!("error in config file {}:", path.display());
                        let _ = e.print();
                        return EXIT_CONFIG;
                    }
                }
            }
            Err(e) => return report_error(CliError::Core(e)),
        },
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => report_error(e),
    }
}

fn report_error(e: CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli.common, a),
        Command::Train(a) => cmd_train(&cli.common, a),
        Command::Eval(a) => cmd_eval(&cli.common, a),
        Command::Gradcheck(a) => cmd_gradcheck(&cli.common, a),
        Command::Report(a) => cmd_report(&cli.common, a),
    }
}

fn parse_vec7(s: &str, what: &str) -> CliResult<[f64; NUM_EXPRESSIONS]> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("{what}: expected 7 comma-separated numbers, got {s:?}")))?;
    vals.try_into()
        .map_err(|v: Vec<f64>| CliError::Usage(format!("{what}: expected 7 values, got {}", v.len())))
}

fn parse_mode(s: &str) -> CliResult<TrainMode> {
    TrainMode::parse(s).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown mode {s:?} (expected expr_only, au_only, shared_backbone or multitask)"
        ))
    })
}

fn parse_trunk(s: &str) -> CliResult<TrunkPreset> {
    TrunkPreset::parse(s).ok_or_else(|| CliError::Usage(format!("unknown trunk {s:?} (expected mlp or smallcnn)")))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct SetSummary {
    n: usize,
    expr_only: usize,
    au_only: usize,
    both: usize,
    unlabeled: usize,
    expr_marginals: [f64; NUM_EXPRESSIONS],
    au_marginals: [f64; NUM_AUS],
}

fn summarize(records: &[AnnotationRecord]) -> SetSummary {
    let part = partition(records);
    let mut expr = [0.0; NUM_EXPRESSIONS];
    let mut au = [0.0; NUM_AUS];
    let (mut n_expr, mut n_au) = (0usize, 0usize);
    for r in records {
        if let Some(e) = r.expr {
            expr[e as usize] += 1.0;
            n_expr += 1;
        }
        if let Some(a) = r.aus {
            for (s, &b) in au.iter_mut().zip(&a) {
                *s += f64::from(b);
            }
            n_au += 1;
        }
    }
    expr.iter_mut().for_each(|v| *v /= n_expr.max(1) as f64);
    au.iter_mut().for_each(|v| *v /= n_au.max(1) as f64);
    SetSummary {
        n: records.len(),
        expr_only: part.expr_only.len(),
        au_only: part.au_only.len(),
        both: part.both.len(),
        unlabeled: part.excluded.len(),
        expr_marginals: expr,
        au_marginals: au,
    }
}

fn write_split(dir: &Path, stem: &str, out: &SynthOutput) -> CliResult<()> {
    let manifest = dir.join(format!("{stem}.csv"));
    write_manifest(&manifest, &out.records)?;
    write_packed_images(&packed_path_for(&manifest), &out.images)?;
    Ok(())
}

fn cmd_synth(common: &CommonArgs, a: &SynthArgs) -> CliResult<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_samples: a.n,
        seed: common.seed,
        label_noise: a.label_noise,
        frac_expr_only: a.frac_expr_only,
        frac_au_only: a.frac_au_only,
        frac_both: a.frac_both,
        image_size: a.image_size,
        patch_amplitude: a.patch_amplitude.unwrap_or(defaults.patch_amplitude),
        pixel_noise: a.pixel_noise.unwrap_or(defaults.pixel_noise),
        emotion_weights: match &a.emotion_weights {
            Some(s) => parse_vec7(s, "--emotion-weights")?,
            None => defaults.emotion_weights,
        },
        ..defaults
    };
    cfg.validate()?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    create_dir(&dir)?;
    let train = synth_generate(&cfg)?;
    write_split(&dir, "train", &train)?;

    let mut report = serde_json::Map::new();
    report.insert("config".into(), serde_json::to_value(&cfg).expect("serializes"));
    report.insert("train".into(), serde_json::to_value(summarize(&train.records)).expect("serializes"));
    if a.val_n > 0 {
        let val_cfg = val_config(&cfg, a.val_n);
        let val = synth_generate(&val_cfg)?;
        write_split(&dir, "val", &val)?;
        report.insert("val_seed".into(), val_cfg.seed.into());
        report.insert("val".into(), serde_json::to_value(summarize(&val.records)).expect("serializes"));
    }
    let report = serde_json::Value::Object(report);
    write_text(&dir.join("synth_report.json"), &to_json(&report))?;
    let t = &report["train"];
    println!(
        "wrote {} samples to {} (expr-only {}, au-only {}, both {})",
        cfg.n_samples,
        dir.display(),
        t["expr_only"],
        t["au_only"],
        t["both"]
    );
    Ok(())
}

/// Fully labeled validation draw sharing everything but the seed and size.
pub fn val_config(train: &SynthConfig, n: usize) -> SynthConfig {
    SynthConfig {
        n_samples: n,
        seed: train.seed ^ 0x5641_4C5F_5345_4544,
        frac_expr_only: 0.0,
        frac_au_only: 0.0,
        frac_both: 1.0,
        ..train.clone()
    }
}

/// `dir` → (`dir/train.csv`, `dir/val.csv` if present); a file is used as-is.
fn resolve_data(data: Option<&Path>) -> CliResult<(PathBuf, Option<PathBuf>)> {
    let data = data.ok_or_else(|| CliError::Usage("--data is required".into()))?;
    if data.is_dir() {
        let val = data.join("val.csv");
        Ok((data.join("train.csv"), val.exists().then_some(val)))
    } else {
        Ok((data.to_path_buf(), None))
    }
}

fn train_config(seed: u64, a: &TrainArgs) -> CliResult<TrainConfig> {
    let focal = FocalConfig {
        gamma: a.gamma,
        alpha: a.alpha.as_deref().map(|s| parse_vec7(s, "--alpha")).transpose()?,
    };
    let cfg = TrainConfig {
        mode: parse_mode(&a.mode)?,
        epochs: a.epochs,
        batch_size: a.batch,
        lr_start: a.lr,
        lr_min: a.lr_min,
        focal,
        seed,
        trunk: parse_trunk(&a.trunk)?,
        init_scale: a.init_scale,
        au_threshold: a.au_threshold,
        val_fraction: a.val_fraction,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn epoch_line(cfg: &TrainConfig, es: &EpochStats) -> String {
    let losses: Vec<String> = es
        .phases
        .iter()
        .map(|p| format!("{:?}={:.4}", p.phase, p.mean_loss))
        .collect();
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let val = es.val.as_ref();
    format!(
        "epoch {}/{} lr {:.6} loss [{}] val expr {} au {}",
        es.epoch + 1,
        cfg.epochs,
        es.lr,
        losses.join(" "),
        fmt(val.and_then(MetricsReport::expr_score)),
        fmt(val.and_then(MetricsReport::au_score)),
    )
}

fn cmd_train(common: &CommonArgs, a: &TrainArgs) -> CliResult<()> {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let mut manifest = match &a.manifest {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<RunManifest>(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => {
            let (train, val) = resolve_data(common.data.as_deref())?;
            RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config: train_config(common.seed, a)?,
                image_size: a.image_size,
                train_data: train,
                val_data: a.val.clone().or(val),
                artifacts: BTreeMap::new(),
            }
        }
    };
    manifest.config.validate()?;
    for (name, file) in [
        ("checkpoint", "best.ckpt"),
        ("epoch_stats", "epochs.jsonl"),
        ("metrics_json", "metrics.json"),
        ("metrics_table", "metrics.txt"),
    ] {
        manifest.artifacts.insert(name.into(), out.join(file));
    }
    create_dir(&out)?;
    write_text(&out.join("run_manifest.json"), &to_json(&manifest))?;

    let pre = PreprocessConfig::square(manifest.image_size);
    let train = Dataset::load(&manifest.train_data, &pre)?;
    let val = manifest.val_data.as_deref().map(|p| Dataset::load(p, &pre)).transpose()?;
    let cfg = &manifest.config;
    let mut jsonl = String::new();
    let mut on_epoch = |es: &EpochStats| {
        println!("{}", epoch_line(cfg, es));
        jsonl.push_str(&serde_json::to_string(es).expect("stats serialize"));
        jsonl.push('\n');
    };
    let result = fit(&train, val.as_ref(), cfg, Some(&mut on_epoch))?;
    write_text(&manifest.artifacts["epoch_stats"], &jsonl)?;
    save_checkpoint(&result.best, &manifest.artifacts["checkpoint"])?;
    let report = result.best_report.unwrap_or(MetricsReport { expr: None, au: None });
    write_text(&manifest.artifacts["metrics_json"], &to_json(&report))?;
    let label = format!("{} (epoch {})", cfg.mode.as_str(), result.best.epoch + 1);
    let table = render_tables(&[(label, report)]);
    write_text(&manifest.artifacts["metrics_table"], &table)?;
    print!("{table}");
    Ok(())
}

fn eval_predictions(path: &Path, data: &[AnnotationRecord], threshold: f64) -> CliResult<MetricsReport> {
    let preds: BTreeMap<String, AnnotationRecord> = load_annotations(path)?
        .into_iter()
        .map(|r| (r.id.clone(), r))
        .collect();
    let (mut ep, mut et, mut ap, mut at) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in data {
        let p = preds.get(&r.id).ok_or_else(|| Error::Label {
            record: r.id.clone(),
            message: format!("no prediction in {}", path.display()),
        })?;
        let missing = |what: &str| Error::Label {
            record: r.id.clone(),
            message: format!("prediction lacks {what}"),
        };
        if let Some(e) = r.expr {
            ep.push(p.expr.ok_or_else(|| missing("an expression"))?);
            et.push(e);
        }
        if let Some(a) = r.aus {
            ap.extend(p.aus.ok_or_else(|| missing("AU labels"))?.iter().map(|&b| f64::from(b)));
            at.push(a);
        }
    }
    let probs = Tensor::from_vec(&[at.len(), NUM_AUS], ap)?;
    Ok(MetricsReport::from_predictions(Some((&ep, &et)), Some((&probs, &at)), threshold)?)
}

fn cmd_eval(common: &CommonArgs, a: &EvalArgs) -> CliResult<()> {
    let (train, val) = resolve_data(common.data.as_deref())?;
    let manifest = val.unwrap_or(train);
    let (label, report) = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), None) => {
            let data = Dataset::load(&manifest, &PreprocessConfig::square(a.image_size))?;
            let ck = load_checkpoint(ckpt, None)?;
            let expected = &ck.model.architecture().input_shape;
            if data.input_shape().is_some_and(|s| s != expected.as_slice()) {
                return Err(Error::dim("checkpoint input", expected, data.input_shape().unwrap_or(&[])).into());
            }
            let idx: Vec<usize> = (0..data.len()).collect();
            let label = ckpt.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            (label, evaluate(&ck.model, &data, &idx, a.au_threshold)?)
        }
        (None, Some(preds)) => {
            let records = load_annotations(&manifest)?;
            ("predictions".to_string(), eval_predictions(preds, &records, a.au_threshold)?)
        }
        _ => return Err(CliError::Usage("eval needs --checkpoint or --predictions".into())),
    };
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_text(&out.join("metrics.json"), &to_json(&report))?;
    }
    print!("{}", render_tables(&[(label, report)]));
    Ok(())
}

fn cmd_gradcheck(common: &CommonArgs, a: &GradcheckArgs) -> CliResult<()> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut cfg = GradcheckConfig::standard(common.seed);
    cfg.seeds = (0..a.seeds).map(|i| common.seed.wrapping_add(i)).collect();
    cfg.corrupt = a.corrupt_grad;
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.render());
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_text(&out.join("gradcheck.json"), &to_json(&report))?;
    }
    let failed: Vec<&str> = report
        .components
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.component.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} components passed", report.components.len());
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

#[derive(Debug, Clone, Serialize)]
struct CompareRow {
    mode: String,
    seed: u64,
    expr_score: Option<f64>,
    au_score: Option<f64>,
    report: MetricsReport,
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean of the per-seed reports' headline numbers, with per-task sample counts summed.
fn mean_report(rows: &[&CompareRow]) -> MetricsReport {
    let mut out = rows[0].report.clone();
    if let Some(e) = out.expr.as_mut() {
        let es: Vec<_> = rows.iter().filter_map(|r| r.report.expr.as_ref()).collect();
        e.f1 = es.iter().map(|x| x.f1).sum::<f64>() / es.len() as f64;
        e.acc = es.iter().map(|x| x.acc).sum::<f64>() / es.len() as f64;
        e.score = es.iter().map(|x| x.score).sum::<f64>() / es.len() as f64;
    }
    if let Some(a) = out.au.as_mut() {
        let aus: Vec<_> = rows.iter().filter_map(|r| r.report.au.as_ref()).collect();
        a.f1 = aus.iter().map(|x| x.f1).sum::<f64>() / aus.len() as f64;
        a.acc = aus.iter().map(|x| x.acc).sum::<f64>() / aus.len() as f64;
        a.score = aus.iter().map(|x| x.score).sum::<f64>() / aus.len() as f64;
    }
    out
}

fn cmd_report(common: &CommonArgs, a: &ReportArgs) -> CliResult<()> {
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for path in &a.metrics {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let label = path
            .parent()
            .and_then(Path::file_name)
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        rows.push((label, report));
    }
    if let Some(modes) = &a.compare {
        if a.seeds == 0 {
            return Err(CliError::Usage("--seeds must be at least 1".into()));
        }
        let modes: Vec<TrainMode> = modes.split(',').map(|m| parse_mode(m.trim())).collect::<CliResult<_>>()?;
        let (train_path, val_path) = resolve_data(common.data.as_deref())?;
        let pre = PreprocessConfig::square(a.image_size);
        let train = Dataset::load(&train_path, &pre)?;
        let val = val_path.map(|p| Dataset::load(&p, &pre)).transpose()?;
        let trunk = parse_trunk(&a.trunk)?;
        let jobs: Vec<TrainConfig> = modes
            .iter()
            .flat_map(|&mode| {
                (0..a.seeds).map(move |i| TrainConfig {
                    mode,
                    epochs: a.epochs,
                    batch_size: a.batch,
                    lr_start: a.lr,
                    focal: FocalConfig::with_gamma(a.gamma),
                    seed: common.seed.wrapping_add(i),
                    trunk,
                    ..TrainConfig::default()
                })
            })
            .collect();
        let results = run_parallel(&jobs, common.jobs.max(1), |cfg| {
            let out = fit(&train, val.as_ref(), cfg, None)?;
            let mut report = out.best_report.unwrap_or(MetricsReport { expr: None, au: None });
            // a head the mode never trains would only report its initialization
            if cfg.mode == TrainMode::AuOnly {
                report.expr = None;
            }
            if cfg.mode == TrainMode::ExprOnly {
                report.au = None;
            }
            Ok(CompareRow {
                mode: cfg.mode.as_str().into(),
                seed: cfg.seed,
                expr_score: report.expr_score(),
                au_score: report.au_score(),
                report,
            })
        })?;
        let mut summary = Vec::new();
        for mode in &modes {
            let mine: Vec<&CompareRow> = results.iter().filter(|r| r.mode == mode.as_str()).collect();
            let me = mean(mine.iter().map(|r| r.expr_score));
            let ma = mean(mine.iter().map(|r| r.au_score));
            println!(
                "{:<16} seeds {}  mean expr score {}  mean au score {}",
                mode.as_str(),
                mine.len(),
                me.map_or("-".into(), |v| format!("{v:.4}")),
                ma.map_or("-".into(), |v| format!("{v:.4}")),
            );
            summary.push(serde_json::json!({
                "mode": mode.as_str(),
                "mean_expr_score": me,
                "mean_au_score": ma,
            }));
            rows.push((format!("{} (mean of {})", mode.as_str(), mine.len()), mean_report(&mine)));
        }
        if let Some(out) = &common.out {
            create_dir(out)?;
            let doc = serde_json::json!({ "runs": results, "summary": summary });
            write_text(&out.join("compare.json"), &to_json(&doc))?;
        }
    }
    if rows.is_empty() {
        return Err(CliError::Usage("report needs --metrics files or --compare".into()));
    }
    let table = render_tables(&rows);
    if let Some(out) = &common.out {
        create_dir(out)?;
        write_text(&out.join("report.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

/// Applies `f` to every job on up to `jobs` threads; results keep job order.
fn run_parallel<J, R, F>(items: &[J], jobs: usize, f: F) -> Result<Vec<R>>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> Result<R> + Sync,
{
    let chunk = items.len().div_ceil(jobs).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}
