//! Adamax, the minibatch training loop, multi-seed runs and grid sweeps.
//!
//! # Randomness
//!
//! A run with seed `s` draws from four independent ChaCha8 streams of
//! `seed_from_u64(s)`: stream 0 initializes parameters, stream 1 shuffles the
//! train split at the start of every epoch, stream 2 draws the
//! reparameterization noise of every batch and stream 3 draws dropout masks.
//! Deterministic objectives never touch streams 2 and 3, and neither does a
//! stochastic objective with `zero_noise`, so such runs share the exact batch
//! order and initialization of a cross-entropy run with the same seed.
//!
//! # Selection
//!
//! After every epoch the model is scored on the full validation split with the
//! task's headline metric. The best epoch is the first one reaching the
//! maximum; training stops once `patience` epochs pass without a strict
//! improvement. Test metrics come from the parameters of the best epoch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Split, Targets};
use crate::diffcore::{Tape, Tensor};
use crate::encoder::{ParamSet, TaskKind};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{ArchConfig, Model, StepNoise};
use crate::objectives::{ObjectiveConfig, ObjectiveKind, TermValues};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_EPS: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;

/// The weight grid searched for β and γ.
pub const PAPER_GRID: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---- optimizer ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `p ← p·(1 − lr·wd)` before the Adamax update.
    #[default]
    Decoupled,
    /// `g ← g + wd·p` before the moment updates.
    Coupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: DecayMode,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        AdamaxConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay: DecayMode::Decoupled,
        }
    }
}

/// First moments, infinity-norm accumulators and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl AdamaxState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        AdamaxState {
            t: 0,
            m: zeros.clone(),
            u: zeros,
        }
    }
}

/// One Adamax update of every tensor in `params`; `grads` follows the same order.
pub fn adamax_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamaxState,
    lr: f64,
    cfg: &AdamaxConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient of `{}` has shape {:?}, parameter has {:?}",
                p.name,
                g.shape(),
                p.tensor.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: p.name.clone(),
            });
        }
    }
    state.t += 1;
    let step = lr / (1.0 - cfg.beta1.powi(state.t.min(i32::MAX as u64) as i32));
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, u) = (&mut state.m[i], &mut state.u[i]);
        for (j, (w, &gj)) in p.tensor.values_mut().iter_mut().zip(g.values()).enumerate() {
            let gj = match cfg.decay {
                DecayMode::Decoupled => {
                    if cfg.weight_decay != 0.0 {
                        *w *= decay;
                    }
                    gj
                }
                DecayMode::Coupled => gj + cfg.weight_decay * *w,
            };
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            u[j] = (cfg.beta2 * u[j]).max(gj.abs());
            *w -= step * m[j] / (u[j] + cfg.eps);
        }
    }
    Ok(())
}

// ---- evaluation ----------------------------------------------------------------

/// Metric used for model selection and headline reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Headline {
    MacroF1,
    MacroRecall,
    Accuracy,
    /// F1 of one class id.
    ClassF1(usize),
    Spearman,
    Pearson,
}

impl Headline {
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => Headline::MacroF1,
            TaskKind::Regression => Headline::Spearman,
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            Headline::Spearman | Headline::Pearson => TaskKind::Regression,
            _ => TaskKind::Classification,
        }
    }
}

impl fmt::Display for Headline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Headline::MacroF1 => f.write_str("macro_f1"),
            Headline::MacroRecall => f.write_str("macro_recall"),
            Headline::Accuracy => f.write_str("accuracy"),
            Headline::ClassF1(c) => write!(f, "class_f1:{c}"),
            Headline::Spearman => f.write_str("spearman"),
            Headline::Pearson => f.write_str("pearson"),
        }
    }
}

impl FromStr for Headline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        if let Some(c) = s.strip_prefix("class_f1:") {
            return c
                .parse()
                .map(Headline::ClassF1)
                .map_err(|_| Error::Config(format!("bad class id in `{s}`")));
        }
        match s.as_str() {
            "macro_f1" => Ok(Headline::MacroF1),
            "macro_recall" => Ok(Headline::MacroRecall),
            "accuracy" => Ok(Headline::Accuracy),
            "spearman" => Ok(Headline::Spearman),
            "pearson" => Ok(Headline::Pearson),
            _ => Err(Error::Config(format!("unknown metric `{s}`"))),
        }
    }
}

/// Metrics of one model on one labelled set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_f1: Option<Vec<f64>>,
    /// `None` when a correlation is undefined (constant predictions).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pearson: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

impl EvalMetrics {
    /// Value of `h`; an undefined correlation scores 0.
    pub fn headline(&self, h: Headline) -> f64 {
        let v = match h {
            Headline::MacroF1 => self.macro_f1,
            Headline::MacroRecall => self.macro_recall,
            Headline::Accuracy => self.accuracy,
            Headline::ClassF1(c) => self.per_class_f1.as_ref().and_then(|f| f.get(c).copied()),
            Headline::Spearman => self.spearman,
            Headline::Pearson => self.pearson,
        };
        v.unwrap_or(0.0)
    }

    /// Named scalar metrics in a fixed order.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push((name.to_string(), v));
            }
        };
        push("macro_f1", self.macro_f1);
        push("macro_recall", self.macro_recall);
        push("accuracy", self.accuracy);
        push("pearson", self.pearson);
        push("spearman", self.spearman);
        push("mse", self.mse);
        if let Some(f) = &self.per_class_f1 {
            for (c, v) in f.iter().enumerate() {
                out.push((format!("f1_class_{c}"), *v));
            }
        }
        out
    }
}

/// Scores class probabilities (argmax) or `[N x 1]` predictions against targets.
pub fn evaluate_predictions(pred: &Tensor, targets: &Targets, classes: usize) -> Result<EvalMetrics> {
    match targets {
        Targets::Classes(gold) => {
            let p = pred.argmax_rows();
            let cm = metrics::ConfusionMatrix::new(gold, &p, classes)?;
            Ok(EvalMetrics {
                n: gold.len(),
                macro_f1: Some((0..classes).map(|c| cm.f1(c)).sum::<f64>() / classes as f64),
                macro_recall: Some(
                    (0..classes).map(|c| cm.recall(c)).sum::<f64>() / classes as f64,
                ),
                accuracy: Some(cm.accuracy()),
                per_class_f1: Some((0..classes).map(|c| cm.f1(c)).collect()),
                ..EvalMetrics::default()
            })
        }
        Targets::Scores(gold) => {
            let p = pred.values();
            let defined = |r: Result<f64>| match r {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedCorrelation(_)) => Ok(None),
                Err(e) => Err(e),
            };
            let mse = p.iter().zip(gold).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                / gold.len().max(1) as f64;
            Ok(EvalMetrics {
                n: gold.len(),
                pearson: defined(metrics::pearson(p, gold))?,
                spearman: defined(metrics::spearman(p, gold))?,
                mse: Some(mse),
                ..EvalMetrics::default()
            })
        }
    }
}

pub fn evaluate(model: &Model, x: &Tensor, targets: &Targets, classes: usize) -> Result<EvalMetrics> {
    let task = match targets {
        Targets::Classes(_) => TaskKind::Classification,
        Targets::Scores(_) => TaskKind::Regression,
    };
    evaluate_predictions(&model.predict(x, task)?, targets, classes)
}

// ---- configuration -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub arch: ArchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub optimizer: AdamaxConfig,
    /// Validation metric; the task's headline metric when unset.
    pub selection: Option<Headline>,
    /// Record per-step loss terms in the report.
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveConfig::ce(),
            arch: ArchConfig::default(),
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-2,
            patience: 5,
            seeds: vec![1, 2, 3, 4, 5],
            optimizer: AdamaxConfig::default(),
            selection: None,
            log_steps: true,
        }
    }
}

impl TrainConfig {
    pub fn new(objective: ObjectiveConfig) -> Self {
        TrainConfig {
            objective,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.patience == 0 || self.patience > self.epochs {
            return bad(format!(
                "patience must lie in 1..={} (epochs), got {}",
                self.epochs, self.patience
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("invalid learning rate {}", self.learning_rate));
        }
        let o = &self.optimizer;
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return bad(format!("invalid weight decay {}", o.weight_decay));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad(format!("invalid Adamax hyperparameters {o:?}"));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let Some(h) = self.selection {
            if h.task() != self.objective.task() {
                return bad(format!(
                    "selection metric `{h}` does not fit objective `{}`",
                    self.objective.kind
                ));
            }
        }
        Ok(())
    }

    pub fn headline(&self) -> Headline {
        self.selection
            .unwrap_or_else(|| Headline::default_for(self.objective.task()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_json(self)
    }
}

pub fn sha256_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("serializable value");
    hex::encode(Sha256::digest(text.as_bytes()))
}

// ---- reports ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    pub terms: TermValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of the step terms.
    pub train: TermValues,
    /// Objective on the whole validation split with zero noise and no dropout.
    pub val_loss: TermValues,
    pub val_metric: f64,
}

/// Everything a single-seed run reports. Contains no timing, so equal
/// configurations produce byte-identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub objective: ObjectiveConfig,
    pub selection: Headline,
    pub epochs: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepLog>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub val: EvalMetrics,
    /// `None` when the dataset has no test rows.
    pub test: Option<EvalMetrics>,
    /// SHA-256 over the parameter bits after every optimizer step.
    pub trajectory_hash: String,
}

impl RunReport {
    pub fn val_metric(&self) -> f64 {
        self.val.headline(self.selection)
    }

    pub fn test_metric(&self) -> Option<f64> {
        self.test.as_ref().map(|t| t.headline(self.selection))
    }
}

/// A finished run: its report, the best-epoch model and its wall-clock time.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Per-metric mean and standard deviation over runs.
pub fn summarize<'a>(metrics: impl IntoIterator<Item = &'a EvalMetrics>) -> BTreeMap<String, MeanStd> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in metrics {
        for (k, v) in m.scalars() {
            cols.entry(k).or_default().push(v);
        }
    }
    cols.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub config: TrainConfig,
    pub config_hash: String,
    pub runs: Vec<RunReport>,
    pub val: BTreeMap<String, MeanStd>,
    pub test: BTreeMap<String, MeanStd>,
}

impl MultiSeedReport {
    pub fn from_runs(config: &TrainConfig, runs: Vec<RunReport>) -> Self {
        MultiSeedReport {
            config: config.clone(),
            config_hash: config.hash(),
            val: summarize(runs.iter().map(|r| &r.val)),
            test: summarize(runs.iter().filter_map(|r| r.test.as_ref())),
            runs,
        }
    }

    pub fn val_metric(&self) -> MeanStd {
        MeanStd::of(&self.runs.iter().map(RunReport::val_metric).collect::<Vec<_>>())
    }

    pub fn test_metric(&self) -> MeanStd {
        MeanStd::of(&self.runs.iter().filter_map(RunReport::test_metric).collect::<Vec<_>>())
    }
}

// ---- training ------------------------------------------------------------------

fn add_terms(acc: &mut TermValues, t: &TermValues) {
    acc.nll += t.nll;
    acc.kl += t.kl;
    acc.batch_entropy += t.batch_entropy;
    acc.penalty += t.penalty;
    acc.total += t.total;
}

fn scale_terms(t: &mut TermValues, s: f64) {
    t.nll *= s;
    t.kl *= s;
    t.batch_entropy *= s;
    t.penalty *= s;
    t.total *= s;
}

fn check_task(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if ds.task() != cfg.objective.task() {
        return Err(Error::Config(format!(
            "objective `{}` does not fit a {:?} dataset",
            cfg.objective.kind,
            ds.task()
        )));
    }
    Ok(())
}

/// Initializes a model from stream 0 of `seed` and trains it.
pub fn train(ds: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_task(ds, cfg)?;
    let model = Model::init(
        cfg.objective.kind,
        ds.dim(),
        ds.out_dim(),
        &cfg.arch,
        &mut rng_stream(seed, STREAM_INIT),
    )?;
    train_model(model, ds, cfg, seed)
}

fn zero_noise_for(model: &Model, kind: ObjectiveKind, rows: usize) -> StepNoise {
    StepNoise {
        eps: kind
            .is_stochastic()
            .then(|| Tensor::zeros(&[rows, model.code_dim()])),
        dropout_mask: None,
    }
}

/// Objective terms on a whole split with zero noise and no dropout.
pub fn loss_on(model: &Model, x: &Tensor, y: &Targets, objective: &ObjectiveConfig) -> Result<TermValues> {
    let mut tape = Tape::new();
    let noise = zero_noise_for(model, objective.kind, x.rows());
    let fwd = model.forward(&mut tape, x, y.as_ref(), objective, &noise)?;
    Ok(fwd.terms.values(&tape))
}

/// Trains `model` from its current parameters.
pub fn train_model(mut model: Model, ds: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    check_task(ds, cfg)?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() || ds.indices(Split::Val).is_empty() {
        return Err(Error::Data("training needs non-empty train and val splits".into()));
    }
    if model.input_dim() != ds.dim() {
        return Err(Error::Dimension(format!(
            "model expects {} features, dataset has {}",
            model.input_dim(),
            ds.dim()
        )));
    }
    let classes = ds.num_classes();
    let headline = cfg.headline();
    let (xv, yv) = ds.part(Split::Val);
    let kind = cfg.objective.kind;
    let stochastic = kind.is_stochastic() && !cfg.objective.zero_noise;
    let dropout = model.dropout();

    let mut shuffle_rng = rng_stream(seed, STREAM_SHUFFLE);
    let mut eps_rng = rng_stream(seed, STREAM_EPS);
    let mut drop_rng = rng_stream(seed, STREAM_DROPOUT);
    let mut state = AdamaxState::new(model.params());
    let mut trajectory = Sha256::new();

    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, Model, EvalMetrics)> = None;
    let mut step = 0;
    let mut stopped = cfg.epochs;

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut sum = TermValues::default();
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let x = ds.features.select_rows(batch);
            let y = ds.targets.select(batch);
            let b = batch.len();
            let noise = StepNoise {
                eps: kind.is_stochastic().then(|| {
                    let code = model.code_dim();
                    if stochastic {
                        let v = (0..b * code).map(|_| eps_rng.sample(StandardNormal)).collect();
                        Tensor::matrix(b, code, v).expect("eps shape")
                    } else {
                        Tensor::zeros(&[b, code])
                    }
                }),
                dropout_mask: (dropout > 0.0).then(|| {
                    let h = model.hidden_dim();
                    let keep = 1.0 / (1.0 - dropout);
                    let v = (0..b * h)
                        .map(|_| if drop_rng.random::<f64>() < dropout { 0.0 } else { keep })
                        .collect();
                    Tensor::matrix(b, h, v).expect("mask shape")
                }),
            };
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &x, y.as_ref(), &cfg.objective, &noise)?;
            let terms = fwd.terms.values(&tape);
            if !terms.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: "loss",
                    loss: terms.total,
                    last_good: Box::new(model.params().clone()),
                });
            }
            tape.backward(fwd.terms.total)?;
            let grads = fwd
                .params
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .cloned()
                        .ok_or_else(|| Error::Contract("parameter without gradient".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let before = model.params().clone();
            adamax_step(
                model.params_mut(),
                &grads,
                &mut state,
                cfg.learning_rate,
                &cfg.optimizer,
            )?;
            if !model.params().all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: "parameters",
                    loss: terms.total,
                    last_good: Box::new(before),
                });
            }
            for p in model.params().iter() {
                for v in p.tensor.values() {
                    trajectory.update(v.to_bits().to_le_bytes());
                }
            }
            add_terms(&mut sum, &terms);
            batches += 1;
            if cfg.log_steps {
                steps.push(StepLog {
                    epoch,
                    step,
                    batch_size: b,
                    terms,
                });
            }
        }
        scale_terms(&mut sum, 1.0 / batches as f64);

        let val = evaluate(&model, &xv, &yv, classes)?;
        let val_metric = val.headline(headline);
        let val_loss = loss_on(&model, &xv, &yv, &cfg.objective)?;
        epochs.push(EpochLog {
            epoch,
            train: sum,
            val_loss,
            val_metric,
        });
        if best.as_ref().is_none_or(|b| val_metric > b.0) {
            best = Some((val_metric, epoch, model.clone(), val));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            stopped = epoch;
            break;
        }
    }

    let (_, best_epoch, best_model, val) = best.expect("at least one epoch ran");
    let test = if ds.indices(Split::Test).is_empty() {
        None
    } else {
        let (xt, yt) = ds.part(Split::Test);
        Some(evaluate(&best_model, &xt, &yt, classes)?)
    };
    let report = RunReport {
        seed,
        config_hash: cfg.hash(),
        objective: cfg.objective.clone(),
        selection: headline,
        epochs,
        steps,
        best_epoch,
        stopped_epoch: stopped,
        val,
        test,
        trajectory_hash: hex::encode(trajectory.finalize()),
    };
    Ok(TrainOutcome {
        report,
        model: best_model,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Trains one run per `(seed, dataset)` pair in parallel; outcomes keep input order.
pub fn train_seeds(data: &[(u64, &Dataset)], cfg: &TrainConfig) -> Result<Vec<TrainOutcome>> {
    data.par_iter()
        .map(|&(seed, ds)| train(ds, cfg, seed))
        .collect()
}

/// Trains every seed of `cfg` on the same dataset.
pub fn train_multi(ds: &Dataset, cfg: &TrainConfig) -> Result<(MultiSeedReport, Vec<TrainOutcome>)> {
    let data: Vec<(u64, &Dataset)> = cfg.seeds.iter().map(|&s| (s, ds)).collect();
    let outcomes = train_seeds(&data, cfg)?;
    let report = MultiSeedReport::from_runs(cfg, outcomes.iter().map(|o| o.report.clone()).collect());
    Ok((report, outcomes))
}

// ---- sweeps ----------------------------------------------------------------------

/// Two weight axes. For each objective `beta` feeds the weight of
/// [`ObjectiveConfig::from_weights`]'s first slot (the penalty weight for
/// CE+CP) and `gamma` the second. Axes an objective does not use collapse to `[0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl SweepGrid {
    pub fn paper() -> Self {
        SweepGrid {
            beta: PAPER_GRID.to_vec(),
            gamma: PAPER_GRID.to_vec(),
        }
    }

    pub fn single(beta: f64, gamma: f64) -> Self {
        SweepGrid {
            beta: vec![beta],
            gamma: vec![gamma],
        }
    }

    /// Grid cells for `kind`, in (beta, gamma) lexicographic order of the axes as given.
    pub fn cells(&self, kind: ObjectiveKind) -> Vec<(f64, f64)> {
        let first = kind.uses_beta() || kind == ObjectiveKind::CeCp;
        let b = if first { self.beta.clone() } else { vec![0.0] };
        let g = if kind.uses_gamma() { self.gamma.clone() } else { vec![0.0] };
        b.iter().flat_map(|&x| g.iter().map(move |&y| (x, y))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub gamma: f64,
    pub objective: ObjectiveConfig,
    pub val: MeanStd,
    pub test: MeanStd,
    pub val_per_seed: Vec<f64>,
    pub test_per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: ObjectiveKind,
    pub selection: Headline,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// Index into `rows`.
    pub best: usize,
}

impl SweepReport {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }
}

/// Row with the largest mean validation metric; ties go to the smaller
/// `(beta, gamma)` pair.
pub fn select_best(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(j) => {
                let b = &rows[j];
                let better = r.val.mean > b.val.mean
                    || (r.val.mean == b.val.mean
                        && (r.beta, r.gamma).partial_cmp(&(b.beta, b.gamma))
                            == Some(std::cmp::Ordering::Less));
                Some(if better { i } else { j })
            }
        };
    }
    best
}

/// Trains every grid cell on every `(seed, dataset)` pair. `base.objective.kind`
/// picks the objective; its weights are replaced per cell.
pub fn sweep(data: &[(u64, &Dataset)], base: &TrainConfig, grid: &SweepGrid) -> Result<SweepReport> {
    let kind = base.objective.kind;
    let cells = grid.cells(kind);
    if cells.is_empty() || data.is_empty() {
        return Err(Error::Config("sweep needs a non-empty grid and seed list".into()));
    }
    let configs: Vec<TrainConfig> = cells
        .iter()
        .map(|&(b, g)| {
            let mut c = base.clone();
            c.objective = ObjectiveConfig {
                entropy_source: base.objective.entropy_source,
                zero_noise: base.objective.zero_noise,
                ..ObjectiveConfig::from_weights(kind, b, g)
            };
            c.log_steps = false;
            c
        })
        .collect();
    let jobs: Vec<(usize, u64, &Dataset)> = (0..configs.len())
        .flat_map(|c| data.iter().map(move |&(s, d)| (c, s, d)))
        .collect();
    let reports: Vec<RunReport> = jobs
        .par_iter()
        .map(|&(c, s, d)| train(d, &configs[c], s).map(|o| o.report))
        .collect::<Result<_>>()?;

    let selection = base.headline();
    let rows: Vec<SweepRow> = cells
        .iter()
        .enumerate()
        .map(|(c, &(b, g))| {
            let runs = &reports[c * data.len()..(c + 1) * data.len()];
            let val: Vec<f64> = runs.iter().map(RunReport::val_metric).collect();
            let test: Vec<f64> = runs.iter().filter_map(RunReport::test_metric).collect();
            SweepRow {
                beta: b,
                gamma: g,
                objective: configs[c].objective.clone(),
                val: MeanStd::of(&val),
                test: MeanStd::of(&test),
                val_per_seed: val,
                test_per_seed: test,
            }
        })
        .collect();
    let best = select_best(&rows).expect("non-empty grid");
    Ok(SweepReport {
        kind,
        selection,
        seeds: data.iter().map(|d| d.0).collect(),
        rows,
        best,
    })
}
