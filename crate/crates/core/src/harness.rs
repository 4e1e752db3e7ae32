//! Experiment jobs, manifests and run directories.
//!
//! A [`Manifest`] fully describes one job: its data source (with the SHA-256
//! of any input file), the training configuration and every seed. Executing a
//! manifest is a pure function of its content, so [`verify`] can re-run it and
//! compare the regenerated artifacts with the stored ones byte for byte.
//!
//! # Run directory
//!
//! ```text
//! <root>/<run-id>/
//!   manifest.json    the job
//!   report.json      full report
//!   report.csv       summary table
//!   artifacts.json   SHA-256 of every deterministic artifact
//!   timing.json      wall-clock seconds (not covered by verification)
//!   ckpt/seed-<s>.json
//!   data.<ext>       generated dataset (gen-data only)
//! ```
//!
//! `<run-id>` is the first 12 hex digits of the manifest's SHA-256 and `<root>`
//! defaults to `$SPC_OUT`, or `out` when unset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    self, Dataset, Format, LabelMapping, LoadOptions, NoiseMode, PerturbationSpec, Split, Targets,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::Checkpoint;
use crate::objectives::ObjectiveConfig;
use crate::trainer::{
    self, evaluate_predictions, sha256_json, summarize, EvalMetrics, Headline, MeanStd,
    MultiSeedReport, SweepGrid, SweepReport, TrainConfig, TrainOutcome,
};

pub const MANIFEST_FORMAT: &str = "spc-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const OUT_ENV: &str = "SPC_OUT";
pub const DEFAULT_OUT: &str = "out";

/// Output root from `$SPC_OUT`, defaulting to `out`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// An input file pinned by content hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    pub fn new(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let sha256 = sha256_file(&path)?;
        Ok(FileRef { path, sha256 })
    }

    /// Reads the file and checks it still has the recorded hash.
    pub fn read(&self) -> Result<Vec<u8>> {
        let bytes = std::fs::read(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let got = sha256_bytes(&bytes);
        if got != self.sha256 {
            return Err(Error::Data(format!(
                "{} changed since the manifest was written (sha256 {got}, expected {})",
                self.path.display(),
                self.sha256
            )));
        }
        Ok(bytes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    File {
        file: FileRef,
        format: Format,
        #[serde(default)]
        options: LoadOptions,
    },
    Mixture {
        classes: usize,
        dim: usize,
        per_class: usize,
        sep: f64,
        seed: u64,
    },
    Regression {
        dim: usize,
        n: usize,
        noise: f64,
        seed: u64,
    },
}

impl DataSource {
    pub fn file(path: impl Into<PathBuf>, format: Option<Format>, options: LoadOptions) -> Result<Self> {
        let path = path.into();
        let format = match format {
            Some(f) => f,
            None => Format::from_path(&path)?,
        };
        Ok(DataSource::File {
            file: FileRef::new(path)?,
            format,
            options,
        })
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File {
                file,
                format,
                options,
            } => {
                file.read()?;
                data::load(&file.path, *format, options)
            }
            DataSource::Mixture {
                classes,
                dim,
                per_class,
                sep,
                seed,
            } => data::gen_mixture(*classes, *dim, *per_class, *sep, *seed),
            DataSource::Regression {
                dim,
                n,
                noise,
                seed,
            } => data::gen_regression(*dim, *n, *noise, *seed),
        }
    }
}

/// Train-split perturbation applied per run; the run seed seeds it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturb {
    #[serde(default)]
    pub noise_ratio: f64,
    #[serde(default = "one")]
    pub train_ratio: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
}

fn one() -> f64 {
    1.0
}

impl Perturb {
    pub fn spec(&self, seed: u64) -> PerturbationSpec {
        PerturbationSpec {
            noise_ratio: self.noise_ratio,
            train_ratio: self.train_ratio,
            noise_mode: self.noise_mode,
            seed,
        }
    }
}

fn perturbed(ds: &Dataset, perturb: Option<&Perturb>, seeds: &[u64]) -> Result<Vec<(u64, Dataset)>> {
    seeds
        .iter()
        .map(|&s| {
            let d = match perturb {
                Some(p) => p.spec(s).apply(ds)?,
                None => ds.clone(),
            };
            Ok((s, d))
        })
        .collect()
}

fn borrowed(data: &[(u64, Dataset)]) -> Vec<(u64, &Dataset)> {
    data.iter().map(|(s, d)| (*s, d)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    GenData {
        data: DataSource,
        format: Format,
    },
    Train {
        data: DataSource,
        train: TrainConfig,
        #[serde(default)]
        perturb: Option<Perturb>,
    },
    Eval {
        data: DataSource,
        checkpoint: FileRef,
        split: Split,
    },
    Sweep {
        data: DataSource,
        train: TrainConfig,
        grid: SweepGrid,
        #[serde(default)]
        perturb: Option<Perturb>,
    },
    /// One cell per (objective, noise ratio).
    NoiseStudy(StudySpec),
    /// One cell per (objective, train ratio).
    RatioStudy(StudySpec),
    /// Train on `source`, evaluate on the test split of `target`.
    Ood {
        source: DataSource,
        target: DataSource,
        /// Two-column csv `source_label,target_label`; identity by name when absent.
        #[serde(default)]
        mapping: Option<FileRef>,
        train: TrainConfig,
    },
    ReprQuality {
        data: DataSource,
        train: TrainConfig,
        objectives: Vec<ObjectiveConfig>,
        kmeans_seeds: Vec<u64>,
        kmeans_iters: usize,
    },
}

impl Job {
    pub fn command(&self) -> &'static str {
        match self {
            Job::GenData { .. } => "gen-data",
            Job::Train { .. } => "train",
            Job::Eval { .. } => "eval",
            Job::Sweep { .. } => "sweep",
            Job::NoiseStudy(_) => "noise-study",
            Job::RatioStudy(_) => "ratio-study",
            Job::Ood { .. } => "ood",
            Job::ReprQuality { .. } => "repr-quality",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub data: DataSource,
    /// Shared settings; `objective` is replaced by each entry of `objectives`.
    pub train: TrainConfig,
    pub objectives: Vec<ObjectiveConfig>,
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    /// When set, every cell picks its weights by a validation sweep over this grid.
    #[serde(default)]
    pub tune: Option<SweepGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub job: Job,
}

impl Manifest {
    pub fn new(job: Job) -> Self {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            job,
        }
    }

    pub fn run_id(&self) -> String {
        sha256_json(self)[..12].to_string()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(s)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

// ---- reports ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataReport {
    pub rows: usize,
    pub dim: usize,
    pub classes: usize,
    pub provenance: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub label_names: Vec<String>,
    pub perturb: Option<Perturb>,
    /// Train labels changed by noise injection, per seed.
    pub flipped: Vec<usize>,
    pub dropped_unknown: usize,
    pub result: MultiSeedReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub label_names: Vec<String>,
    pub evaluated_rows: usize,
    /// Rows whose label the checkpoint does not know, by label name.
    pub excluded: BTreeMap<String, usize>,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub objective: String,
    pub ratio: f64,
    /// Weights used (the sweep winner when tuning).
    pub chosen: ObjectiveConfig,
    pub val: MeanStd,
    pub test: MeanStd,
    pub test_per_seed: Vec<f64>,
    /// The full sweep table when tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    /// `noise_ratio` or `train_ratio`.
    pub axis: String,
    pub selection: Headline,
    pub seeds: Vec<u64>,
    pub objectives: Vec<String>,
    pub ratios: Vec<f64>,
    /// Objective-major order.
    pub cells: Vec<StudyCell>,
}

impl StudyReport {
    pub fn cell(&self, objective: &str, ratio: f64) -> Option<&StudyCell> {
        self.cells
            .iter()
            .find(|c| c.objective == objective && c.ratio == ratio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub source_val: EvalMetrics,
    pub target_test: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub source_labels: Vec<String>,
    pub target_labels: Vec<String>,
    pub target_test_rows: usize,
    pub evaluated_rows: usize,
    pub excluded_rows: usize,
    /// Excluded target rows by target label name.
    pub excluded: BTreeMap<String, usize>,
    pub runs: Vec<OodRun>,
    pub target: BTreeMap<String, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprSeed {
    pub seed: u64,
    /// Medians over the k-means seeds.
    pub silhouette: f64,
    pub ari: f64,
    pub test_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprRow {
    pub objective: String,
    pub config: ObjectiveConfig,
    pub runs: Vec<ReprSeed>,
    pub silhouette: MeanStd,
    pub ari: MeanStd,
    pub test_metric: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprReport {
    pub k: usize,
    pub kmeans_seeds: Vec<u64>,
    pub rows: Vec<ReprRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "report", rename_all = "kebab-case")]
pub enum Report {
    GenData(GenDataReport),
    Train(TrainReport),
    Eval(EvalReport),
    Sweep(SweepReport),
    NoiseStudy(StudyReport),
    RatioStudy(StudyReport),
    Ood(OodReport),
    ReprQuality(ReprReport),
}

/// In-memory artifacts of one executed job.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: Report,
    pub csv: String,
    pub checkpoints: Vec<(String, Checkpoint)>,
    /// Extra files written into the run directory, as (name, content).
    pub files: Vec<(String, String)>,
    pub timing: BTreeMap<String, f64>,
}

impl RunOutput {
    /// Every deterministic artifact as (relative path, bytes).
    pub fn artifacts(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut out = vec![
            (
                "report.json".to_string(),
                serde_json::to_string_pretty(&self.report)?.into_bytes(),
            ),
            ("report.csv".to_string(), self.csv.clone().into_bytes()),
        ];
        for (name, ck) in &self.checkpoints {
            out.push((format!("ckpt/{name}"), ck.to_json()?.into_bytes()));
        }
        for (name, body) in &self.files {
            out.push((name.clone(), body.clone().into_bytes()));
        }
        Ok(out)
    }
}

// ---- execution -------------------------------------------------------------------

fn csv_string(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv writer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Short name of an objective; weights are appended when `kinds` repeats its kind.
pub fn objective_label(cfg: &ObjectiveConfig, all: &[ObjectiveConfig]) -> String {
    let repeats = all.iter().filter(|c| c.kind == cfg.kind).count() > 1;
    if !repeats {
        return cfg.kind.to_string();
    }
    let mut parts = Vec::new();
    if cfg.kind.uses_beta() {
        parts.push(format!("beta={}", cfg.beta));
    }
    if cfg.kind.uses_gamma() {
        parts.push(format!("gamma={}", cfg.gamma));
    }
    if cfg.cp_weight != 0.0 {
        parts.push(format!("cp={}", cfg.cp_weight));
    }
    format!("{}({})", cfg.kind, parts.join(","))
}

/// Runs a job in memory.
pub fn execute(job: &Job) -> Result<RunOutput> {
    match job {
        Job::GenData { data, format } => gen_data(data, *format),
        Job::Train {
            data,
            train,
            perturb,
        } => train_job(data, train, perturb.as_ref()),
        Job::Eval {
            data,
            checkpoint,
            split,
        } => eval_job(data, checkpoint, *split),
        Job::Sweep {
            data,
            train,
            grid,
            perturb,
        } => sweep_job(data, train, grid, perturb.as_ref()),
        Job::NoiseStudy(spec) => study_job(spec, StudyAxis::Noise),
        Job::RatioStudy(spec) => study_job(spec, StudyAxis::TrainRatio),
        Job::Ood {
            source,
            target,
            mapping,
            train,
        } => ood_job(source, target, mapping.as_ref(), train),
        Job::ReprQuality {
            data,
            train,
            objectives,
            kmeans_seeds,
            kmeans_iters,
        } => repr_job(data, train, objectives, kmeans_seeds, *kmeans_iters),
    }
}

fn gen_data(source: &DataSource, format: Format) -> Result<RunOutput> {
    if matches!(source, DataSource::File { .. }) {
        return Err(Error::Config("gen-data needs a generator source".into()));
    }
    let ds = source.load()?;
    let (name, body) = match format {
        Format::Jsonl => ("data.jsonl", ds.to_jsonl()?),
        Format::Csv => ("data.csv", ds.to_csv()?),
    };
    let report = GenDataReport {
        rows: ds.len(),
        dim: ds.dim(),
        classes: ds.num_classes(),
        provenance: ds.provenance.clone(),
        file: name.into(),
        sha256: sha256_bytes(body.as_bytes()),
    };
    let csv = csv_string(
        &strs(&["rows", "dim", "classes", "file", "sha256"]),
        &[vec![
            report.rows.to_string(),
            report.dim.to_string(),
            report.classes.to_string(),
            report.file.clone(),
            report.sha256.clone(),
        ]],
    )?;
    Ok(RunOutput {
        report: Report::GenData(report),
        csv,
        checkpoints: Vec::new(),
        files: vec![(name.into(), body)],
        timing: BTreeMap::new(),
    })
}

fn timing_of(outcomes: &[TrainOutcome], prefix: &str) -> BTreeMap<String, f64> {
    outcomes
        .iter()
        .map(|o| (format!("{prefix}seed-{}", o.report.seed), o.wall_clock_secs))
        .collect()
}

fn flips(original: &Dataset, perturbed: &Dataset) -> usize {
    match (&original.targets, &perturbed.targets) {
        (Targets::Classes(_), Targets::Classes(_)) => perturbed
            .flip_mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&f| f).count()),
        _ => 0,
    }
}

fn train_job(source: &DataSource, cfg: &TrainConfig, perturb: Option<&Perturb>) -> Result<RunOutput> {
    cfg.validate()?;
    let ds = source.load()?;
    let data = perturbed(&ds, perturb, &cfg.seeds)?;
    let outcomes = trainer::train_seeds(&borrowed(&data), cfg)?;
    let result = MultiSeedReport::from_runs(cfg, outcomes.iter().map(|o| o.report.clone()).collect());
    let label_names = ds.label_names.clone();

    let headline = cfg.headline();
    let metric_names: Vec<String> = result.test.keys().cloned().collect();
    let mut header = strs(&["seed", "best_epoch", "stopped_epoch"]);
    header.push(format!("val_{headline}"));
    header.extend(metric_names.iter().map(|m| format!("test_{m}")));
    let mut rows = Vec::new();
    for r in &result.runs {
        let mut row = vec![
            r.seed.to_string(),
            r.best_epoch.to_string(),
            r.stopped_epoch.to_string(),
            r.val_metric().to_string(),
        ];
        let scalars: BTreeMap<String, f64> =
            r.test.as_ref().map(|t| t.scalars().into_iter().collect()).unwrap_or_default();
        row.extend(metric_names.iter().map(|m| scalars.get(m).map_or(String::new(), f64::to_string)));
        rows.push(row);
    }
    for (label, pick) in [("mean", true), ("std", false)] {
        let v = result.val_metric();
        let mut row = vec![label.to_string(), String::new(), String::new()];
        row.push((if pick { v.mean } else { v.std }).to_string());
        row.extend(
            metric_names
                .iter()
                .map(|m| (if pick { result.test[m].mean } else { result.test[m].std }).to_string()),
        );
        rows.push(row);
    }
    let csv = csv_string(&header, &rows)?;

    let checkpoints = outcomes
        .iter()
        .map(|o| {
            let names = (!label_names.is_empty()).then(|| label_names.clone());
            (
                format!("seed-{}.json", o.report.seed),
                Checkpoint::new(cfg.objective.clone(), names, o.model.clone()),
            )
        })
        .collect();
    let report = TrainReport {
        label_names: label_names.clone(),
        perturb: perturb.cloned(),
        flipped: data.iter().map(|(_, d)| flips(&ds, d)).collect(),
        dropped_unknown: ds.dropped_unknown,
        result,
    };
    Ok(RunOutput {
        report: Report::Train(report),
        csv,
        checkpoints,
        files: Vec::new(),
        timing: timing_of(&outcomes, ""),
    })
}

/// Maps dataset class ids onto a model's class ids by label name. Returns the
/// kept row positions, their mapped labels and the excluded counts by name.
fn remap_by_name(
    gold: &[usize],
    gold_names: &[String],
    translate: impl Fn(&str) -> Option<usize>,
) -> (Vec<usize>, Vec<usize>, BTreeMap<String, usize>) {
    let mut keep = Vec::new();
    let mut mapped = Vec::new();
    let mut excluded = BTreeMap::new();
    for (i, &g) in gold.iter().enumerate() {
        let name = &gold_names[g];
        match translate(name) {
            Some(c) => {
                keep.push(i);
                mapped.push(c);
            }
            None => *excluded.entry(name.clone()).or_insert(0) += 1,
        }
    }
    (keep, mapped, excluded)
}

fn eval_job(source: &DataSource, checkpoint: &FileRef, split: Split) -> Result<RunOutput> {
    let ck = Checkpoint::from_json(
        &String::from_utf8(checkpoint.read()?).map_err(|e| Error::Data(e.to_string()))?,
    )?;
    let ds = source.load()?;
    let (x, y) = ds.part(split);
    if y.is_empty() {
        return Err(Error::Data(format!("dataset has no {split} rows")));
    }
    let (metrics, evaluated, excluded, names) = match &y {
        Targets::Classes(gold) => {
            let model_names = ck
                .label_names
                .clone()
                .unwrap_or_else(|| ds.label_names.clone());
            let index: BTreeMap<&str, usize> = model_names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.as_str(), i))
                .collect();
            let (keep, mapped, excluded) =
                remap_by_name(gold, &ds.label_names, |n| index.get(n).copied());
            if keep.is_empty() {
                return Err(Error::Data("no evaluated rows share a label with the checkpoint".into()));
            }
            let pred = ck.model.predict(&x.select_rows(&keep), ck.objective.task())?;
            let m = evaluate_predictions(&pred, &Targets::Classes(mapped), model_names.len())?;
            (m, keep.len(), excluded, model_names)
        }
        Targets::Scores(_) => {
            let pred = ck.model.predict(&x, ck.objective.task())?;
            (evaluate_predictions(&pred, &y, 0)?, y.len(), BTreeMap::new(), Vec::new())
        }
    };
    let rows: Vec<Vec<String>> = metrics
        .scalars()
        .into_iter()
        .map(|(k, v)| vec![k, v.to_string()])
        .collect();
    let csv = csv_string(&strs(&["metric", "value"]), &rows)?;
    Ok(RunOutput {
        report: Report::Eval(EvalReport {
            split,
            label_names: names,
            evaluated_rows: evaluated,
            excluded,
            metrics,
        }),
        csv,
        checkpoints: Vec::new(),
        files: Vec::new(),
        timing: BTreeMap::new(),
    })
}

fn sweep_csv(rep: &SweepReport) -> Result<String> {
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.beta.to_string(),
                r.gamma.to_string(),
                r.val.mean.to_string(),
                r.val.std.to_string(),
                r.test.mean.to_string(),
                r.test.std.to_string(),
                u8::from(i == rep.best).to_string(),
            ]
        })
        .collect();
    csv_string(
        &strs(&["beta", "gamma", "val_mean", "val_std", "test_mean", "test_std", "best"]),
        &rows,
    )
}

fn sweep_job(
    source: &DataSource,
    cfg: &TrainConfig,
    grid: &SweepGrid,
    perturb: Option<&Perturb>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let ds = source.load()?;
    let data = perturbed(&ds, perturb, &cfg.seeds)?;
    let rep = trainer::sweep(&borrowed(&data), cfg, grid)?;
    Ok(RunOutput {
        csv: sweep_csv(&rep)?,
        report: Report::Sweep(rep),
        checkpoints: Vec::new(),
        files: Vec::new(),
        timing: BTreeMap::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StudyAxis {
    Noise,
    TrainRatio,
}

fn study_job(spec: &StudySpec, axis: StudyAxis) -> Result<RunOutput> {
    if spec.objectives.is_empty() || spec.ratios.is_empty() {
        return Err(Error::Config("a study needs objectives and ratios".into()));
    }
    let ds = spec.data.load()?;
    let labels: Vec<String> = spec
        .objectives
        .iter()
        .map(|o| objective_label(o, &spec.objectives))
        .collect();
    let configs: Vec<TrainConfig> = spec
        .objectives
        .iter()
        .map(|o| {
            let c = TrainConfig {
                objective: o.clone(),
                log_steps: false,
                ..spec.train.clone()
            };
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;

    let perturb = |ratio: f64| match axis {
        StudyAxis::Noise => Perturb {
            noise_ratio: ratio,
            train_ratio: 1.0,
            noise_mode: spec.noise_mode,
        },
        StudyAxis::TrainRatio => Perturb {
            noise_ratio: 0.0,
            train_ratio: ratio,
            noise_mode: spec.noise_mode,
        },
    };
    let data: Vec<Vec<(u64, Dataset)>> = spec
        .ratios
        .iter()
        .map(|&r| perturbed(&ds, Some(&perturb(r)), &spec.train.seeds))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|o| (0..spec.ratios.len()).map(move |r| (o, r)))
        .collect();
    let cells: Vec<StudyCell> = jobs
        .par_iter()
        .map(|&(o, r)| {
            let cfg = &configs[o];
            let seeded = borrowed(&data[r]);
            match &spec.tune {
                Some(grid) => {
                    let rep = trainer::sweep(&seeded, cfg, grid)?;
                    let best = rep.best_row().clone();
                    Ok(StudyCell {
                        objective: labels[o].clone(),
                        ratio: spec.ratios[r],
                        chosen: best.objective,
                        val: best.val,
                        test: best.test,
                        test_per_seed: best.test_per_seed,
                        sweep: Some(rep),
                    })
                }
                None => {
                    let outcomes = trainer::train_seeds(&seeded, cfg)?;
                    let val: Vec<f64> = outcomes.iter().map(|o| o.report.val_metric()).collect();
                    let test: Vec<f64> =
                        outcomes.iter().filter_map(|o| o.report.test_metric()).collect();
                    Ok(StudyCell {
                        objective: labels[o].clone(),
                        ratio: spec.ratios[r],
                        chosen: cfg.objective.clone(),
                        val: MeanStd::of(&val),
                        test: MeanStd::of(&test),
                        test_per_seed: test,
                        sweep: None,
                    })
                }
            }
        })
        .collect::<Result<_>>()?;

    let report = StudyReport {
        axis: match axis {
            StudyAxis::Noise => "noise_ratio".into(),
            StudyAxis::TrainRatio => "train_ratio".into(),
        },
        selection: spec.train.headline(),
        seeds: spec.train.seeds.clone(),
        objectives: labels,
        ratios: spec.ratios.clone(),
        cells,
    };
    let mut header = vec!["objective".to_string()];
    header.extend(report.ratios.iter().map(|r| format!("{}={r}", report.axis)));
    let rows: Vec<Vec<String>> = report
        .objectives
        .iter()
        .map(|o| {
            let mut row = vec![o.clone()];
            row.extend(report.ratios.iter().map(|&r| {
                report
                    .cell(o, r)
                    .map_or(String::new(), |c| c.test.to_string())
            }));
            row
        })
        .collect();
    let csv = csv_string(&header, &rows)?;
    Ok(RunOutput {
        report: match axis {
            StudyAxis::Noise => Report::NoiseStudy(report),
            StudyAxis::TrainRatio => Report::RatioStudy(report),
        },
        csv,
        checkpoints: Vec::new(),
        files: Vec::new(),
        timing: BTreeMap::new(),
    })
}

fn ood_job(
    source: &DataSource,
    target: &DataSource,
    mapping: Option<&FileRef>,
    cfg: &TrainConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    let src = source.load()?;
    let tgt = target.load()?;
    let (Targets::Classes(_), Targets::Classes(_)) = (&src.targets, &tgt.targets) else {
        return Err(Error::Unsupported("ood runs need classification datasets".into()));
    };
    if src.dim() != tgt.dim() {
        return Err(Error::Data(format!(
            "source has {} features, target has {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let mapping = match mapping {
        Some(f) => LabelMapping::parse_csv(
            &String::from_utf8(f.read()?).map_err(|e| Error::Data(e.to_string()))?,
        )?,
        None => LabelMapping::identity(&tgt.label_names),
    };
    let src_index: BTreeMap<&str, usize> = src
        .label_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let (xt, yt) = tgt.part(Split::Test);
    let gold = yt.classes().expect("classification target");
    let (keep, mapped, excluded) = remap_by_name(gold, &tgt.label_names, |name| {
        mapping
            .target_to_source
            .get(name)
            .and_then(|s| src_index.get(s.as_str()).copied())
    });
    if keep.is_empty() {
        return Err(Error::Data(format!(
            "no target test row maps onto a source label (excluded: {excluded:?})"
        )));
    }
    let x_eval = xt.select_rows(&keep);
    let y_eval = Targets::Classes(mapped);

    let data: Vec<(u64, &Dataset)> = cfg.seeds.iter().map(|&s| (s, &src)).collect();
    let outcomes = trainer::train_seeds(&data, cfg)?;
    let runs: Vec<OodRun> = outcomes
        .iter()
        .map(|o| {
            let pred = o.model.predict(&x_eval, cfg.objective.task())?;
            Ok(OodRun {
                seed: o.report.seed,
                best_epoch: o.report.best_epoch,
                source_val: o.report.val.clone(),
                target_test: evaluate_predictions(&pred, &y_eval, src.num_classes())?,
            })
        })
        .collect::<Result<_>>()?;
    let report = OodReport {
        source_labels: src.label_names.clone(),
        target_labels: tgt.label_names.clone(),
        target_test_rows: gold.len(),
        evaluated_rows: keep.len(),
        excluded_rows: gold.len() - keep.len(),
        excluded,
        target: summarize(runs.iter().map(|r| &r.target_test)),
        runs,
    };
    let headline = cfg.headline();
    let rows: Vec<Vec<String>> = report
        .runs
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                report.evaluated_rows.to_string(),
                report.excluded_rows.to_string(),
                r.source_val.headline(headline).to_string(),
                r.target_test.headline(headline).to_string(),
            ]
        })
        .collect();
    let csv = csv_string(
        &[
            "seed".into(),
            "evaluated_rows".into(),
            "excluded_rows".into(),
            format!("source_val_{headline}"),
            format!("target_test_{headline}"),
        ],
        &rows,
    )?;
    let checkpoints = outcomes
        .iter()
        .map(|o| {
            (
                format!("seed-{}.json", o.report.seed),
                Checkpoint::new(cfg.objective.clone(), Some(src.label_names.clone()), o.model.clone()),
            )
        })
        .collect();
    Ok(RunOutput {
        report: Report::Ood(report),
        csv,
        checkpoints,
        files: Vec::new(),
        timing: timing_of(&outcomes, ""),
    })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Silhouette and ARI of k-means (k = number of classes) on `reps`, as medians over `seeds`.
pub fn cluster_quality(
    reps: &crate::diffcore::Tensor,
    gold: &[usize],
    k: usize,
    seeds: &[u64],
    iters: usize,
) -> Result<(f64, f64)> {
    let mut sc = Vec::new();
    let mut ari = Vec::new();
    for &s in seeds {
        let km = metrics::kmeans(reps, k, s, iters)?;
        let distinct = {
            let mut a = km.assignments.clone();
            a.sort_unstable();
            a.dedup();
            a.len()
        };
        // every point in one place: no cluster structure to score
        sc.push(if distinct < 2 {
            0.0
        } else {
            metrics::silhouette(reps, &km.assignments)?
        });
        ari.push(metrics::adjusted_rand_index(&km.assignments, gold)?);
    }
    Ok((median(&sc), median(&ari)))
}

fn repr_job(
    source: &DataSource,
    base: &TrainConfig,
    objectives: &[ObjectiveConfig],
    kmeans_seeds: &[u64],
    kmeans_iters: usize,
) -> Result<RunOutput> {
    if objectives.is_empty() || kmeans_seeds.is_empty() {
        return Err(Error::Config("repr-quality needs objectives and k-means seeds".into()));
    }
    let ds = source.load()?;
    let Targets::Classes(_) = ds.targets else {
        return Err(Error::Unsupported(
            "representation quality needs class labels".into(),
        ));
    };
    let (xt, yt) = ds.part(Split::Test);
    let gold = yt.classes().expect("classes").to_vec();
    let k = ds.num_classes();
    if gold.len() < k {
        return Err(Error::Data(format!(
            "{} test rows cannot form {k} clusters",
            gold.len()
        )));
    }
    let mut rows = Vec::new();
    let mut timing = BTreeMap::new();
    for o in objectives {
        let cfg = TrainConfig {
            objective: o.clone(),
            log_steps: false,
            ..base.clone()
        };
        cfg.validate()?;
        let label = objective_label(o, objectives);
        let data: Vec<(u64, &Dataset)> = cfg.seeds.iter().map(|&s| (s, &ds)).collect();
        let outcomes = trainer::train_seeds(&data, &cfg)?;
        timing.extend(timing_of(&outcomes, &format!("{label}/")));
        let runs: Vec<ReprSeed> = outcomes
            .par_iter()
            .map(|out| {
                let reps = out.model.representation(&xt)?;
                let (sc, ari) = cluster_quality(&reps, &gold, k, kmeans_seeds, kmeans_iters)?;
                Ok(ReprSeed {
                    seed: out.report.seed,
                    silhouette: sc,
                    ari,
                    test_metric: out.report.test_metric().unwrap_or(0.0),
                })
            })
            .collect::<Result<_>>()?;
        let col = |f: fn(&ReprSeed) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        rows.push(ReprRow {
            objective: label,
            config: o.clone(),
            silhouette: col(|r| r.silhouette),
            ari: col(|r| r.ari),
            test_metric: col(|r| r.test_metric),
            runs,
        });
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.objective.clone(),
                r.silhouette.mean.to_string(),
                r.silhouette.std.to_string(),
                r.ari.mean.to_string(),
                r.ari.std.to_string(),
                r.test_metric.mean.to_string(),
            ]
        })
        .collect();
    let csv = csv_string(
        &strs(&["objective", "sc_mean", "sc_std", "ari_mean", "ari_std", "test_metric_mean"]),
        &table,
    )?;
    Ok(RunOutput {
        report: Report::ReprQuality(ReprReport {
            k,
            kmeans_seeds: kmeans_seeds.to_vec(),
            rows,
        }),
        csv,
        checkpoints: Vec::new(),
        files: Vec::new(),
        timing,
    })
}

// ---- run directories -----------------------------------------------------------

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a run directory under `root`, replacing any previous run with the same id.
/// Files are assembled in a temporary sibling directory and moved into place.
pub fn write_run(root: &Path, manifest: &Manifest, out: &RunOutput) -> Result<PathBuf> {
    let id = manifest.run_id();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let tmp = root.join(format!(".{id}.tmp-{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    write(&tmp.join("manifest.json"), manifest.to_json()?.as_bytes())?;
    let artifacts = out.artifacts()?;
    let mut hashes = BTreeMap::new();
    for (name, bytes) in &artifacts {
        write(&tmp.join(name), bytes)?;
        hashes.insert(name.clone(), sha256_bytes(bytes));
    }
    write(
        &tmp.join("artifacts.json"),
        serde_json::to_string_pretty(&hashes)?.as_bytes(),
    )?;
    write(
        &tmp.join("timing.json"),
        serde_json::to_string_pretty(&out.timing)?.as_bytes(),
    )?;
    let dest = root.join(&id);
    if dest.exists() {
        std::fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
    }
    std::fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
    Ok(dest)
}

/// Executes a manifest and writes its run directory.
pub fn run(root: &Path, manifest: &Manifest) -> Result<(PathBuf, RunOutput)> {
    let out = execute(&manifest.job)?;
    let dir = write_run(root, manifest, &out)?;
    Ok((dir, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub run_id: String,
    pub checked: Vec<String>,
    /// Artifacts whose regenerated bytes differ from (or are missing in) the run directory.
    pub mismatched: Vec<String>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-executes `run_dir/manifest.json` and compares every deterministic artifact.
pub fn verify(run_dir: &Path) -> Result<Verification> {
    let manifest = Manifest::load(&run_dir.join("manifest.json"))?;
    let out = execute(&manifest.job)?;
    let mut checked = Vec::new();
    let mut mismatched = Vec::new();
    for (name, bytes) in out.artifacts()? {
        let stored = std::fs::read(run_dir.join(&name)).ok();
        if stored.as_deref() != Some(bytes.as_slice()) {
            mismatched.push(name.clone());
        }
        checked.push(name);
    }
    Ok(Verification {
        run_id: manifest.run_id(),
        checked,
        mismatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use crate::objectives::ObjectiveKind;

    fn small_train(objective: ObjectiveConfig) -> TrainConfig {
        TrainConfig {
            epochs: 4,
            patience: 4,
            batch_size: 32,
            seeds: vec![1, 2],
            arch: ArchConfig {
                hidden_dim: 8,
                latent_dim: 4,
                ..ArchConfig::default()
            },
            ..TrainConfig::new(objective)
        }
    }

    fn mixture(classes: usize, seed: u64) -> DataSource {
        DataSource::Mixture {
            classes,
            dim: 6,
            per_class: 30,
            sep: 3.0,
            seed,
        }
    }

    #[test]
    fn manifest_roundtrip_and_id() {
        let m = Manifest::new(Job::Train {
            data: mixture(3, 1),
            train: small_train(ObjectiveConfig::spc(0.1, 0.1)),
            perturb: Some(Perturb {
                noise_ratio: 0.2,
                train_ratio: 1.0,
                noise_mode: NoiseMode::ExcludeSelf,
            }),
        });
        let back = Manifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.run_id(), m.run_id());
        assert_eq!(m.run_id().len(), 12);
        let other = Manifest::new(Job::Train {
            data: mixture(3, 2),
            train: small_train(ObjectiveConfig::spc(0.1, 0.1)),
            perturb: None,
        });
        assert_ne!(other.run_id(), m.run_id());
    }

    #[test]
    fn changed_input_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, data::gen_mixture(2, 2, 10, 1.0, 0).unwrap().to_jsonl().unwrap()).unwrap();
        let src = DataSource::file(&p, None, LoadOptions::default()).unwrap();
        assert!(src.load().is_ok());
        std::fs::write(&p, "{\"features\":[0,0],\"label\":0}\n").unwrap();
        assert!(src.load().unwrap_err().to_string().contains("changed"));
    }

    #[test]
    fn train_run_writes_layout_and_verifies() {
        let root = tempfile::tempdir().unwrap();
        let m = Manifest::new(Job::Train {
            data: mixture(3, 1),
            train: small_train(ObjectiveConfig::spc(0.1, 0.1)),
            perturb: None,
        });
        let (dir, out) = run(root.path(), &m).unwrap();
        assert_eq!(dir, root.path().join(m.run_id()));
        for f in ["manifest.json", "report.json", "report.csv", "artifacts.json", "timing.json", "ckpt/seed-1.json", "ckpt/seed-2.json"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        let Report::Train(rep) = &out.report else { panic!() };
        assert!(rep.result.test.contains_key("macro_f1"));
        let v = verify(&dir).unwrap();
        assert!(v.ok(), "{v:?}");

        std::fs::write(dir.join("report.csv"), "tampered").unwrap();
        assert_eq!(verify(&dir).unwrap().mismatched, vec!["report.csv".to_string()]);
    }

    #[test]
    fn eval_matches_training_report() {
        let root = tempfile::tempdir().unwrap();
        let data = mixture(3, 4);
        let train = small_train(ObjectiveConfig::ce());
        let (dir, out) = run(
            root.path(),
            &Manifest::new(Job::Train {
                data: data.clone(),
                train,
                perturb: None,
            }),
        )
        .unwrap();
        let Report::Train(rep) = &out.report else { panic!() };
        let ck = FileRef::new(dir.join("ckpt/seed-1.json")).unwrap();
        let ev = execute(&Job::Eval {
            data,
            checkpoint: ck,
            split: Split::Test,
        })
        .unwrap();
        let Report::Eval(ev) = ev.report else { panic!() };
        assert_eq!(Some(&ev.metrics), rep.result.runs[0].test.as_ref());
        assert!(ev.excluded.is_empty());
    }

    #[test]
    fn noise_study_layout() {
        let spec = StudySpec {
            data: mixture(3, 2),
            train: small_train(ObjectiveConfig::ce()),
            objectives: vec![ObjectiveConfig::ce(), ObjectiveConfig::spc(0.1, 0.1)],
            ratios: vec![0.1, 0.2, 0.3],
            noise_mode: NoiseMode::ExcludeSelf,
            tune: None,
        };
        let out = execute(&Job::NoiseStudy(spec)).unwrap();
        let Report::NoiseStudy(rep) = &out.report else { panic!() };
        assert_eq!(rep.cells.len(), 6);
        let lines: Vec<&str> = out.csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "objective,noise_ratio=0.1,noise_ratio=0.2,noise_ratio=0.3");
        assert!(lines[1].starts_with("ce,") && lines[1].contains('±'));
    }

    #[test]
    fn ood_identity_equals_plain_training() {
        let data = mixture(3, 5);
        let train = small_train(ObjectiveConfig::ce());
        let plain = execute(&Job::Train {
            data: data.clone(),
            train: train.clone(),
            perturb: None,
        })
        .unwrap();
        let ood = execute(&Job::Ood {
            source: data.clone(),
            target: data,
            mapping: None,
            train,
        })
        .unwrap();
        let (Report::Train(p), Report::Ood(o)) = (&plain.report, &ood.report) else { panic!() };
        assert_eq!(o.excluded_rows, 0);
        for (a, b) in p.result.runs.iter().zip(&o.runs) {
            assert_eq!(a.test.as_ref(), Some(&b.target_test));
        }
    }

    #[test]
    fn coarse_to_fine_mapping_restricts_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let map = dir.path().join("map.csv");
        // fine classes 0,1 → coarse 0; fine 2 → coarse 1; fine 3 unmapped
        std::fs::write(&map, "source_label,target_label\n0,0\n0,1\n1,2\n").unwrap();
        let out = execute(&Job::Ood {
            source: mixture(2, 1),
            target: mixture(4, 2),
            mapping: Some(FileRef::new(&map).unwrap()),
            train: small_train(ObjectiveConfig::ce()),
        })
        .unwrap();
        let Report::Ood(o) = out.report else { panic!() };
        let target = mixture(4, 2).load().unwrap();
        let per_class = target.class_counts(Split::Test);
        assert_eq!(o.evaluated_rows, per_class[0] + per_class[1] + per_class[2]);
        assert_eq!(o.excluded.get("3"), Some(&per_class[3]));
        assert_eq!(o.runs[0].target_test.n, o.evaluated_rows);
    }

    #[test]
    fn repr_quality_rows() {
        let out = execute(&Job::ReprQuality {
            data: mixture(3, 3),
            train: small_train(ObjectiveConfig::ce()),
            objectives: vec![ObjectiveConfig::ce(), ObjectiveConfig::vib(0.01)],
            kmeans_seeds: vec![0, 1, 2],
            kmeans_iters: 50,
        })
        .unwrap();
        let Report::ReprQuality(r) = out.report else { panic!() };
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert!((-1.0..=1.0).contains(&row.silhouette.mean));
            assert!((-1.0..=1.0).contains(&row.ari.mean));
        }
    }

    #[test]
    fn gen_data_writes_loadable_file() {
        let root = tempfile::tempdir().unwrap();
        let (dir, _) = run(
            root.path(),
            &Manifest::new(Job::GenData {
                data: mixture(4, 1),
                format: Format::Csv,
            }),
        )
        .unwrap();
        let ds = data::load(&dir.join("data.csv"), Format::Csv, &LoadOptions::default()).unwrap();
        let orig = mixture(4, 1).load().unwrap();
        assert_eq!(
            (&ds.features, &ds.targets, &ds.splits, &ds.label_names),
            (&orig.features, &orig.targets, &orig.splits, &orig.label_names)
        );
        assert!(verify(&dir).unwrap().ok());
    }

    #[test]
    fn labels_and_median() {
        let objs = [ObjectiveConfig::spc(0.1, 1.0), ObjectiveConfig::spc(1.0, 0.1), ObjectiveConfig::ce()];
        assert_eq!(objective_label(&objs[2], &objs), "ce");
        assert_eq!(objective_label(&objs[0], &objs), "spc(beta=0.1,gamma=1)");
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(ObjectiveKind::CeCp.to_string(), "ce_cp");
    }
}
