//! Datasets, file formats, featurization, synthetic generators and the
//! train-split perturbations (label noise, subsampling).
//!
//! # File formats
//!
//! **jsonl**: one object per line with
//! - `"features": [f64, ...]` or `"text": "..."` (hashed by [`hash_featurize`]),
//! - `"label"`: string or number (a number for regression),
//! - `"split"` (optional): `"train"`, `"val"` or `"test"`.
//!
//! **csv**: a header row with feature columns `f0..f{D-1}` (or a single `text`
//! column), a `label` column and an optional `split` column.
//!
//! When no row carries a split, rows get a stratified 60/20/20 split drawn
//! from `LoadOptions::split_seed`. Class labels are remapped to dense ids in
//! sorted order (numeric order when every label is an integer). Rows in
//! val/test whose label never occurs in train are dropped and counted in
//! [`Dataset::dropped_unknown`], unless `LoadOptions::all_labels` is set, in
//! which case the label space covers every split (used for out-of-domain
//! evaluation sets).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::encoder::TaskKind;
use crate::error::{Error, Result};
use crate::objectives::TargetsRef;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Classes(Vec<usize>),
    Scores(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Scores(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Scores(s) => Targets::Scores(idx.iter().map(|&i| s[i]).collect()),
        }
    }

    pub fn as_ref(&self) -> TargetsRef<'_> {
        match self {
            Targets::Classes(c) => TargetsRef::Classes(c),
            Targets::Scores(s) => TargetsRef::Scores(s),
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes(c) => Some(c),
            Targets::Scores(_) => None,
        }
    }

    pub fn scores(&self) -> Option<&[f64]> {
        match self {
            Targets::Scores(s) => Some(s),
            Targets::Classes(_) => None,
        }
    }
}

/// Feature matrix, targets and split tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor,
    pub targets: Targets,
    pub splits: Vec<Split>,
    /// Original label names indexed by dense class id; empty for regression.
    pub label_names: Vec<String>,
    pub provenance: String,
    /// Train rows selected by label-noise injection.
    #[serde(default)]
    pub flip_mask: Option<Vec<bool>>,
    /// Val/test rows dropped at load time because their label is absent from train.
    #[serde(default)]
    pub dropped_unknown: usize,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        targets: Targets,
        splits: Vec<Split>,
        label_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            features,
            targets,
            splits,
            label_names,
            provenance: provenance.into(),
            flip_mask: None,
            dropped_unknown: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, _) = self.features.dims2()?;
        if n == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if self.targets.len() != n || self.splits.len() != n {
            return Err(Error::Data(format!(
                "{n} feature rows but {} targets and {} split tags",
                self.targets.len(),
                self.splits.len()
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        match &self.targets {
            Targets::Classes(c) => {
                let classes = self.label_names.len();
                if classes < 2 {
                    return Err(Error::Data(format!(
                        "classification needs at least 2 classes, found {classes}"
                    )));
                }
                if let Some(&bad) = c.iter().find(|&&y| y >= classes) {
                    return Err(Error::LabelOutOfRange {
                        label: bad,
                        classes,
                    });
                }
            }
            Targets::Scores(s) => {
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data("non-finite regression target".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn task(&self) -> TaskKind {
        match self.targets {
            Targets::Classes(_) => TaskKind::Classification,
            Targets::Scores(_) => TaskKind::Regression,
        }
    }

    /// Class count, or 1 for regression (the label-space width).
    pub fn out_dim(&self) -> usize {
        match self.targets {
            Targets::Classes(_) => self.label_names.len(),
            Targets::Scores(_) => 1,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Features and targets of one split.
    pub fn part(&self, split: Split) -> (Tensor, Targets) {
        let idx = self.indices(split);
        (self.features.select_rows(&idx), self.targets.select(&idx))
    }

    /// SHA-256 over the feature bits and targets of one split, in row order.
    pub fn split_hash(&self, split: Split) -> String {
        let mut h = Sha256::new();
        for i in self.indices(split) {
            for v in self.features.row(i) {
                h.update(v.to_bits().to_le_bytes());
            }
            match &self.targets {
                Targets::Classes(c) => h.update((c[i] as u64).to_le_bytes()),
                Targets::Scores(s) => h.update(s[i].to_bits().to_le_bytes()),
            }
        }
        hex::encode(h.finalize())
    }

    /// Keeps the given rows (in the given order).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            targets: self.targets.select(idx),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            label_names: self.label_names.clone(),
            provenance: self.provenance.clone(),
            flip_mask: self
                .flip_mask
                .as_ref()
                .map(|m| idx.iter().map(|&i| m[i]).collect()),
            dropped_unknown: self.dropped_unknown,
        }
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        if let Targets::Classes(c) = &self.targets {
            for i in self.indices(split) {
                counts[c[i]] += 1;
            }
        }
        counts
    }

    pub fn save(&self, path: &Path, format: Format) -> Result<()> {
        let text = match format {
            Format::Jsonl => self.to_jsonl()?,
            Format::Csv => self.to_csv()?,
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn label_json(&self, i: usize) -> serde_json::Value {
        match &self.targets {
            Targets::Classes(c) => serde_json::Value::String(self.label_names[c[i]].clone()),
            Targets::Scores(s) => serde_json::json!(s[i]),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for i in 0..self.len() {
            let row = serde_json::json!({
                "features": self.features.row(i),
                "label": self.label_json(i),
                "split": self.splits[i].as_str(),
            });
            out.push_str(&serde_json::to_string(&row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        header.push("split".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(match &self.targets {
                Targets::Classes(c) => self.label_names[c[i]].clone(),
                Targets::Scores(s) => s[i].to_string(),
            });
            rec.push(self.splits[i].as_str().to_string());
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv writer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Ok(Format::Jsonl),
            Some("csv") => Ok(Format::Csv),
            _ => Err(Error::Data(format!(
                "cannot infer format of {}; use .jsonl or .csv",
                path.display()
            ))),
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown data format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub task: TaskKind,
    /// Width of hashed text features.
    pub hash_dim: usize,
    pub hash_seed: u64,
    /// Seed of the 60/20/20 split used when the file has no split column.
    pub split_seed: u64,
    /// Build the label space from all splits instead of train only.
    pub all_labels: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            task: TaskKind::Classification,
            hash_dim: 1024,
            hash_seed: 0,
            split_seed: 0,
            all_labels: false,
        }
    }
}

enum RawInput {
    Features(Vec<f64>),
    Text(String),
}

struct RawRow {
    input: RawInput,
    label: String,
    split: Option<Split>,
}

fn parse_jsonl(text: &str) -> Result<Vec<RawRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::Data(format!("line {}: {msg}", lineno + 1));
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| at(format!("invalid json: {e}")))?;
        let input = if let Some(f) = v.get("features") {
            let arr = f
                .as_array()
                .ok_or_else(|| at("`features` must be an array".into()))?;
            let vals = arr
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| at(format!("non-numeric feature {x}"))))
                .collect::<Result<Vec<_>>>()?;
            RawInput::Features(vals)
        } else if let Some(t) = v.get("text") {
            RawInput::Text(
                t.as_str()
                    .ok_or_else(|| at("`text` must be a string".into()))?
                    .to_string(),
            )
        } else {
            return Err(at("missing field `features` or `text`".into()));
        };
        let label = match v.get("label") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(other) => return Err(at(format!("unsupported label {other}"))),
            None => return Err(at("missing field `label`".into())),
        };
        let split = match v.get("split") {
            Some(serde_json::Value::String(s)) => Some(s.parse().map_err(|e: Error| at(e.to_string()))?),
            Some(serde_json::Value::Null) | None => None,
            Some(other) => return Err(at(format!("unsupported split {other}"))),
        };
        rows.push(RawRow {
            input,
            label,
            split,
        });
    }
    Ok(rows)
}

fn parse_csv(text: &str) -> Result<Vec<RawRow>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let label_col = col("label").ok_or_else(|| Error::Data("csv has no `label` column".into()))?;
    let split_col = col("split");
    let text_col = col("text");
    let mut feature_cols = Vec::new();
    while let Some(c) = col(&format!("f{}", feature_cols.len())) {
        feature_cols.push(c);
    }
    if feature_cols.is_empty() && text_col.is_none() {
        return Err(Error::Data(
            "csv needs feature columns f0..f{D-1} or a `text` column".into(),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let at = |msg: String| Error::Data(format!("csv row {}: {msg}", i + 1));
        let input = if !feature_cols.is_empty() {
            let vals = feature_cols
                .iter()
                .map(|&c| {
                    let s = rec.get(c).unwrap_or("").trim();
                    s.parse::<f64>()
                        .map_err(|_| at(format!("non-numeric feature `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            RawInput::Features(vals)
        } else {
            RawInput::Text(rec.get(text_col.unwrap_or(0)).unwrap_or("").to_string())
        };
        let label = rec
            .get(label_col)
            .ok_or_else(|| at("missing label".into()))?
            .trim()
            .to_string();
        let split = match split_col.and_then(|c| rec.get(c)).map(str::trim) {
            Some("") | None => None,
            Some(s) => Some(s.parse().map_err(|e: Error| at(e.to_string()))?),
        };
        rows.push(RawRow {
            input,
            label,
            split,
        });
    }
    Ok(rows)
}

/// Sorts label names numerically when all are integers, lexicographically otherwise.
fn sort_labels(labels: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = labels.into_iter().collect();
    if v.iter().all(|s| s.parse::<i64>().is_ok()) {
        v.sort_by_key(|s| s.parse::<i64>().unwrap_or_default());
    }
    v
}

/// Reads and validates a dataset file.
pub fn load(path: &Path, format: Format, opts: &LoadOptions) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = match format {
        Format::Jsonl => parse_jsonl(&text)?,
        Format::Csv => parse_csv(&text)?,
    };
    from_raw(rows, opts, path.display().to_string())
}

fn from_raw(rows: Vec<RawRow>, opts: &LoadOptions, source: String) -> Result<Dataset> {
    if rows.is_empty() {
        return Err(Error::Data(format!("{source}: dataset is empty")));
    }
    let dim = match &rows[0].input {
        RawInput::Features(f) => f.len(),
        RawInput::Text(_) => opts.hash_dim,
    };
    let mut values = Vec::with_capacity(rows.len() * dim);
    for (i, r) in rows.iter().enumerate() {
        match &r.input {
            RawInput::Features(f) if f.len() == dim => values.extend_from_slice(f),
            RawInput::Features(f) => {
                return Err(Error::Data(format!(
                    "row {i} has {} features, expected {dim}",
                    f.len()
                )))
            }
            RawInput::Text(t) => values.extend(hash_featurize_one(t, dim, opts.hash_seed)),
        }
    }
    let features = Tensor::matrix(rows.len(), dim, values)?;

    let with_split = rows.iter().filter(|r| r.split.is_some()).count();
    if with_split != 0 && with_split != rows.len() {
        return Err(Error::Data(format!(
            "{with_split} of {} rows carry a split; either all or none must",
            rows.len()
        )));
    }

    let labels: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    let provided: Option<Vec<Split>> = rows.iter().map(|r| r.split).collect();

    match opts.task {
        TaskKind::Regression => {
            let scores = labels
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Data(format!("non-numeric regression label `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let splits = match provided {
                Some(s) => s,
                None => random_splits(rows.len(), opts.split_seed),
            };
            Dataset::new(features, Targets::Scores(scores), splits, Vec::new(), source)
        }
        TaskKind::Classification => {
            let splits = match provided {
                Some(s) => s,
                None => {
                    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                    for (i, l) in labels.iter().enumerate() {
                        by_label.entry(l).or_default().push(i);
                    }
                    let groups: Vec<Vec<usize>> = by_label.into_values().collect();
                    stratified_splits(rows.len(), &groups, opts.split_seed)
                }
            };
            let train_labels: BTreeSet<String> = labels
                .iter()
                .zip(&splits)
                .filter(|(_, &s)| opts.all_labels || s == Split::Train)
                .map(|(l, _)| l.clone())
                .collect();
            let names = sort_labels(train_labels);
            let index: HashMap<&str, usize> =
                names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
            let keep: Vec<usize> = (0..labels.len())
                .filter(|&i| index.contains_key(labels[i].as_str()))
                .collect();
            let dropped = labels.len() - keep.len();
            let classes = keep.iter().map(|&i| index[labels[i].as_str()]).collect();
            let splits: Vec<Split> = keep.iter().map(|&i| splits[i]).collect();
            let features = features.select_rows(&keep);
            let mut ds = Dataset::new(features, Targets::Classes(classes), splits, names, source)?;
            ds.dropped_unknown = dropped;
            Ok(ds)
        }
    }
}

/// 60/20/20 counts for a group of size `n`.
fn split_counts(n: usize) -> (usize, usize) {
    let train = (0.6 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    (train, val)
}

fn stratified_splits(n: usize, groups: &[Vec<usize>], seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Test; n];
    for g in groups {
        let mut g = g.clone();
        g.shuffle(&mut rng);
        let (tr, va) = split_counts(g.len());
        for (k, &i) in g.iter().enumerate() {
            splits[i] = if k < tr {
                Split::Train
            } else if k < tr + va {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    splits
}

fn random_splits(n: usize, seed: u64) -> Vec<Split> {
    stratified_splits(n, &[(0..n).collect()], seed)
}

// ---- hashing featurizer ----------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercased maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn hash_featurize_one(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let tokens = tokenize(text);
    let bigrams = tokens.windows(2).map(|w| format!("{} {}", w[0], w[1]));
    let mut row = vec![0.0; dim];
    for gram in tokens.iter().cloned().chain(bigrams) {
        let h = fnv1a(seed, gram.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        row[(h % dim as u64) as usize] += sign;
    }
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|v| *v /= norm);
    }
    row
}

/// Signed feature hashing of unigrams and bigrams, L2-normalized per row.
///
/// Each gram is hashed with 64-bit FNV-1a over the seed's 8 little-endian
/// bytes followed by the gram's UTF-8 bytes. The bucket is `h mod dim` and the
/// sign is `+1` when bit 63 of `h` is clear. Bigrams are two tokens joined by a
/// single space.
pub fn hash_featurize<S: AsRef<str>>(texts: &[S], dim: usize, seed: u64) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::Config("hash dimension must be positive".into()));
    }
    let values = texts
        .iter()
        .flat_map(|t| hash_featurize_one(t.as_ref(), dim, seed))
        .collect();
    Tensor::matrix(texts.len(), dim, values)
}

// ---- synthetic data ----------------------------------------------------------

/// Gaussian mixture with `classes` unit-covariance components.
///
/// With `classes <= dim` the means sit at `(sep/√2)·e_c`, so every pair of
/// class means is exactly `sep` apart. Otherwise the means are random
/// directions of norm `sep/√2`. Each class is split 60/20/20.
pub fn gen_mixture(
    classes: usize,
    dim: usize,
    per_class: usize,
    sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim == 0 || per_class == 0 || !(sep >= 0.0) {
        return Err(Error::Config(format!(
            "gen_mixture needs classes >= 2, dim >= 1, per_class >= 1, sep >= 0 \
             (got {classes}, {dim}, {per_class}, {sep})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = sep / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dim {
                (0..dim).map(|j| if j == c { radius } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * radius / n).collect()
            }
        })
        .collect();

    let (tr, va) = split_counts(per_class);
    let mut rows: Vec<(Vec<f64>, usize, Split)> = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for k in 0..per_class {
            let x = mean
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let split = if k < tr {
                Split::Train
            } else if k < tr + va {
                Split::Val
            } else {
                Split::Test
            };
            rows.push((x, c, split));
        }
    }
    rows.shuffle(&mut rng);
    let features = Tensor::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>())?;
    Dataset::new(
        features,
        Targets::Classes(rows.iter().map(|r| r.1).collect()),
        rows.iter().map(|r| r.2).collect(),
        (0..classes).map(|c| c.to_string()).collect(),
        format!("mixture(classes={classes},dim={dim},per_class={per_class},sep={sep},seed={seed})"),
    )
}

/// Regression data `y = 2·tanh(w·x) + noise·ε`, with `x ~ N(0, I)` and
/// `w ~ N(0, I/dim)`, randomly split 60/20/20.
pub fn gen_regression(dim: usize, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if dim == 0 || n == 0 || !(noise >= 0.0) {
        return Err(Error::Config("gen_regression needs dim, n > 0 and noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let w: Vec<f64> = (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut values = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let dot: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        y.push(2.0 * dot.tanh() + noise * rng.sample::<f64, _>(StandardNormal));
        values.extend(x);
    }
    Dataset::new(
        Tensor::matrix(n, dim, values)?,
        Targets::Scores(y),
        random_splits(n, seed.wrapping_add(1)),
        Vec::new(),
        format!("regression(dim={dim},n={n},noise={noise},seed={seed})"),
    )
}

// ---- perturbations -----------------------------------------------------------

/// How a noisy label is redrawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Uniform over the other `C - 1` classes.
    #[default]
    ExcludeSelf,
    /// Uniform over all `C` classes (the label may stay unchanged).
    IncludeSelf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(default)]
    pub noise_ratio: f64,
    #[serde(default = "one")]
    pub train_ratio: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl PerturbationSpec {
    pub fn clean(seed: u64) -> Self {
        PerturbationSpec {
            noise_ratio: 0.0,
            train_ratio: 1.0,
            noise_mode: NoiseMode::ExcludeSelf,
            seed,
        }
    }

    /// Subsamples the train split, then injects label noise into what remains.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let sub = subsample_train(ds, self.train_ratio, self.seed)?;
        if self.noise_ratio == 0.0 {
            return Ok(sub);
        }
        inject_label_noise(&sub, self.noise_ratio, self.noise_mode, self.seed)
    }
}

/// Relabels exactly `round(ratio · N_train)` train rows chosen without replacement.
pub fn inject_label_noise(ds: &Dataset, ratio: f64, mode: NoiseMode, seed: u64) -> Result<Dataset> {
    let Targets::Classes(labels) = &ds.targets else {
        return Err(Error::Unsupported(
            "label noise applies to classification datasets only".into(),
        ));
    };
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("noise ratio must lie in [0, 1], got {ratio}")));
    }
    let c = ds.num_classes();
    let train = ds.indices(Split::Train);
    let k = (ratio * train.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500_0000);
    let chosen = rand::seq::index::sample(&mut rng, train.len(), k);

    let mut labels = labels.clone();
    let mut mask = ds.flip_mask.clone().unwrap_or_else(|| vec![false; ds.len()]);
    for pos in chosen.iter() {
        let row = train[pos];
        let old = labels[row];
        labels[row] = match mode {
            NoiseMode::ExcludeSelf => {
                let r = rng.random_range(0..c - 1);
                if r >= old {
                    r + 1
                } else {
                    r
                }
            }
            NoiseMode::IncludeSelf => rng.random_range(0..c),
        };
        mask[row] = true;
    }
    let mut out = ds.clone();
    out.targets = Targets::Classes(labels);
    out.flip_mask = Some(mask);
    Ok(out)
}

/// Keeps `round(ratio · n_c)` train rows of every class `c` (stratified), or
/// `round(ratio · N_train)` rows for regression. Val/test rows are untouched.
pub fn subsample_train(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("train ratio must lie in (0, 1], got {ratio}")));
    }
    if ratio == 1.0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7375_6273_0000_0000);
    let train = ds.indices(Split::Train);
    let groups: Vec<Vec<usize>> = match &ds.targets {
        Targets::Classes(labels) => {
            let mut g = vec![Vec::new(); ds.num_classes()];
            for &i in &train {
                g[labels[i]].push(i);
            }
            g
        }
        Targets::Scores(_) => vec![train.clone()],
    };
    let mut keep = vec![true; ds.len()];
    for &i in &train {
        keep[i] = false;
    }
    for (c, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let k = (ratio * group.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::Data(format!(
                "train ratio {ratio} leaves no samples of class {} ({} available)",
                ds.label_names.get(c).map_or("?", String::as_str),
                group.len()
            )));
        }
        for pos in rand::seq::index::sample(&mut rng, group.len(), k).iter() {
            keep[group[pos]] = true;
        }
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep[i]).collect();
    Ok(ds.select(&idx))
}

// ---- out-of-domain label mapping -------------------------------------------

/// Target-domain label → source-domain label, read from a two-column csv
/// `source_label,target_label` (a header row with those names is optional).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub target_to_source: BTreeMap<String, String>,
}

impl LabelMapping {
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_reader(text.as_bytes());
        let mut map = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Data(format!(
                    "mapping row {} must have 2 columns",
                    i + 1
                )));
            }
            let (src, tgt) = (rec[0].trim().to_string(), rec[1].trim().to_string());
            if i == 0 && src == "source_label" && tgt == "target_label" {
                continue;
            }
            if let Some(prev) = map.insert(tgt.clone(), src.clone()) {
                if prev != src {
                    return Err(Error::Data(format!(
                        "target label `{tgt}` mapped to both `{prev}` and `{src}`"
                    )));
                }
            }
        }
        Ok(LabelMapping {
            target_to_source: map,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn identity(labels: &[String]) -> Self {
        LabelMapping {
            target_to_source: labels.iter().map(|l| (l.clone(), l.clone())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn csv_schema_contract() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "f0,f1,label,split\n1,2,a,train\n3,4,b,train\n5,6,a,val\n");
        let ds = load(&p, Format::Csv, &LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.label_names, vec!["a", "b"]);
        assert_eq!(ds.targets, Targets::Classes(vec![0, 1, 0]));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.jsonl", "");
        let err = load(&p, Format::Jsonl, &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
        let p = write(&dir, "e.csv", "f0,label\n");
        assert!(load(&p, Format::Csv, &LoadOptions::default()).is_err());
    }

    #[test]
    fn malformed_rows_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "m.jsonl", "{\"features\": [1, \"x\"], \"label\": 1}\n");
        assert!(matches!(
            load(&p, Format::Jsonl, &LoadOptions::default()),
            Err(Error::Data(_))
        ));
        let p = write(&dir, "n.jsonl", "{\"features\": [1, 2]}\n");
        assert!(load(&p, Format::Jsonl, &LoadOptions::default())
            .unwrap_err()
            .to_string()
            .contains("label"));
        let p = write(&dir, "o.csv", "f0,label\nabc,1\n");
        assert!(load(&p, Format::Csv, &LoadOptions::default()).is_err());
    }

    #[test]
    fn unknown_eval_labels_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"features\":[0],\"label\":\"x\",\"split\":\"train\"}\n\
                    {\"features\":[1],\"label\":\"y\",\"split\":\"train\"}\n\
                    {\"features\":[2],\"label\":\"z\",\"split\":\"test\"}\n\
                    {\"features\":[3],\"label\":\"y\",\"split\":\"test\"}\n";
        let p = write(&dir, "u.jsonl", body);
        let ds = load(&p, Format::Jsonl, &LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dropped_unknown, 1);
        let opts = LoadOptions {
            all_labels: true,
            ..LoadOptions::default()
        };
        let ds = load(&p, Format::Jsonl, &opts).unwrap();
        assert_eq!((ds.len(), ds.num_classes(), ds.dropped_unknown), (4, 3, 0));
    }

    #[test]
    fn text_rows_are_hashed() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"text\":\"good movie\",\"label\":1}\n{\"text\":\"bad movie\",\"label\":0}\n\
                    {\"text\":\"fine\",\"label\":1}\n{\"text\":\"awful\",\"label\":0}\n\
                    {\"text\":\"great\",\"label\":1}\n";
        let p = write(&dir, "t.jsonl", body);
        let opts = LoadOptions {
            hash_dim: 32,
            ..LoadOptions::default()
        };
        let ds = load(&p, Format::Jsonl, &opts).unwrap();
        assert_eq!(ds.dim(), 32);
        assert_eq!(ds.label_names, vec!["0", "1"]);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_mixture(3, 4, 10, 2.0, 7).unwrap();
        for fmt in [Format::Jsonl, Format::Csv] {
            let p = dir.path().join(format!("rt.{fmt:?}"));
            ds.save(&p, fmt).unwrap();
            let back = load(&p, fmt, &LoadOptions::default()).unwrap();
            assert_eq!(back.features, ds.features);
            assert_eq!(back.targets, ds.targets);
            assert_eq!(back.splits, ds.splits);
            assert_eq!(back.label_names, ds.label_names);
        }
        let reg = gen_regression(3, 20, 0.1, 1).unwrap();
        let p = dir.path().join("reg.jsonl");
        reg.save(&p, Format::Jsonl).unwrap();
        let opts = LoadOptions {
            task: TaskKind::Regression,
            ..LoadOptions::default()
        };
        let back = load(&p, Format::Jsonl, &opts).unwrap();
        assert_eq!(back.targets, reg.targets);
        assert_eq!(back.features, reg.features);
    }

    #[test]
    fn missing_split_column_gets_stratified_split() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("f0,label\n");
        for i in 0..20 {
            body.push_str(&format!("{i},{}\n", i % 2));
        }
        let p = write(&dir, "s.csv", &body);
        let ds = load(&p, Format::Csv, &LoadOptions::default()).unwrap();
        assert_eq!(ds.class_counts(Split::Train), vec![6, 6]);
        assert_eq!(ds.class_counts(Split::Val), vec![2, 2]);
        assert_eq!(ds.class_counts(Split::Test), vec![2, 2]);
    }

    #[test]
    fn hashing_examples() {
        let t = hash_featurize(&["Hello, world!", "Hello, world!", ""], 16, 3).unwrap();
        assert_eq!(t.row(0), t.row(1));
        assert!(t.row(2).iter().all(|&v| v == 0.0));
        assert!((t.row(0).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hashing_matches_independent_reimplementation() {
        // Values produced by tests/oracles/hash_featurize.py for D = 16, seed = 0.
        let a = 0.24253562503633297;
        let b = 0.48507125007266594;
        let expected = [
            -a, -a, 0.0, a, -b, 0.0, -a, 0.0, 0.0, -a, -a, -a, a, 0.0, -b, -a,
        ];
        let t = hash_featurize(&["The quick brown fox jumps over the lazy dog!"], 16, 0).unwrap();
        for (got, want) in t.row(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{:?}", t.row(0));
        }
    }

    #[test]
    fn mixture_is_stratified_and_separated() {
        let ds = gen_mixture(4, 8, 50, 3.0, 1).unwrap();
        assert_eq!(ds.class_counts(Split::Train), vec![30; 4]);
        assert_eq!(ds.class_counts(Split::Val), vec![10; 4]);
        assert_eq!(ds.class_counts(Split::Test), vec![10; 4]);
        let ds = gen_mixture(3, 5, 7, 3.0, 1).unwrap();
        // 0.6·7 = 4.2 → 4, 0.2·7 = 1.4 → 1, remainder 2
        assert_eq!(ds.class_counts(Split::Train), vec![4; 3]);
        assert_eq!(ds.class_counts(Split::Val), vec![1; 3]);
        assert_eq!(ds.class_counts(Split::Test), vec![2; 3]);
        assert_eq!(gen_mixture(4, 8, 50, 3.0, 1).unwrap(), gen_mixture(4, 8, 50, 3.0, 1).unwrap());
        assert!(gen_mixture(1, 8, 50, 3.0, 1).is_err());
        assert!(gen_mixture(6, 2, 5, 3.0, 1).is_ok());
    }

    #[test]
    fn noise_examples() {
        let ds = gen_mixture(2, 3, 50, 2.0, 4).unwrap();
        let same = inject_label_noise(&ds, 0.0, NoiseMode::ExcludeSelf, 1).unwrap();
        assert_eq!(same.targets, ds.targets);

        let all = inject_label_noise(&ds, 1.0, NoiseMode::ExcludeSelf, 1).unwrap();
        let (old, new) = (ds.targets.classes().unwrap(), all.targets.classes().unwrap());
        for i in 0..ds.len() {
            if ds.splits[i] == Split::Train {
                assert_ne!(old[i], new[i]);
            } else {
                assert_eq!(old[i], new[i]);
            }
        }
        for split in [Split::Val, Split::Test] {
            assert_eq!(all.split_hash(split), ds.split_hash(split));
        }
        let reg = gen_regression(2, 10, 0.0, 0).unwrap();
        assert!(matches!(
            inject_label_noise(&reg, 0.1, NoiseMode::ExcludeSelf, 0),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn noise_flips_exact_count() {
        // 100 train rows: 2 classes x 84 per class gives round(0.6·84) = 50 each.
        let ds = gen_mixture(2, 3, 84, 2.0, 4).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 100);
        let noisy = inject_label_noise(&ds, 0.2, NoiseMode::ExcludeSelf, 9).unwrap();
        let mask = noisy.flip_mask.as_ref().unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 20);
        let changed = (0..ds.len())
            .filter(|&i| ds.targets.classes().unwrap()[i] != noisy.targets.classes().unwrap()[i])
            .count();
        assert_eq!(changed, 20);
    }

    #[test]
    fn noise_targets_are_uniform_over_other_classes() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        // 4 classes, 25 train rows each; count redrawn labels of class-0 rows.
        let ds = gen_mixture(4, 4, 42, 1.0, 3).unwrap();
        let labels = ds.targets.classes().unwrap().to_vec();
        let mut counts = [0u64; 4];
        for trial in 0..10_000u64 {
            let noisy = inject_label_noise(&ds, 0.2, NoiseMode::ExcludeSelf, trial).unwrap();
            let mask = noisy.flip_mask.as_ref().unwrap();
            let new = noisy.targets.classes().unwrap();
            for i in 0..ds.len() {
                if mask[i] && labels[i] == 0 {
                    counts[new[i]] += 1;
                }
            }
        }
        assert_eq!(counts[0], 0);
        let total: u64 = counts[1..].iter().sum();
        let expected = total as f64 / 3.0;
        let stat: f64 = counts[1..]
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 = {stat}, p = {p}, counts = {counts:?}");
    }

    #[test]
    fn subsample_examples() {
        let ds = gen_mixture(3, 4, 100, 2.0, 2).unwrap();
        assert_eq!(subsample_train(&ds, 1.0, 0).unwrap(), ds);
        // 60 train rows per class → 30
        let half = subsample_train(&ds, 0.5, 0).unwrap();
        assert_eq!(half.class_counts(Split::Train), vec![30; 3]);
        for split in [Split::Val, Split::Test] {
            assert_eq!(half.split_hash(split), ds.split_hash(split));
        }
        let other = subsample_train(&ds, 0.5, 1).unwrap();
        assert_ne!(half.features, other.features);
        assert_eq!(subsample_train(&ds, 0.5, 0).unwrap(), half);
        assert!(subsample_train(&ds, 0.001, 0).is_err());
        assert!(subsample_train(&ds, 0.0, 0).is_err());
    }

    #[test]
    fn mapping_csv() {
        let m = LabelMapping::parse_csv("source_label,target_label\npos,joy\npos,love\nneg,anger\n")
            .unwrap();
        assert_eq!(m.target_to_source.len(), 3);
        assert_eq!(m.target_to_source["love"], "pos");
        assert!(LabelMapping::parse_csv("a,x\nb,x\n").is_err());
    }
}
