//! `spc` command-line driver.
//!
//! Every command builds a manifest, executes it and writes a run directory under
//! `--out`, `$SPC_OUT` or `out`. Exit codes: 0 success, 1 other failure, 2 bad
//! flags or configuration, 3 data error, 4 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use spc::data::{Format, LoadOptions, NoiseMode, Split};
use spc::encoder::TaskKind;
use spc::error::Error;
use spc::harness::{self, DataSource, FileRef, Job, Manifest, Perturb, StudySpec};
use spc::objectives::{ObjectiveConfig, ObjectiveKind};
use spc::trainer::{DecayMode, Headline, SweepGrid, TrainConfig, PAPER_GRID};

#[derive(Parser, Debug)]
#[command(name = "spc", version, about = "Structured probabilistic coding experiments")]
struct Cli {
    /// Output root (overrides $SPC_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train one objective over several seeds.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        perturb: PerturbArgs,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Grid search over (beta, gamma).
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        perturb: PerturbArgs,
    },
    /// Metric table over label-noise ratios.
    NoiseStudy(StudyArgs),
    /// Metric table over training-set ratios.
    RatioStudy(StudyArgs),
    /// Train on one dataset, evaluate on another.
    Ood(OodArgs),
    /// Clustering quality of the learned codes.
    ReprQuality(ReprArgs),
    /// Print a run's table, or re-execute it and compare artifacts.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        verify: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Classification,
    Regression,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => TaskKind::Classification,
            TaskArg::Regression => TaskKind::Regression,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseModeArg {
    ExcludeSelf,
    IncludeSelf,
}

impl From<NoiseModeArg> for NoiseMode {
    fn from(m: NoiseModeArg) -> Self {
        match m {
            NoiseModeArg::ExcludeSelf => NoiseMode::ExcludeSelf,
            NoiseModeArg::IncludeSelf => NoiseMode::IncludeSelf,
        }
    }
}

#[derive(Args, Debug)]
struct GeneratorArgs {
    /// Number of mixture components.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Distance between class means.
    #[arg(long, default_value_t = 3.0)]
    sep: f64,
    /// Generate a regression set instead of a mixture.
    #[arg(long)]
    regression: bool,
    /// Rows of the regression set.
    #[arg(long)]
    n: Option<usize>,
    /// Target noise of the regression set.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

impl GeneratorArgs {
    fn source(&self, seed: u64) -> anyhow::Result<Option<DataSource>> {
        if self.regression {
            let (Some(dim), Some(n)) = (self.dim, self.n) else {
                return Err(Error::Config("--regression needs --dim and --n".into()).into());
            };
            return Ok(Some(DataSource::Regression {
                dim,
                n,
                noise: self.noise,
                seed,
            }));
        }
        match (self.classes, self.dim, self.per_class) {
            (None, None, None) => Ok(None),
            (Some(classes), Some(dim), Some(per_class)) => Ok(Some(DataSource::Mixture {
                classes,
                dim,
                per_class,
                sep: self.sep,
                seed,
            })),
            _ => Err(Error::Config("a mixture needs --classes, --dim and --per-class".into()).into()),
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    gen: GeneratorArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "jsonl")]
    format: Format,
}

#[derive(Args, Debug)]
struct LoadArgs {
    /// File format; inferred from the extension when absent.
    #[arg(long)]
    format: Option<Format>,
    #[arg(long, value_enum, default_value = "classification")]
    task: TaskArg,
    /// Width of hashed text features.
    #[arg(long, default_value_t = 1024)]
    hash_dim: usize,
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
    /// Seed of the split used when the file has none.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl LoadArgs {
    fn options(&self, all_labels: bool) -> LoadOptions {
        LoadOptions {
            task: self.task.into(),
            hash_dim: self.hash_dim,
            hash_seed: self.hash_seed,
            split_seed: self.split_seed,
            all_labels,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset file (jsonl or csv).
    #[arg(long, conflicts_with_all = ["classes", "regression"])]
    data: Option<PathBuf>,
    #[command(flatten)]
    load: LoadArgs,
    #[command(flatten)]
    gen: GeneratorArgs,
    /// Seed of the generated dataset.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn source(&self) -> anyhow::Result<DataSource> {
        if let Some(path) = &self.data {
            return Ok(DataSource::file(path, self.load.format, self.load.options(false))?);
        }
        self.gen.source(self.data_seed)?.ok_or_else(|| {
            Error::Config("no data: pass --data or generator flags (--classes, --dim, --per-class)".into())
                .into()
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML file with training defaults; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    cp_weight: Option<f64>,
    /// Use the code mean instead of a sample.
    #[arg(long)]
    zero_noise: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// A count N (seeds 1..=N) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    layer_norm: bool,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Add weight decay to the gradient instead of shrinking parameters.
    #[arg(long)]
    coupled_decay: bool,
    /// Validation metric: macro_f1, macro_recall, accuracy, class_f1:<c>, spearman, pearson.
    #[arg(long)]
    selection: Option<Headline>,
    /// Leave per-step loss terms out of the report.
    #[arg(long)]
    no_step_log: bool,
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    let nums: Vec<u64> = parts
        .iter()
        .map(|p| p.parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad seeds `{s}`")))?;
    match nums.as_slice() {
        [] => Err(Error::Config("empty seed list".into()).into()),
        [n] => Ok((1..=*n).collect()),
        _ => Ok(nums),
    }
}

fn parse_list(s: &str, what: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} value `{p}`")).into())
        })
        .collect()
}

fn parse_objectives(s: &str) -> anyhow::Result<Vec<ObjectiveKind>> {
    s.split(',').map(|p| Ok(p.parse::<ObjectiveKind>()?)).collect()
}

impl TrainArgs {
    fn objective_for(&self, kind: ObjectiveKind) -> ObjectiveConfig {
        let mut o = ObjectiveConfig::new(kind);
        if kind.uses_beta() {
            o.beta = self.beta.unwrap_or(0.0);
        }
        if kind.uses_gamma() {
            o.gamma = self.gamma.unwrap_or(0.0);
        }
        if kind == ObjectiveKind::CeCp {
            o.cp_weight = self.cp_weight.unwrap_or(0.0);
        }
        o.zero_noise = self.zero_noise;
        o
    }

    fn config(&self) -> anyhow::Result<TrainConfig> {
        self.config_with(None)
    }

    /// Like `config`, with `objective` replacing the one from flags or file.
    fn config_with(&self, objective: Option<&ObjectiveConfig>) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<TrainConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(o) = objective {
            cfg.objective = o.clone();
        } else if let Some(kind) = self.objective {
            cfg.objective = self.objective_for(kind);
        } else {
            let o = &mut cfg.objective;
            if let Some(b) = self.beta {
                o.beta = b;
            }
            if let Some(g) = self.gamma {
                o.gamma = g;
            }
            if let Some(c) = self.cp_weight {
                o.cp_weight = c;
            }
            o.zero_noise |= self.zero_noise;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        } else if cfg.patience > cfg.epochs {
            cfg.patience = cfg.epochs;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(v) = self.hidden_dim {
            cfg.arch.hidden_dim = v;
        }
        if let Some(v) = self.latent_dim {
            cfg.arch.latent_dim = v;
        }
        if let Some(v) = self.dropout {
            cfg.arch.dropout = v;
        }
        cfg.arch.layer_norm |= self.layer_norm;
        if let Some(v) = self.weight_decay {
            cfg.optimizer.weight_decay = v;
        }
        if self.coupled_decay {
            cfg.optimizer.decay = DecayMode::Coupled;
        }
        if self.selection.is_some() {
            cfg.selection = self.selection;
        }
        if self.no_step_log {
            cfg.log_steps = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct PerturbArgs {
    /// Fraction of train labels to corrupt.
    #[arg(long)]
    noise_ratio: Option<f64>,
    /// Fraction of the train split to keep.
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long, value_enum, default_value = "exclude-self")]
    noise_mode: NoiseModeArg,
}

impl PerturbArgs {
    fn perturb(&self) -> Option<Perturb> {
        if self.noise_ratio.is_none() && self.train_ratio.is_none() {
            return None;
        }
        Some(Perturb {
            noise_ratio: self.noise_ratio.unwrap_or(0.0),
            train_ratio: self.train_ratio.unwrap_or(1.0),
            noise_mode: self.noise_mode.into(),
        })
    }
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Comma-separated beta axis (the penalty weight for ce_cp); default 0.001,0.01,0.1,1,10.
    #[arg(long)]
    betas: Option<String>,
    /// Comma-separated gamma axis; default 0.001,0.01,0.1,1,10.
    #[arg(long)]
    gammas: Option<String>,
}

impl GridArgs {
    fn given(&self) -> bool {
        self.betas.is_some() || self.gammas.is_some()
    }

    fn grid(&self) -> anyhow::Result<SweepGrid> {
        let axis = |s: &Option<String>, what| match s {
            Some(s) => parse_list(s, what),
            None => Ok(PAPER_GRID.to_vec()),
        };
        Ok(SweepGrid {
            beta: axis(&self.betas, "beta")?,
            gamma: axis(&self.gammas, "gamma")?,
        })
    }
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated objectives, e.g. `ce,spc`.
    #[arg(long, default_value = "ce,spc")]
    objectives: String,
    /// Comma-separated ratios.
    #[arg(long)]
    ratios: String,
    #[arg(long, value_enum, default_value = "exclude-self")]
    noise_mode: NoiseModeArg,
    /// Pick each cell's weights by a validation sweep over the grid.
    #[arg(long)]
    tune: bool,
    #[command(flatten)]
    grid: GridArgs,
}

impl StudyArgs {
    fn spec(&self) -> anyhow::Result<StudySpec> {
        let objectives: Vec<ObjectiveConfig> = parse_objectives(&self.objectives)?
            .into_iter()
            .map(|k| self.train.objective_for(k))
            .collect();
        let train = self.train.config_with(objectives.first())?;
        Ok(StudySpec {
            data: self.data.source()?,
            train,
            objectives,
            ratios: parse_list(&self.ratios, "ratio")?,
            noise_mode: self.noise_mode.into(),
            tune: if self.tune || self.grid.given() {
                Some(self.grid.grid()?)
            } else {
                None
            },
        })
    }
}

#[derive(Args, Debug)]
struct OodArgs {
    /// Training dataset.
    #[arg(long)]
    source: PathBuf,
    /// Dataset whose test split is evaluated.
    #[arg(long)]
    target: PathBuf,
    /// csv of `source_label,target_label` pairs; identity by name when absent.
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[command(flatten)]
    load: LoadArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct ReprArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value = "ce,vib,pc,spc")]
    objectives: String,
    /// Number of k-means restarts (seeds 0..N); medians are reported.
    #[arg(long, default_value_t = 5)]
    kmeans_seeds: u64,
    #[arg(long, default_value_t = 100)]
    kmeans_iters: usize,
}

fn build_job(command: &Command) -> anyhow::Result<Job> {
    Ok(match command {
        Command::GenData(a) => Job::GenData {
            data: a
                .gen
                .source(a.seed)?
                .ok_or_else(|| Error::Config("gen-data needs --classes, --dim and --per-class, or --regression".into()))?,
            format: a.format,
        },
        Command::Train {
            data,
            train,
            perturb,
        } => Job::Train {
            data: data.source()?,
            train: train.config()?,
            perturb: perturb.perturb(),
        },
        Command::Eval {
            data,
            checkpoint,
            split,
        } => Job::Eval {
            data: data.source()?,
            checkpoint: FileRef::new(checkpoint)?,
            split: *split,
        },
        Command::Sweep {
            data,
            train,
            grid,
            perturb,
        } => Job::Sweep {
            data: data.source()?,
            train: TrainConfig {
                log_steps: false,
                ..train.config()?
            },
            grid: grid.grid()?,
            perturb: perturb.perturb(),
        },
        Command::NoiseStudy(a) => Job::NoiseStudy(a.spec()?),
        Command::RatioStudy(a) => Job::RatioStudy(a.spec()?),
        Command::Ood(a) => Job::Ood {
            source: DataSource::file(&a.source, a.load.format, a.load.options(false))?,
            target: DataSource::file(&a.target, a.load.format, a.load.options(true))?,
            mapping: a.mapping.as_ref().map(FileRef::new).transpose()?,
            train: a.train.config()?,
        },
        Command::ReprQuality(a) => {
            let objectives: Vec<ObjectiveConfig> = parse_objectives(&a.objectives)?
                .into_iter()
                .map(|k| a.train.objective_for(k))
                .collect();
            Job::ReprQuality {
                data: a.data.source()?,
                train: TrainConfig {
                    log_steps: false,
                    ..a.train.config_with(objectives.first())?
                },
                objectives,
                kmeans_seeds: (0..a.kmeans_seeds).collect(),
                kmeans_iters: a.kmeans_iters,
            }
        }
        Command::Report { .. } => unreachable!("report does not build a job"),
    })
}

fn report(run_dir: &Path, verify: bool) -> anyhow::Result<()> {
    if verify {
        let v = harness::verify(run_dir)?;
        if !v.ok() {
            bail!(
                "run {} does not reproduce: {} differ",
                v.run_id,
                v.mismatched.join(", ")
            );
        }
        println!("verified {}: {} artifacts identical", v.run_id, v.checked.len());
        return Ok(());
    }
    let path = run_dir.join("report.csv");
    let table = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Report { run_dir, verify } = &cli.command {
        return report(run_dir, *verify);
    }
    let manifest = Manifest::new(build_job(&cli.command)?);
    let root = cli.out.clone().unwrap_or_else(harness::out_root);
    let (dir, out) = harness::run(&root, &manifest)?;
    println!("run: {}", dir.display());
    print!("{}", out.csv);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => (2, "config"),
                Error::Diverged { .. } | Error::NonFiniteGradient { .. } => (4, "divergence"),
                e if e.is_data_error() => (3, "data"),
                _ => (1, "internal"),
            };
        }
    }
    (1, "internal")
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let msg = serde_json::json!({
                "error": kind,
                "exit_code": code,
                "message": message(&err),
            });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}
