//! Objective-aware model wrapper and the checkpoint file format.
//!
//! Checkpoints are JSON documents:
//!
//! ```json
//! {
//!   "format": "spc-checkpoint",
//!   "version": 1,
//!   "objective": { "kind": "spc", "beta": 0.1, "gamma": 0.1, ... },
//!   "label_names": ["neg", "pos"],
//!   "model": { "arch": "encoder", "config": {...}, "params": { "entries": [
//!       { "name": "trunk.w", "tensor": { "shape": [32, 64], "values": [...] } }, ...
//!   ] } }
//! }
//! ```
//!
//! Tensors are stored row-major with their shapes; floats round-trip exactly.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, VibConfig, VibParams};
use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::{self, EncoderConfig, EncoderParams, ParamSet, TaskKind};
use crate::error::{Error, Result};
use crate::objectives::{self, LossTerms, ObjectiveConfig, ObjectiveKind, TargetsRef};

pub const CHECKPOINT_FORMAT: &str = "spc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters shared by every objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    /// VIB latent size; ignored by label-space encoders.
    pub latent_dim: usize,
    pub layer_norm: bool,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden_dim: 64,
            latent_dim: baselines::DEFAULT_LATENT_DIM,
            layer_norm: false,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Model {
    Encoder(EncoderParams),
    Vib(VibParams),
}

/// Per-step random inputs drawn by the trainer.
#[derive(Clone, Debug, Default)]
pub struct StepNoise {
    pub eps: Option<Tensor>,
    pub dropout_mask: Option<Tensor>,
}

/// A forward pass with its loss terms and the bound parameters, in [`ParamSet`] order.
pub struct Forward {
    pub terms: LossTerms,
    pub params: Vec<Var>,
}

impl Model {
    /// `out_dim` is the class count, or 1 for regression.
    pub fn init<R: Rng + ?Sized>(
        kind: ObjectiveKind,
        input_dim: usize,
        out_dim: usize,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let enc = |out| EncoderConfig {
            input_dim,
            hidden_dim: arch.hidden_dim,
            out_dim: out,
            layer_norm: arch.layer_norm,
            dropout: arch.dropout,
        };
        if kind.is_vib() {
            let cfg = VibConfig {
                encoder: enc(arch.latent_dim),
                decoder_hidden: arch.hidden_dim,
                out_dim,
            };
            Ok(Model::Vib(VibParams::init(cfg, rng)?))
        } else {
            Ok(Model::Encoder(EncoderParams::init(enc(out_dim), rng)?))
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Encoder(p) => &p.params,
            Model::Vib(p) => &p.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Encoder(p) => &mut p.params,
            Model::Vib(p) => &mut p.params,
        }
    }

    fn encoder_config(&self) -> &EncoderConfig {
        match self {
            Model::Encoder(p) => &p.config,
            Model::Vib(p) => &p.config.encoder,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_config().input_dim
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Model::Encoder(p) => p.config.out_dim,
            Model::Vib(p) => p.config.out_dim,
        }
    }

    pub fn dropout(&self) -> f64 {
        self.encoder_config().dropout
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder_config().hidden_dim
    }

    /// Width of the reparameterization noise per sample.
    pub fn code_dim(&self) -> usize {
        self.encoder_config().out_dim
    }

    /// Trainable scalars between the code sample and the prediction.
    pub fn readout_param_count(&self) -> usize {
        match self {
            Model::Encoder(_) => 0,
            Model::Vib(p) => p.decoder_param_count(),
        }
    }

    /// Builds the training loss for one batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        targets: TargetsRef<'_>,
        cfg: &ObjectiveConfig,
        noise: &StepNoise,
    ) -> Result<Forward> {
        let xv = tape.constant(x.clone());
        let mask = noise.dropout_mask.as_ref();
        let need_eps = || {
            noise.eps.as_ref().ok_or_else(|| {
                Error::Contract(format!("objective `{}` needs sampling noise", cfg.kind))
            })
        };
        let classes = || match targets {
            TargetsRef::Classes(y) => Ok(y),
            TargetsRef::Scores(_) => Err(Error::Config(format!(
                "objective `{}` needs class targets",
                cfg.kind
            ))),
        };
        let scores = || match targets {
            TargetsRef::Scores(y) => Ok(y),
            TargetsRef::Classes(_) => Err(Error::Config(format!(
                "objective `{}` needs real-valued targets",
                cfg.kind
            ))),
        };

        match self {
            Model::Encoder(p) => {
                let (vars, bound) = p.bind(tape)?;
                let terms = match cfg.kind {
                    ObjectiveKind::Spc | ObjectiveKind::Pc => {
                        let code = encoder::encode(tape, &p.config, &vars, xv, mask)?;
                        let t = encoder::sample(tape, &code, need_eps()?)?;
                        objectives::spc_loss(tape, &code, t, classes()?, cfg)?
                    }
                    ObjectiveKind::Ce => {
                        baselines::ce_forward(tape, &p.config, &vars, xv, classes()?, mask)?
                    }
                    ObjectiveKind::CeCp => baselines::ce_cp_forward(
                        tape,
                        &p.config,
                        &vars,
                        xv,
                        classes()?,
                        cfg.cp_weight,
                        mask,
                    )?,
                    ObjectiveKind::Mse => {
                        let pred = encoder::encode_mean(tape, &p.config, &vars, xv, mask)?;
                        let nll = objectives::mse(tape, pred, scores()?)?;
                        LossTerms {
                            total: nll,
                            nll,
                            kl: None,
                            batch_entropy: None,
                            penalty: None,
                        }
                    }
                    ObjectiveKind::MsePc => {
                        let code = encoder::encode(tape, &p.config, &vars, xv, mask)?;
                        let t = encoder::sample(tape, &code, need_eps()?)?;
                        objectives::mse_pc_loss(tape, &code, t, scores()?, cfg.beta)?
                    }
                    ObjectiveKind::Vib | ObjectiveKind::MseVib => {
                        return Err(Error::Config(format!(
                            "objective `{}` needs a VIB model",
                            cfg.kind
                        )))
                    }
                };
                Ok(Forward {
                    terms,
                    params: bound,
                })
            }
            Model::Vib(p) => {
                if !cfg.kind.is_vib() {
                    return Err(Error::Config(format!(
                        "objective `{}` cannot train a VIB model",
                        cfg.kind
                    )));
                }
                let (vars, bound) = p.bind(tape)?;
                let (terms, _) = baselines::vib_forward(
                    tape,
                    &p.config,
                    &vars,
                    xv,
                    targets,
                    cfg.beta,
                    need_eps()?,
                    mask,
                )?;
                Ok(Forward {
                    terms,
                    params: bound,
                })
            }
        }
    }

    /// Deterministic outputs from the code mean: class probabilities, or
    /// `[N x 1]` scores for regression.
    pub fn predict(&self, x: &Tensor, task: TaskKind) -> Result<Tensor> {
        match self {
            Model::Encoder(p) => {
                let (mu, _) = encoder::encode_values(p, x)?;
                Ok(encoder::predict(&mu, task))
            }
            Model::Vib(p) => {
                let mut tape = Tape::new();
                let (vars, _) = p.bind(&mut tape)?;
                let xv = tape.constant(x.clone());
                let code = encoder::encode(&mut tape, &p.config.encoder, &vars.encoder, xv, None)?;
                let out = baselines::decode(&mut tape, &vars, code.mu)?;
                Ok(encoder::predict(tape.value(out), task))
            }
        }
    }

    /// Code mean `mu(x)`: label-space for encoders, latent for VIB.
    pub fn representation(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Model::Encoder(p) => Ok(encoder::encode_values(p, x)?.0),
            Model::Vib(p) => {
                let enc = EncoderParams {
                    config: p.config.encoder.clone(),
                    params: strip_prefix(&p.params, "enc."),
                };
                Ok(encoder::encode_values(&enc, x)?.0)
            }
        }
    }
}

fn strip_prefix(params: &ParamSet, prefix: &str) -> ParamSet {
    let mut out = ParamSet::new();
    for e in params.iter() {
        if let Some(rest) = e.name.strip_prefix(prefix) {
            out.push(rest, e.tensor.clone());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub label_names: Option<Vec<String>>,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(objective: ObjectiveConfig, label_names: Option<Vec<String>>, model: Model) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            objective,
            label_names,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        for e in ck.model.params().iter() {
            if !e.tensor.all_finite() {
                return Err(Error::Data(format!("non-finite values in `{}`", e.name)));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
