//! Deterministic CE, CE with a confidence penalty, and the encoder-decoder VIB.
//!
//! CE and CE+CP reuse the label-space encoder's mean head as a plain MLP. VIB
//! encodes into a latent space of its own size and reads out through a
//! trainable decoder, which is the structural difference the SPC encoder
//! removes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::{self, glorot, EncoderConfig, EncoderVars, GaussianCode, ParamSet};
use crate::error::{Error, Result};
use crate::objectives::{
    confidence_penalty, kl_to_std_normal, task_loss, task_nll, LossTerms, TargetsRef,
};

pub const DEFAULT_LATENT_DIM: usize = 16;

/// Cross-entropy on the deterministic mean head.
pub fn ce_forward(
    tape: &mut Tape,
    config: &EncoderConfig,
    vars: &EncoderVars,
    x: Var,
    labels: &[usize],
    dropout_mask: Option<&Tensor>,
) -> Result<LossTerms> {
    let logits = encoder::encode_mean(tape, config, vars, x, dropout_mask)?;
    let nll = task_nll(tape, logits, labels)?;
    Ok(LossTerms {
        total: nll,
        nll,
        kl: None,
        batch_entropy: None,
        penalty: None,
    })
}

/// `ce + cp_weight · confidence_penalty(softmax(logits))`.
pub fn ce_cp_forward(
    tape: &mut Tape,
    config: &EncoderConfig,
    vars: &EncoderVars,
    x: Var,
    labels: &[usize],
    cp_weight: f64,
    dropout_mask: Option<&Tensor>,
) -> Result<LossTerms> {
    if !(cp_weight >= 0.0) {
        return Err(Error::Config(format!(
            "confidence-penalty weight must be non-negative, got {cp_weight}"
        )));
    }
    let logits = encoder::encode_mean(tape, config, vars, x, dropout_mask)?;
    let nll = task_nll(tape, logits, labels)?;
    let probs = tape.softmax(logits)?;
    let penalty = confidence_penalty(tape, probs)?;
    let weighted = tape.scale(penalty, cp_weight);
    let total = tape.add(nll, weighted)?;
    Ok(LossTerms {
        total,
        nll,
        kl: None,
        batch_entropy: None,
        penalty: Some(penalty),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibConfig {
    /// Encoder into the latent space; `encoder.out_dim` is the latent size K.
    pub encoder: EncoderConfig,
    pub decoder_hidden: usize,
    /// Number of classes, or 1 for regression.
    pub out_dim: usize,
}

impl VibConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("invalid VIB decoder: {self:?}")));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VibParams {
    pub config: VibConfig,
    pub params: ParamSet,
}

const ENC: &str = "enc.";

impl VibParams {
    pub fn init<R: Rng + ?Sized>(config: VibConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let enc = encoder::EncoderParams::init(config.encoder.clone(), rng)?;
        let mut params = ParamSet::new();
        for e in enc.params.iter() {
            params.push(format!("{ENC}{}", e.name), e.tensor.clone());
        }
        let (k, h, c) = (config.latent_dim(), config.decoder_hidden, config.out_dim);
        params.push("dec.hidden.w", glorot(rng, k, h));
        params.push("dec.hidden.b", Tensor::zeros(&[h]));
        params.push("dec.out.w", glorot(rng, h, c));
        params.push("dec.out.b", Tensor::zeros(&[c]));
        Ok(VibParams { config, params })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<(VibVars, Vec<Var>)> {
        let bound = self.params.bind(tape);
        let vars = VibVars::resolve(&self.config, &self.params, &bound)?;
        Ok((vars, bound))
    }

    /// Number of trainable scalars between the latent sample and the logits.
    pub fn decoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|e| e.name.starts_with("dec."))
            .map(|e| e.tensor.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VibVars {
    pub encoder: EncoderVars,
    pub dec_hidden_w: Var,
    pub dec_hidden_b: Var,
    pub dec_out_w: Var,
    pub dec_out_b: Var,
}

impl VibVars {
    fn resolve(config: &VibConfig, params: &ParamSet, bound: &[Var]) -> Result<Self> {
        let take = |name: &str| -> Result<Var> {
            params
                .iter()
                .position(|e| e.name == name)
                .map(|i| bound[i])
                .ok_or_else(|| Error::Data(format!("missing parameter tensor `{name}`")))
        };
        Ok(VibVars {
            encoder: EncoderVars::resolve(&config.encoder, params, ENC, bound)?,
            dec_hidden_w: take("dec.hidden.w")?,
            dec_hidden_b: take("dec.hidden.b")?,
            dec_out_w: take("dec.out.w")?,
            dec_out_b: take("dec.out.b")?,
        })
    }
}

/// Parametric decoder `q_φ(y|z)`: one tanh hidden layer, then logits (or a score).
pub fn decode(tape: &mut Tape, vars: &VibVars, z: Var) -> Result<Var> {
    let h = tape.matmul(z, vars.dec_hidden_w)?;
    let h = tape.add_row(h, vars.dec_hidden_b)?;
    let h = tape.tanh(h);
    let out = tape.matmul(h, vars.dec_out_w)?;
    tape.add_row(out, vars.dec_out_b)
}

/// `task_loss(decode(z), y) + β · KL(latent code)`, with `z` reparameterized from `eps`.
#[allow(clippy::too_many_arguments)]
pub fn vib_forward(
    tape: &mut Tape,
    config: &VibConfig,
    vars: &VibVars,
    x: Var,
    targets: TargetsRef<'_>,
    beta: f64,
    eps: &Tensor,
    dropout_mask: Option<&Tensor>,
) -> Result<(LossTerms, GaussianCode)> {
    let code = encoder::encode(tape, &config.encoder, &vars.encoder, x, dropout_mask)?;
    let z = encoder::sample(tape, &code, eps)?;
    let logits = decode(tape, vars, z)?;
    let nll = task_loss(tape, logits, targets)?;
    let kl = kl_to_std_normal(tape, &code)?;
    let weighted = tape.scale(kl, beta);
    let total = tape.add(nll, weighted)?;
    Ok((
        LossTerms {
            total,
            nll,
            kl: Some(kl),
            batch_entropy: None,
            penalty: None,
        },
        code,
    ))
}
