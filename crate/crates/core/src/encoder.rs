//! Stochastic encoder producing diagonal Gaussians directly in the label space.
//!
//! A shared tanh trunk feeds two linear heads, one for the mean and one for
//! the log-variance. The code lives in `R^out_dim` with `out_dim = C` for a
//! `C`-class task and `1` for regression, so prediction needs no decoder:
//! softmax of the mean for classification, the mean itself for regression.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Bounds applied to the predicted log-variance.
pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 8.0;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.entries.iter_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// Registers every tensor on the tape as a trainable leaf, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.param(e.tensor.clone()))
            .collect()
    }

}

/// Glorot-uniform `[fan_in x fan_out]` weight matrix.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let values = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, values).expect("glorot shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub layer_norm: bool,
    /// Dropout probability on the trunk activations during training.
    #[serde(default)]
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dim,
            out_dim,
            layer_norm: false,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Parameters of the trunk and the two Gaussian heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl EncoderParams {
    /// Glorot weights, zero biases, unit layer-norm gain.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h, o) = (config.input_dim, config.hidden_dim, config.out_dim);
        let mut params = ParamSet::new();
        params.push("trunk.w", glorot(rng, d, h));
        params.push("trunk.b", Tensor::zeros(&[h]));
        if config.layer_norm {
            params.push("trunk.ln_gain", Tensor::ones(&[h]));
            params.push("trunk.ln_bias", Tensor::zeros(&[h]));
        }
        params.push("mu.w", glorot(rng, h, o));
        params.push("mu.b", Tensor::zeros(&[o]));
        params.push("log_var.w", glorot(rng, h, o));
        params.push("log_var.b", Tensor::zeros(&[o]));
        Ok(EncoderParams { config, params })
    }

    /// All-zero parameters (the network outputs `mu = 0`, `log_var = 0`).
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        let mut p = Self::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for e in p.params.iter_mut() {
            e.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    /// Binds all parameters on `tape`; the returned list follows `params` order.
    pub fn bind(&self, tape: &mut Tape) -> Result<(EncoderVars, Vec<Var>)> {
        let bound = self.params.bind(tape);
        let vars = EncoderVars::resolve(&self.config, &self.params, "", &bound)?;
        Ok((vars, bound))
    }
}

/// Tape handles for one bound copy of encoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub trunk_w: Var,
    pub trunk_b: Var,
    pub ln: Option<(Var, Var)>,
    pub mu_w: Var,
    pub mu_b: Var,
    pub log_var_w: Var,
    pub log_var_b: Var,
}

impl EncoderVars {
    /// Resolves the tensors named `{prefix}trunk.w`, `{prefix}mu.w`, ... among
    /// `bound`, the result of [`ParamSet::bind`] on `params`.
    pub(crate) fn resolve(
        config: &EncoderConfig,
        params: &ParamSet,
        prefix: &str,
        bound: &[Var],
    ) -> Result<Self> {
        let take = |name: &str| -> Result<Var> {
            let full = format!("{prefix}{name}");
            params
                .iter()
                .position(|e| e.name == full)
                .map(|i| bound[i])
                .ok_or_else(|| Error::Data(format!("missing parameter tensor `{full}`")))
        };
        let ln = if config.layer_norm {
            Some((take("trunk.ln_gain")?, take("trunk.ln_bias")?))
        } else {
            None
        };
        Ok(EncoderVars {
            trunk_w: take("trunk.w")?,
            trunk_b: take("trunk.b")?,
            ln,
            mu_w: take("mu.w")?,
            mu_b: take("mu.b")?,
            log_var_w: take("log_var.w")?,
            log_var_b: take("log_var.b")?,
        })
    }
}

/// Diagonal Gaussian `N(mu, diag(exp(log_var)))`, one row per sample.
#[derive(Clone, Copy, Debug)]
pub struct GaussianCode {
    pub mu: Var,
    pub log_var: Var,
}

/// Shared trunk: `tanh(LN?(x W + b))`, optionally followed by a dropout mask.
pub(crate) fn trunk(
    tape: &mut Tape,
    vars: &EncoderVars,
    x: Var,
    dropout_mask: Option<&Tensor>,
) -> Result<Var> {
    let pre = tape.matmul(x, vars.trunk_w)?;
    let mut pre = tape.add_row(pre, vars.trunk_b)?;
    if let Some((gain, bias)) = vars.ln {
        pre = tape.layer_norm(pre, LAYER_NORM_EPS)?;
        pre = tape.mul_row(pre, gain)?;
        pre = tape.add_row(pre, bias)?;
    }
    let h = tape.tanh(pre);
    match dropout_mask {
        Some(mask) => {
            let m = tape.constant(mask.clone());
            tape.mul(h, m)
        }
        None => Ok(h),
    }
}

fn check_input(tape: &Tape, x: Var, input_dim: usize) -> Result<()> {
    let (_, d) = tape.value(x).dims2()?;
    if d != input_dim {
        return Err(Error::Dimension(format!(
            "encoder expects {input_dim} input features, got {d}"
        )));
    }
    Ok(())
}

/// Computes the Gaussian code `(mu(x), clamp(log_var(x)))` for a `[B x D]` batch.
pub fn encode(
    tape: &mut Tape,
    config: &EncoderConfig,
    vars: &EncoderVars,
    x: Var,
    dropout_mask: Option<&Tensor>,
) -> Result<GaussianCode> {
    check_input(tape, x, config.input_dim)?;
    let h = trunk(tape, vars, x, dropout_mask)?;
    let mu = tape.matmul(h, vars.mu_w)?;
    let mu = tape.add_row(mu, vars.mu_b)?;
    let lv = tape.matmul(h, vars.log_var_w)?;
    let lv = tape.add_row(lv, vars.log_var_b)?;
    let log_var = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok(GaussianCode { mu, log_var })
}

/// Mean head only; the deterministic network used by the CE and MSE baselines.
pub fn encode_mean(
    tape: &mut Tape,
    config: &EncoderConfig,
    vars: &EncoderVars,
    x: Var,
    dropout_mask: Option<&Tensor>,
) -> Result<Var> {
    check_input(tape, x, config.input_dim)?;
    let h = trunk(tape, vars, x, dropout_mask)?;
    let mu = tape.matmul(h, vars.mu_w)?;
    tape.add_row(mu, vars.mu_b)
}

/// Reparameterized draw `t = mu + exp(log_var / 2) * eps`.
///
/// `eps` enters the tape as a constant, so gradients reach `mu` and `log_var` only.
pub fn sample(tape: &mut Tape, code: &GaussianCode, eps: &Tensor) -> Result<Var> {
    if tape.value(code.mu).shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} does not match code shape {:?}",
            eps.shape(),
            tape.value(code.mu).shape()
        )));
    }
    let half = tape.scale(code.log_var, 0.5);
    let sigma = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(sigma, e)?;
    tape.add(code.mu, noise)
}

/// Non-parametric readout of a code mean: class probabilities or regression scores.
pub fn predict(mu: &Tensor, task: TaskKind) -> Tensor {
    match task {
        TaskKind::Classification => mu.softmax_rows(),
        TaskKind::Regression => mu.clone(),
    }
}

/// Forward pass without gradients: returns `(mu, log_var)` values.
pub fn encode_values(params: &EncoderParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (vars, _) = params.bind(&mut tape)?;
    let xv = tape.constant(x.clone());
    let code = encode(&mut tape, &params.config, &vars, xv, None)?;
    Ok((
        tape.value(code.mu).clone(),
        tape.value(code.log_var).clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_network_gives_standard_normal_code() {
        let p = EncoderParams::zeros(EncoderConfig::new(5, 8, 3)).unwrap();
        let x = Tensor::filled(&[4, 5], 0.7);
        let (mu, lv) = encode_values(&p, &x).unwrap();
        assert_eq!(mu.shape(), &[4, 3]);
        assert!(mu.values().iter().all(|&v| v == 0.0));
        assert!(lv.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_label_space_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = EncoderParams::init(EncoderConfig::new(6, 10, 4), &mut rng).unwrap();
        let x = Tensor::filled(&[7, 6], 0.1);
        let (mu, lv) = encode_values(&p, &x).unwrap();
        assert_eq!(mu.shape(), &[7, 4]);
        assert_eq!(lv.shape(), &[7, 4]);
        let wrong = Tensor::filled(&[7, 5], 0.1);
        assert!(matches!(encode_values(&p, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn log_var_is_clamped() {
        let mut p = EncoderParams::zeros(EncoderConfig::new(2, 3, 2)).unwrap();
        p.params.get_mut("log_var.b").unwrap().values_mut()[0] = 50.0;
        p.params.get_mut("log_var.b").unwrap().values_mut()[1] = -50.0;
        let (_, lv) = encode_values(&p, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(lv.values(), &[LOG_VAR_MAX, LOG_VAR_MIN]);
    }

    #[test]
    fn mean_gradient_wrt_trunk_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for layer_norm in [false, true] {
            let mut cfg = EncoderConfig::new(4, 5, 3);
            cfg.layer_norm = layer_norm;
            let p = EncoderParams::init(cfg.clone(), &mut rng).unwrap();
            let x: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
            let x = Tensor::matrix(3, 4, x).unwrap();
            let inputs: Vec<Tensor> = p.params.iter().map(|e| e.tensor.clone()).collect();
            let r = check(
                |tape, vars| {
                    let ev = EncoderVars::resolve(&cfg, &p.params, "", vars)?;
                    let xv = tape.constant(x.clone());
                    let mu = encode_mean(tape, &cfg, &ev, xv, None)?;
                    Ok(tape.mean(mu))
                },
                &inputs,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(r.rel_errors[0] < 1e-4, "{:?}", r.rel_errors);
            assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
        }
    }

    fn code_on(tape: &mut Tape, mu: Tensor, lv: Tensor) -> GaussianCode {
        GaussianCode {
            mu: tape.param(mu),
            log_var: tape.param(lv),
        }
    }

    #[test]
    fn sample_examples() {
        let mut tape = Tape::new();
        let code = code_on(
            &mut tape,
            Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap(),
            Tensor::zeros(&[1, 2]),
        );
        let t0 = sample(&mut tape, &code, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(tape.value(t0).values(), &[0.5, -1.0]);
        let t1 = sample(&mut tape, &code, &Tensor::ones(&[1, 2])).unwrap();
        assert_eq!(tape.value(t1).values(), &[1.5, 0.0]);
        assert!(sample(&mut tape, &code, &Tensor::ones(&[2, 2])).is_err());
    }

    #[test]
    fn sample_gradient_reaches_mu_and_log_var() {
        let mut tape = Tape::new();
        let code = code_on(
            &mut tape,
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
        );
        let t = sample(&mut tape, &code, &Tensor::filled(&[1, 1], 2.0)).unwrap();
        let s = tape.sum(t);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(code.mu).unwrap().values(), &[1.0]);
        // d/dlv (exp(lv/2) * 2) at 0 = 1
        assert_eq!(tape.grad(code.log_var).unwrap().values(), &[1.0]);
    }

    #[test]
    fn predict_examples() {
        let p = predict(&Tensor::zeros(&[1, 3]), TaskKind::Classification);
        for &v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mu = Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 3.0, 0.0, 1.0]).unwrap();
        let shifted = mu.map(|v| v + 100.0);
        assert_eq!(
            predict(&mu, TaskKind::Classification).argmax_rows(),
            predict(&shifted, TaskKind::Classification).argmax_rows()
        );
        let r = predict(&Tensor::matrix(1, 1, vec![2.5]).unwrap(), TaskKind::Regression);
        assert_eq!(r.values(), &[2.5]);
    }
}
