//! Loss terms and their weighted compositions.
//!
//! Every function here builds nodes on a caller-supplied [`Tape`], so the
//! baselines and the trainer share one implementation of each formula.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::{GaussianCode, TaskKind};
use crate::error::{Error, Result};

/// Row sums of a probability matrix must be within this distance of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Probabilistic coding plus the batch-entropy regularizer.
    Spc,
    /// Probabilistic coding: sampled-code NLL plus KL to the prior.
    Pc,
    /// Deterministic cross-entropy on the mean head.
    Ce,
    /// Cross-entropy plus a per-sample confidence penalty.
    CeCp,
    /// Encoder-decoder variational information bottleneck.
    Vib,
    Mse,
    MseVib,
    MsePc,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 8] = [
        ObjectiveKind::Spc,
        ObjectiveKind::Pc,
        ObjectiveKind::Ce,
        ObjectiveKind::CeCp,
        ObjectiveKind::Vib,
        ObjectiveKind::Mse,
        ObjectiveKind::MseVib,
        ObjectiveKind::MsePc,
    ];

    pub fn task(self) -> TaskKind {
        match self {
            ObjectiveKind::Mse | ObjectiveKind::MseVib | ObjectiveKind::MsePc => {
                TaskKind::Regression
            }
            _ => TaskKind::Classification,
        }
    }

    pub fn uses_beta(self) -> bool {
        matches!(
            self,
            ObjectiveKind::Spc
                | ObjectiveKind::Pc
                | ObjectiveKind::Vib
                | ObjectiveKind::MseVib
                | ObjectiveKind::MsePc
        )
    }

    pub fn uses_gamma(self) -> bool {
        self == ObjectiveKind::Spc
    }

    /// Whether training draws a reparameterized sample.
    pub fn is_stochastic(self) -> bool {
        self.uses_beta()
    }

    pub fn is_vib(self) -> bool {
        matches!(self, ObjectiveKind::Vib | ObjectiveKind::MseVib)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Spc => "spc",
            ObjectiveKind::Pc => "pc",
            ObjectiveKind::Ce => "ce",
            ObjectiveKind::CeCp => "ce_cp",
            ObjectiveKind::Vib => "vib",
            ObjectiveKind::Mse => "mse",
            ObjectiveKind::MseVib => "mse_vib",
            ObjectiveKind::MsePc => "mse_pc",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['+', '-'], "_");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}`")))
    }
}

/// Which probabilities feed the batch-entropy regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySource {
    /// Softmax of the sampled code used by the NLL term.
    #[default]
    Sample,
    /// Softmax of the code mean.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// KL weight.
    #[serde(default)]
    pub beta: f64,
    /// Batch-entropy weight.
    #[serde(default)]
    pub gamma: f64,
    /// Confidence-penalty weight for [`ObjectiveKind::CeCp`].
    #[serde(default)]
    pub cp_weight: f64,
    #[serde(default)]
    pub entropy_source: EntropySource,
    /// Replace the reparameterization noise by zeros (deterministic `t = mu`).
    #[serde(default)]
    pub zero_noise: bool,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveConfig {
            kind,
            beta: 0.0,
            gamma: 0.0,
            cp_weight: 0.0,
            entropy_source: EntropySource::Sample,
            zero_noise: false,
        }
    }

    pub fn spc(beta: f64, gamma: f64) -> Self {
        ObjectiveConfig {
            beta,
            gamma,
            ..Self::new(ObjectiveKind::Spc)
        }
    }

    pub fn pc(beta: f64) -> Self {
        ObjectiveConfig {
            beta,
            ..Self::new(ObjectiveKind::Pc)
        }
    }

    pub fn ce() -> Self {
        Self::new(ObjectiveKind::Ce)
    }

    pub fn ce_cp(cp_weight: f64) -> Self {
        ObjectiveConfig {
            cp_weight,
            ..Self::new(ObjectiveKind::CeCp)
        }
    }

    pub fn vib(beta: f64) -> Self {
        ObjectiveConfig {
            beta,
            ..Self::new(ObjectiveKind::Vib)
        }
    }

    /// Builds a config from the two generic sweep weights: `w1` is beta
    /// (or the penalty weight for CE+CP), `w2` is gamma. Weights the kind
    /// does not use are set to zero.
    pub fn from_weights(kind: ObjectiveKind, w1: f64, w2: f64) -> Self {
        let mut cfg = Self::new(kind);
        if kind == ObjectiveKind::CeCp {
            cfg.cp_weight = w1;
        }
        if kind.uses_beta() {
            cfg.beta = w1;
        }
        if kind.uses_gamma() {
            cfg.gamma = w2;
        }
        cfg
    }

    pub fn task(&self) -> TaskKind {
        self.kind.task()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("cp_weight", self.cp_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.kind.uses_gamma() && self.gamma != 0.0 {
            return Err(Error::Config(format!(
                "objective `{}` has no structured regularizer; gamma must be 0",
                self.kind
            )));
        }
        if !self.kind.uses_beta() && self.beta != 0.0 {
            return Err(Error::Config(format!(
                "objective `{}` has no KL term; beta must be 0",
                self.kind
            )));
        }
        if self.kind != ObjectiveKind::CeCp && self.cp_weight != 0.0 {
            return Err(Error::Config(format!(
                "cp_weight only applies to ce_cp, not `{}`",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Scalar values of the loss terms at one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub nll: f64,
    pub kl: f64,
    pub batch_entropy: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Graph handles of a composed loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub nll: Var,
    pub kl: Option<Var>,
    pub batch_entropy: Option<Var>,
    pub penalty: Option<Var>,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> TermValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).values()[0]);
        TermValues {
            nll: tape.value(self.nll).values()[0],
            kl: get(self.kl),
            batch_entropy: get(self.batch_entropy),
            penalty: get(self.penalty),
            total: tape.value(self.total).values()[0],
        }
    }
}

/// Dense one-hot matrix, validating every label.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        t.values_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

/// Borrowed batch targets.
#[derive(Clone, Copy, Debug)]
pub enum TargetsRef<'a> {
    Classes(&'a [usize]),
    Scores(&'a [f64]),
}

impl TargetsRef<'_> {
    pub fn len(&self) -> usize {
        match self {
            TargetsRef::Classes(c) => c.len(),
            TargetsRef::Scores(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Task likelihood term: cross-entropy for class targets, MSE for scores.
pub fn task_loss(tape: &mut Tape, pred: Var, targets: TargetsRef<'_>) -> Result<Var> {
    match targets {
        TargetsRef::Classes(y) => task_nll(tape, pred, y),
        TargetsRef::Scores(y) => mse(tape, pred, y),
    }
}

/// Mean cross-entropy `-(1/B) Σ_i log softmax(t)[i, y_i]`.
pub fn task_nll(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(logits).dims2()?;
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let mask = tape.constant(one_hot(labels, c)?);
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(ls, mask)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// Mean squared error between a `[B x 1]` prediction and `B` targets.
pub fn mse(tape: &mut Tape, pred: Var, targets: &[f64]) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if tape.value(pred).numel() != targets.len() {
        return Err(Error::Dimension(format!(
            "prediction shape {shape:?} does not match {} targets",
            targets.len()
        )));
    }
    let y = tape.constant(Tensor::new(shape, targets.to_vec())?);
    let d = tape.sub(pred, y)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Closed-form `KL(N(mu, diag σ²) ‖ N(0, I))`, averaged over the batch:
/// `(1/B) Σ_i ½ Σ_d (μ² + σ² − 1 − log σ²)`.
pub fn kl_to_std_normal(tape: &mut Tape, code: &GaussianCode) -> Result<Var> {
    let b = tape.value(code.mu).rows();
    let mu2 = tape.mul(code.mu, code.mu)?;
    let var = tape.exp(code.log_var);
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, code.log_var)?;
    let s = tape.add_scalar(s, -1.0);
    let total = tape.sum(s);
    Ok(tape.scale(total, 0.5 / b as f64))
}

/// Errors unless every row is non-negative and sums to 1 within [`ROW_SUM_TOLERANCE`].
pub fn check_rows_normalized(probs: &Tensor) -> Result<()> {
    let (_, c) = probs.dims2()?;
    for (i, row) in probs.values().chunks(c.max(1)).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Contract(format!(
                "row {i} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Entropy of the batch-mean class distribution, `-Σ_j p̄_j ln p̄_j`.
///
/// Upper-bounds the mean per-row entropy and lies in `[0, ln C]`.
pub fn batch_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    check_rows_normalized(tape.value(probs))?;
    let marginal = tape.mean_axis(probs, 0)?;
    let plogp = tape.xlogx(marginal)?;
    let s = tape.sum(plogp);
    Ok(tape.neg(s))
}

/// Negative mean per-row entropy, `(1/B) Σ_i Σ_j p_ij ln p_ij`.
pub fn confidence_penalty(tape: &mut Tape, probs: Var) -> Result<Var> {
    check_rows_normalized(tape.value(probs))?;
    let b = tape.value(probs).rows();
    let plogp = tape.xlogx(probs)?;
    let s = tape.sum(plogp);
    Ok(tape.scale(s, 1.0 / b as f64))
}

/// `nll(t) + β·KL(code) − γ·L_b(softmax(·))` for the PC and SPC objectives.
///
/// The regularizer reads softmax of the sampled code or of the mean,
/// depending on `cfg.entropy_source`. All three terms are returned for logging;
/// with `γ = 0` the entropy is still computed but contributes nothing.
pub fn spc_loss(
    tape: &mut Tape,
    code: &GaussianCode,
    t_sample: Var,
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<LossTerms> {
    if !matches!(cfg.kind, ObjectiveKind::Spc | ObjectiveKind::Pc) {
        return Err(Error::Config(format!(
            "spc_loss called with objective `{}`",
            cfg.kind
        )));
    }
    let nll = task_nll(tape, t_sample, labels)?;
    let kl = kl_to_std_normal(tape, code)?;
    let entropy_logits = match cfg.entropy_source {
        EntropySource::Sample => t_sample,
        EntropySource::Mean => code.mu,
    };
    let probs = tape.softmax(entropy_logits)?;
    let lb = batch_entropy(tape, probs)?;

    let weighted_kl = tape.scale(kl, cfg.beta);
    let weighted_lb = tape.scale(lb, cfg.gamma);
    let total = tape.add(nll, weighted_kl)?;
    let total = tape.sub(total, weighted_lb)?;
    Ok(LossTerms {
        total,
        nll,
        kl: Some(kl),
        batch_entropy: Some(lb),
        penalty: None,
    })
}

/// `mse(t) + β·KL(code)` for regression probabilistic coding.
pub fn mse_pc_loss(
    tape: &mut Tape,
    code: &GaussianCode,
    t_sample: Var,
    targets: &[f64],
    beta: f64,
) -> Result<LossTerms> {
    let nll = mse(tape, t_sample, targets)?;
    let kl = kl_to_std_normal(tape, code)?;
    let weighted_kl = tape.scale(kl, beta);
    let total = tape.add(nll, weighted_kl)?;
    Ok(LossTerms {
        total,
        nll,
        kl: Some(kl),
        batch_entropy: None,
        penalty: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check, DEFAULT_STEP};
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn nll_value(rows: &[&[f64]], labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let t = tape.constant(m(rows));
        let l = task_nll(&mut tape, t, labels).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn nll_examples() {
        assert!((nll_value(&[&[0.0, 0.0]], &[0]) - 2f64.ln()).abs() < 1e-15);
        // -ln σ(20) = ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        let got = nll_value(&[&[10.0, -10.0]], &[0]);
        assert!((got - expected).abs() < 1e-20, "{got} vs {expected}");
        assert!((got - 2.061153622e-9).abs() < 1e-17);
    }

    #[test]
    fn nll_is_permutation_invariant() {
        let a = nll_value(&[&[0.3, -1.0, 2.0], &[1.0, 1.5, -0.5], &[0.0, 0.1, 0.2]], &[2, 0, 1]);
        let b = nll_value(&[&[0.0, 0.1, 0.2], &[0.3, -1.0, 2.0], &[1.0, 1.5, -0.5]], &[1, 2, 0]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn nll_rejects_bad_labels() {
        let mut tape = Tape::new();
        let t = tape.constant(m(&[&[0.0, 0.0]]));
        assert!(matches!(
            task_nll(&mut tape, t, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn mse_examples_and_gradient() {
        let mut tape = Tape::new();
        let t = tape.constant(m(&[&[1.5], &[-2.0]]));
        let l = mse(&mut tape, t, &[1.5, -2.0]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let t = tape.constant(m(&[&[0.0]]));
        let l = mse(&mut tape, t, &[2.0]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 4.0);

        let y = [0.5, -1.0, 3.0];
        let r = check(
            |tape, v| mse(tape, v[0], &y),
            &[m(&[&[0.1], &[0.2], &[0.3]])],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-6);
        // Analytic gradient is 2(t - y)/B.
        for (i, g) in r.analytic[0].values().iter().enumerate() {
            let t = [0.1, 0.2, 0.3][i];
            assert!((g - 2.0 * (t - y[i]) / 3.0).abs() < 1e-15);
        }
    }

    fn kl_value(mu: Tensor, lv: Tensor) -> f64 {
        let mut tape = Tape::new();
        let code = GaussianCode {
            mu: tape.constant(mu),
            log_var: tape.constant(lv),
        };
        let kl = kl_to_std_normal(&mut tape, &code).unwrap();
        tape.value(kl).item().unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_value(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3])), 0.0);
        assert_eq!(kl_value(m(&[&[1.0]]), m(&[&[0.0]])), 0.5);
    }

    #[test]
    fn batch_entropy_examples() {
        let eval = |rows: &[&[f64]]| {
            let mut tape = Tape::new();
            let p = tape.constant(m(rows));
            let lb = batch_entropy(&mut tape, p).unwrap();
            let cp = confidence_penalty(&mut tape, p).unwrap();
            (tape.value(lb).item().unwrap(), tape.value(cp).item().unwrap())
        };
        let third = 1.0 / 3.0;
        let (lb, cp) = eval(&[&[third; 3], &[third; 3]]);
        assert!((lb - 3f64.ln()).abs() < 1e-15);
        assert!((cp + 3f64.ln()).abs() < 1e-15);
        let (lb, cp) = eval(&[&[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(lb, 0.0);
        assert_eq!(cp, 0.0);
        // Jensen gap witness.
        let (lb, cp) = eval(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((lb - 2f64.ln()).abs() < 1e-15);
        assert_eq!(-cp, 0.0);
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        let mut tape = Tape::new();
        let p = tape.constant(m(&[&[0.5, 0.6]]));
        assert!(matches!(batch_entropy(&mut tape, p), Err(Error::Contract(_))));
        assert!(matches!(confidence_penalty(&mut tape, p), Err(Error::Contract(_))));
        let q = tape.constant(m(&[&[1.5, -0.5]]));
        assert!(matches!(batch_entropy(&mut tape, q), Err(Error::Contract(_))));
    }

    #[test]
    fn spc_with_zero_weights_is_nll() {
        let mut tape = Tape::new();
        let code = GaussianCode {
            mu: tape.param(m(&[&[0.3, -0.2], &[1.0, 0.4]])),
            log_var: tape.param(m(&[&[0.1, -0.3], &[0.0, 0.5]])),
        };
        let t = crate::encoder::sample(&mut tape, &code, &m(&[&[0.5, -1.0], &[0.2, 0.9]])).unwrap();
        let terms = spc_loss(&mut tape, &code, t, &[0, 1], &ObjectiveConfig::spc(0.0, 0.0)).unwrap();
        let v = terms.values(&tape);
        assert_eq!(v.total, v.nll);

        let pc = spc_loss(&mut tape, &code, t, &[0, 1], &ObjectiveConfig::pc(0.7)).unwrap();
        let spc0 = spc_loss(&mut tape, &code, t, &[0, 1], &ObjectiveConfig::spc(0.7, 0.0)).unwrap();
        assert_eq!(pc.values(&tape).total, spc0.values(&tape).total);
    }

    #[test]
    fn spc_two_by_two_matches_scalar_recomputation() {
        let mu: [[f64; 2]; 2] = [[0.4, -0.6], [-1.2, 0.8]];
        let lv: [[f64; 2]; 2] = [[0.2, -0.5], [0.3, 0.1]];
        let eps = [[0.7, -0.3], [-1.1, 0.25]];
        let labels = [1usize, 0];
        let (beta, gamma) = (0.3, 0.8);

        // Out-of-graph recomputation.
        let mut t = [[0.0f64; 2]; 2];
        let mut nll = 0.0;
        let mut kl = 0.0;
        let mut pbar = [0.0f64; 2];
        for i in 0..2 {
            for d in 0..2 {
                t[i][d] = mu[i][d] + (0.5 * lv[i][d]).exp() * eps[i][d];
                kl += 0.5 * (mu[i][d] * mu[i][d] + lv[i][d].exp() - 1.0 - lv[i][d]);
            }
            let z = t[i][0].exp() + t[i][1].exp();
            nll -= (t[i][labels[i]].exp() / z).ln();
            for d in 0..2 {
                pbar[d] += t[i][d].exp() / z / 2.0;
            }
        }
        nll /= 2.0;
        kl /= 2.0;
        let lb = -pbar.iter().map(|p| p * p.ln()).sum::<f64>();
        let expected = nll + beta * kl - gamma * lb;

        let mut tape = Tape::new();
        let code = GaussianCode {
            mu: tape.param(Tensor::from_rows(&mu).unwrap()),
            log_var: tape.param(Tensor::from_rows(&lv).unwrap()),
        };
        let ts = crate::encoder::sample(&mut tape, &code, &Tensor::from_rows(&eps).unwrap()).unwrap();
        let terms = spc_loss(&mut tape, &code, ts, &labels, &ObjectiveConfig::spc(beta, gamma)).unwrap();
        let v = terms.values(&tape);
        assert!((v.total - expected).abs() < 1e-12);
        assert!((v.nll - nll).abs() < 1e-12);
        assert!((v.kl - kl).abs() < 1e-12);
        assert!((v.batch_entropy - lb).abs() < 1e-12);
        assert!((v.nll + beta * v.kl - gamma * v.batch_entropy - v.total).abs() < 1e-12);
    }

    #[test]
    fn objective_config_validation() {
        assert!(ObjectiveConfig::spc(0.1, 0.1).validate().is_ok());
        assert!(ObjectiveConfig::spc(-0.1, 0.1).validate().is_err());
        let mut pc = ObjectiveConfig::pc(0.1);
        pc.gamma = 0.5;
        assert!(pc.validate().is_err());
        let reg = ObjectiveConfig::from_weights(ObjectiveKind::MsePc, 0.1, 10.0);
        assert_eq!(reg.gamma, 0.0);
        assert_eq!(reg.task(), TaskKind::Regression);
        assert_eq!("ce+cp".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::CeCp);
        assert!("svm".parse::<ObjectiveKind>().is_err());
    }

    fn stochastic_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, cols), rows).prop_map(
            move |rs| {
                let rs: Vec<Vec<f64>> = rs
                    .into_iter()
                    .map(|r| {
                        let r: Vec<f64> = r.into_iter().map(|v| v + 1e-3).collect();
                        let s: f64 = r.iter().sum();
                        r.into_iter().map(|v| v / s).collect()
                    })
                    .collect();
                Tensor::from_rows(&rs).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn jensen_and_kl_nonnegativity(
            p in stochastic_matrix(6, 4),
            mu in prop::collection::vec(-3.0f64..3.0, 8),
            lv in prop::collection::vec(-4.0f64..4.0, 8),
        ) {
            let mut tape = Tape::new();
            let pv = tape.constant(p);
            let lb = batch_entropy(&mut tape, pv).unwrap();
            let cp = confidence_penalty(&mut tape, pv).unwrap();
            let (lb, cp) = (tape.value(lb).item().unwrap(), tape.value(cp).item().unwrap());
            prop_assert!(-cp <= lb + 1e-12);
            prop_assert!(lb <= 4f64.ln() + 1e-12 && lb >= 0.0);
            let kl = kl_value(Tensor::matrix(2, 4, mu).unwrap(), Tensor::matrix(2, 4, lv).unwrap());
            prop_assert!(kl >= 0.0);
        }

        #[test]
        fn entropy_ascent_step_does_not_decrease(logits in prop::collection::vec(-3.0f64..3.0, 12)) {
            let logits = Tensor::matrix(4, 3, logits).unwrap();
            let eval = |l: &Tensor| -> (f64, Tensor) {
                let mut tape = Tape::new();
                let v = tape.param(l.clone());
                let p = tape.softmax(v).unwrap();
                let lb = batch_entropy(&mut tape, p).unwrap();
                tape.backward(lb).unwrap();
                (tape.value(lb).item().unwrap(), tape.grad(v).unwrap().clone())
            };
            let (before, g) = eval(&logits);
            let mut stepped = logits.clone();
            for (x, gv) in stepped.values_mut().iter_mut().zip(g.values()) {
                *x += 1e-3 * gv;
            }
            let (after, _) = eval(&stepped);
            prop_assert!(after >= before - 1e-15);
        }

        #[test]
        fn spc_gradients_match_finite_differences(
            mu in prop::collection::vec(-2.0f64..2.0, 6),
            lv in prop::collection::vec(-2.0f64..2.0, 6),
            eps in prop::collection::vec(-2.0f64..2.0, 6),
            beta in 0.0f64..2.0,
            gamma in 0.0f64..2.0,
        ) {
            let eps = Tensor::matrix(2, 3, eps).unwrap();
            let cfg = ObjectiveConfig::spc(beta, gamma);
            let r = check(
                |tape, v| {
                    let code = GaussianCode { mu: v[0], log_var: v[1] };
                    let t = crate::encoder::sample(tape, &code, &eps)?;
                    Ok(spc_loss(tape, &code, t, &[2, 0], &cfg)?.total)
                },
                &[Tensor::matrix(2, 3, mu).unwrap(), Tensor::matrix(2, 3, lv).unwrap()],
                DEFAULT_STEP,
            ).unwrap();
            prop_assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
        }
    }
}
