//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is used to verify.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or the
    /// absolute difference norm when both gradients vanish (norm < 1e-12).
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one trainable leaf per entry of `inputs`, and
/// must return a scalar node.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("trainable leaf has a gradient"))
        .collect();

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut point = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = point[i].values()[j];
            point[i].values_mut()[j] = orig + step;
            let up = eval(&point)?;
            point[i].values_mut()[j] = orig - step;
            let down = eval(&point)?;
            point[i].values_mut()[j] = orig;
            g.values_mut()[j] = (up - down) / (2.0 * step);
        }
        numeric.push(g);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheck {
        analytic,
        numeric,
        rel_errors,
    })
}

/// Norm-wise relative difference between two equally shaped tensors.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "relative_error of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let diff = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    Ok(if scale < 1e-12 { diff } else { diff / scale })
}
