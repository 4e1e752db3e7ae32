use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    XLogX(Var),
    Clamp(Var, f64, f64),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records tensor operations in execution order and replays them backwards.
///
/// Nodes are appended as operations run, so every node's inputs precede it and
/// the reverse pass is a single sweep from the loss back to the leaves. A tape
/// supports one `backward` call; a second call fails until [`Tape::reset_grads`]
/// clears the stored gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            requires_grad: trainable,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    /// Trainable leaves always have a gradient after `backward` (zeros when unreachable).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    // ---- binary ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: [{m}x{k}] · [{k2}x{n}]"
            )));
        }
        let out = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `a[i, j] + bias[j]` for a matrix `a` and a bias of length `cols(a)`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.row_binary(a, bias, "add_row", |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    /// `a[i, j] * scale[j]`.
    pub fn mul_row(&mut self, a: Var, scale: Var) -> Result<Var> {
        let out = self.row_binary(a, scale, "mul_row", |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, scale), &[a, scale]))
    }

    fn broadcast_binary(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let v = ta
                .values()
                .iter()
                .zip(tb.values())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), v)
        } else if tb.is_scalar() {
            let y = tb.values()[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.values()[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} are not broadcast-compatible",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    fn row_binary(
        &self,
        a: Var,
        row: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = ta.dims2()?;
        if tr.numel() != n || tr.shape().len() > 2 || (tr.shape().len() == 2 && tr.shape()[0] != 1)
        {
            return Err(Error::Dimension(format!(
                "{name}: row operand {:?} does not match {} columns",
                tr.shape(),
                n
            )));
        }
        let r = tr.values();
        let v = ta
            .values()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape().to_vec(), v)
    }

    // ---- unary ops --------------------------------------------------------

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).values().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Elementwise `x·ln x` with the limit value 0 at `x = 0`. Inputs must be non-negative.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).values().iter().find(|&&v| !(v >= 0.0)) {
            return Err(Error::Domain(format!("x·ln x of negative value {bad}")));
        }
        let out = self
            .value(a)
            .map(|v| if v == 0.0 { 0.0 } else { v * v.ln() });
        Ok(self.push(out, Op::XLogX(a), &[a]))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input lies outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a, None), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(a, None), &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = reduce_axis(self.value(a), axis)?;
        Ok(self.push(out, Op::Sum(a, Some(axis)), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let mut out = reduce_axis(self.value(a), axis)?;
        let n = self.value(a).shape()[axis];
        let inv = 1.0 / n as f64;
        out.values_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(out, Op::Mean(a, Some(axis)), &[a]))
    }

    // ---- row-wise ops -----------------------------------------------------

    /// Row-wise log-softmax of a `[B x C]` matrix, `C >= 2`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.value(a).dims2()?;
        if c < 2 {
            return Err(Error::Dimension(format!(
                "log_softmax needs at least 2 columns, got {c}"
            )));
        }
        let mut out = self.value(a).clone();
        for row in out.values_mut().chunks_mut(c) {
            // ln Σ exp(v - max) = ln(1 + rest), with the argmax term kept out of `rest`
            // so confident rows stay accurate.
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let shift = rest.ln_1p();
            row.iter_mut().for_each(|v| *v = (*v - max) - shift);
        }
        Ok(self.push(out, Op::LogSoftmax(a), &[a]))
    }

    /// Row-wise softmax, expressed as `exp(log_softmax(a))`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ls = self.log_softmax(a)?;
        Ok(self.exp(ls))
    }

    /// Normalizes each row to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (_, c) = self.value(a).dims2()?;
        let mut out = self.value(a).clone();
        for row in out.values_mut().chunks_mut(c.max(1)) {
            let (mean, inv_std) = row_moments(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
        }
        Ok(self.push(out, Op::LayerNorm(a, eps), &[a]))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that depends on a trainable leaf.
    ///
    /// Gradients from shared subexpressions accumulate additively. Trainable
    /// leaves the loss does not reach receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward() already ran on this tape; call reset_grads() first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            let g = grads.get_mut(id).and_then(Option::take);
            node.grad = match (g, node.trainable) {
                (Some(g), _) => Some(g),
                (None, true) => Some(Tensor::zeros(node.value.shape())),
                (None, false) => None,
            };
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let (_, n) = self.value(b).dims2()?;
                if needs(a) {
                    // g [m x n] · bᵀ [n x k]
                    let bt = transpose(self.value(b).values(), k, n);
                    let ga = matmul_raw(g.values(), &bt, m, n, k);
                    accumulate(grads, a, Tensor::matrix(m, k, ga)?);
                }
                if needs(b) {
                    let at = transpose(self.value(a).values(), m, k);
                    let gb = matmul_raw(&at, g.values(), k, m, n);
                    accumulate(grads, b, Tensor::matrix(k, n, gb)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(a) {
                    accumulate(grads, a, self.unbroadcast(a, g.clone()));
                }
                if needs(b) {
                    accumulate(grads, b, self.unbroadcast(b, g.map(|v| sign * v)));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let ga = broadcast_zip(g, self.value(b), |gv, bv| gv * bv);
                    accumulate(grads, a, self.unbroadcast(a, ga));
                }
                if needs(b) {
                    let gb = broadcast_zip(g, self.value(a), |gv, av| gv * av);
                    accumulate(grads, b, self.unbroadcast(b, gb));
                }
            }
            Op::AddRow(a, bias) => {
                if needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if needs(bias) {
                    let cs = column_sums(g.values(), self.value(bias).numel());
                    accumulate(grads, bias, Tensor::new(self.value(bias).shape().to_vec(), cs)?);
                }
            }
            Op::MulRow(a, s) => {
                let n = self.value(s).numel();
                let sv = self.value(s).values();
                if needs(a) {
                    let v = g
                        .values()
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(sv).map(|(&gv, &s)| gv * s))
                        .collect();
                    accumulate(grads, a, Tensor::new(g.shape().to_vec(), v)?);
                }
                if needs(s) {
                    let prod: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(self.value(a).values())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    let cs = column_sums(&prod, n);
                    accumulate(grads, s, Tensor::new(self.value(s).shape().to_vec(), cs)?);
                }
            }
            Op::Exp(a) => accumulate(grads, a, zip(g, out, |gv, y| gv * y)),
            Op::Log(a) => accumulate(grads, a, zip(g, self.value(a), |gv, x| gv / x)),
            Op::Tanh(a) => accumulate(grads, a, zip(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Relu(a) => accumulate(
                grads,
                a,
                zip(g, self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            ),
            Op::Scale(a, s) => accumulate(grads, a, g.map(|gv| gv * s)),
            Op::AddScalar(a) => accumulate(grads, a, g.clone()),
            Op::XLogX(a) => accumulate(
                grads,
                a,
                zip(g, self.value(a), |gv, x| gv * (x.max(f64::MIN_POSITIVE).ln() + 1.0)),
            ),
            Op::Clamp(a, lo, hi) => accumulate(
                grads,
                a,
                zip(g, self.value(a), |gv, x| if x >= lo && x <= hi { gv } else { 0.0 }),
            ),
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = self.value(a).shape().to_vec();
                let scale = match (node.op, axis) {
                    (Op::Mean(..), None) => 1.0 / self.value(a).numel() as f64,
                    (Op::Mean(..), Some(ax)) => 1.0 / shape[ax] as f64,
                    _ => 1.0,
                };
                let ga = match axis {
                    None => Tensor::filled(&shape, g.values()[0] * scale),
                    Some(ax) => expand_axis(g, &shape, ax, scale),
                };
                accumulate(grads, a, ga);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(out.numel());
                for (grow, yrow) in g.values().chunks(c).zip(out.values().chunks(c)) {
                    let gsum: f64 = grow.iter().sum();
                    ga.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * gsum));
                }
                accumulate(grads, a, Tensor::new(out.shape().to_vec(), ga)?);
            }
            Op::LayerNorm(a, eps) => {
                let c = out.cols();
                let x = self.value(a);
                let mut ga = Vec::with_capacity(out.numel());
                for ((grow, yrow), xrow) in g
                    .values()
                    .chunks(c)
                    .zip(out.values().chunks(c))
                    .zip(x.values().chunks(c))
                {
                    let (_, inv_std) = row_moments(xrow, eps);
                    let n = c as f64;
                    let gmean = grow.iter().sum::<f64>() / n;
                    let gy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n;
                    ga.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&gv, &y)| inv_std * (gv - gmean - y * gy)),
                    );
                }
                accumulate(grads, a, Tensor::new(out.shape().to_vec(), ga)?);
            }
        }
        Ok(())
    }

    /// Sums a full-size gradient back down to a scalar operand.
    fn unbroadcast(&self, v: Var, g: Tensor) -> Tensor {
        let target = self.value(v);
        if target.shape() == g.shape() {
            g
        } else {
            Tensor::filled(target.shape(), g.sum())
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .for_each(|(e, &x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let v = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), v).expect("zip of equal shapes")
}

/// `f(g, other)` where `other` is either `g`-shaped or a scalar.
fn broadcast_zip(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if other.shape() == g.shape() {
        zip(g, other, f)
    } else if other.is_scalar() {
        let o = other.values()[0];
        g.map(|x| f(x, o))
    } else {
        // `g` is the scalar side: the output took `other`'s shape.
        let gv = g.values()[0];
        other.map(|o| f(gv, o))
    }
}

fn column_sums(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in values.chunks(cols.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduce_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(t.shape(), axis)?;
    let mut out = vec![0.0; outer * inner];
    let v = t.values();
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for i in 0..inner {
                out[o * inner + i] += v[base + i];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, n, inner) = split_axis(shape, axis).expect("axis validated in forward pass");
    let mut out = vec![0.0; outer * n * inner];
    let gv = g.values();
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for i in 0..inner {
                out[base + i] = gv[o * inner + i] * scale;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape product matches")
}

fn transpose(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = v[i * cols + j];
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}
