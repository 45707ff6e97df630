//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and a backward rule.
//! Nodes are only ever appended, so the tape is topologically ordered by
//! construction and a single reverse sweep visits each node exactly once.
//! Ops return `Err(NonFinite)` the moment they produce NaN/Inf.

use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose forward pass is computed outside the tape and whose
/// vector-Jacobian product is supplied by the implementor.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in input order. `None` means "no gradient".
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Relu(Var),
    Elu1p(Var),
    Gelu(Var),
    Square(Var),
    LogEps(Var, f64),
    RowSoftmax(Var),
    RowNormalize { x: Var, eps: f64, clamped: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f64> },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Elu1p(..) => "elu1p",
            Op::Gelu(..) => "gelu",
            Op::Square(..) => "square",
            Op::LogEps(..) => "log",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowNormalize { .. } => "row_normalize",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Embedding { .. } => "embedding",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn col_sums(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    Tensor::row_vector(&out)
}

fn broadcast_row(t: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (r, c) = t.dims2();
    if row.numel() != c {
        return Err(Error::dim(format!(
            "row broadcast of {} values over {r}x{c}",
            row.numel()
        )));
    }
    let rv = row.data();
    let mut out = t.clone();
    for i in 0..r {
        for (o, b) in out.row_mut(i).iter_mut().zip(rv) {
            *o = f(*o, *b);
        }
    }
    Ok(out)
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A new constant leaf carrying `v`'s value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, &[a, b], Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_bt(self.value(b))?;
        self.push(out, &[a, b], Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, &[a], Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push(out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push(out, &[a], Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = broadcast_row(self.value(a), self.value(row), |x, b| x + b)?;
        self.push(out, &[a, row], Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = broadcast_row(self.value(a), self.value(row), |x, b| x * b)?;
        self.push(out, &[a, row], Op::MulRow(a, row))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, &[a], Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, &[a], Op::Relu(a))
    }

    /// `1 + elu(x)`.
    pub fn elu1p(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| if x > 0.0 { x + 1.0 } else { x.exp() });
        self.push(out, &[a], Op::Elu1p(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, &[a], Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, &[a], Op::Square(a))
    }

    /// `ln(x + eps)`.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        let out = self.value(a).map(|x| (x + eps).ln());
        self.push(out, &[a], Op::LogEps(a, eps))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).row_softmax()?;
        self.push(out, &[a], Op::RowSoftmax(a))
    }

    /// Divides each row by its sum, clamping sums below `eps` to `eps`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (r, _) = x.dims2();
        let mut out = x.clone();
        let mut clamped = Vec::with_capacity(r);
        for i in 0..r {
            let s: f64 = x.row(i).iter().sum();
            let (s, c) = if s < eps { (eps, true) } else { (s, false) };
            clamped.push(c);
            out.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, &[a], Op::RowNormalize { x: a, eps, clamped })
    }

    /// Row-wise layer normalisation with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rs);
            rstd.push(rs);
        }
        let scaled = broadcast_row(&xhat, self.value(gain), |a, g| a * g)?;
        let out = broadcast_row(&scaled, self.value(bias), |a, b| a + b)?;
        self.push(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_cols(&vals)?;
        self.push(out, parts, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        self.push(out, &[x], Op::SliceCols { x, start })
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = t.dims2();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::Input(format!("token id {id} outside table of {n}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], out)?;
        self.push(
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, &[a], Op::Mean(a))
    }

    /// Mean next-token cross-entropy over positions with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let l = self.value(logits);
        let (r, c) = l.dims2();
        if targets.len() != r {
            return Err(Error::dim(format!(
                "{} targets for {r} logit rows",
                targets.len()
            )));
        }
        let probs = l.row_softmax()?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::Input(format!("target {t} outside vocab {c}")));
                }
                // log-sum-exp form avoids log(0) for confident wrong answers.
                let row = l.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::contract("cross entropy with no scored positions"));
        }
        let out = Tensor::scalar(total / count as f64);
        self.push(
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Records an externally computed output with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            output,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, dg) in self.input_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let v = |x: &Var| &self.nodes[x.0].value;
        let rg = |x: &Var| self.nodes[x.0].requires_grad;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut r = vec![];
                if rg(a) {
                    r.push((*a, g.matmul_bt(v(b))?));
                }
                if rg(b) {
                    r.push((*b, v(a).matmul_at(g)?));
                }
                r
            }
            Op::MatMulBt(a, b) => {
                let mut r = vec![];
                if rg(a) {
                    r.push((*a, g.matmul(v(b))?));
                }
                if rg(b) {
                    r.push((*b, g.matmul_at(v(a))?));
                }
                r
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.mul(v(b))?), (*b, g.mul(v(a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddRow(a, row) => {
                let gr = col_sums(g).reshape(v(row).shape())?;
                vec![(*a, g.clone()), (*row, gr)]
            }
            Op::MulRow(a, row) => {
                let ga = broadcast_row(g, v(row), |x, b| x * b)?;
                let gr = col_sums(&g.mul(v(a))?).reshape(v(row).shape())?;
                vec![(*a, ga), (*row, gr)]
            }
            Op::Exp(a) => vec![(*a, g.mul(out)?)],
            Op::Relu(a) => vec![(*a, g.zip_map(v(a), |gi, x| if x > 0.0 { gi } else { 0.0 })?)],
            Op::Elu1p(a) => vec![(
                *a,
                g.zip_map(v(a), |gi, x| if x > 0.0 { gi } else { gi * x.exp() })?,
            )],
            Op::Gelu(a) => vec![(*a, g.zip_map(v(a), |gi, x| gi * gelu_grad(x))?)],
            Op::Square(a) => vec![(*a, g.zip_map(v(a), |gi, x| 2.0 * x * gi)?)],
            Op::LogEps(a, eps) => vec![(*a, g.zip_map(v(a), |gi, x| gi / (x + eps))?)],
            Op::RowSoftmax(a) => {
                let (r, _) = out.dims2();
                let mut dx = g.clone();
                for i in 0..r {
                    let y = out.row(i);
                    let dot: f64 = g.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (d, yi) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = yi * (*d - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::RowNormalize { x, eps, clamped } => {
                let xv = v(x);
                let (r, _) = xv.dims2();
                let mut dx = g.clone();
                for i in 0..r {
                    let s: f64 = xv.row(i).iter().sum();
                    if clamped[i] {
                        dx.row_mut(i).iter_mut().for_each(|d| *d /= eps);
                    } else {
                        let dot: f64 = g.row(i).iter().zip(out.row(i)).map(|(a, b)| a * b).sum();
                        dx.row_mut(i).iter_mut().for_each(|d| *d = (*d - dot) / s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = xhat.dims2();
                let gain_v = v(gain).data();
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let gi = g.row(i);
                    let xh = xhat.row(i);
                    let dxhat: Vec<f64> = gi.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                let dgain = col_sums(&g.mul(xhat)?).reshape(v(gain).shape())?;
                let dbias = col_sums(g).reshape(v(bias).shape())?;
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Concat(parts) => {
                let mut r = vec![];
                let mut start = 0;
                for p in parts {
                    let w = v(p).cols();
                    if rg(p) {
                        r.push((*p, g.slice_cols(start, w)?));
                    }
                    start += w;
                }
                r
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = v(x).dims2();
                let w = g.cols();
                let mut dx = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    dx.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                vec![(*x, dx)]
            }
            Op::Embedding { table, ids } => {
                let (n, c) = v(table).dims2();
                let mut dt = Tensor::zeros(&[n, c]);
                for (i, &id) in ids.iter().enumerate() {
                    for (d, gv) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                vec![(*table, dt)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(v(a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = v(a).numel() as f64;
                vec![(*a, Tensor::full(v(a).shape(), g.item() / n))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.iter().filter(|t| t.is_some()).count() as f64;
                let scale = g.item() / n;
                let mut dl = Tensor::zeros(probs.shape());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = dl.row_mut(i);
                        row.copy_from_slice(probs.row(i));
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|d| *d *= scale);
                    }
                }
                vec![(*logits, dl)]
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(v).collect();
                let gs = op.backward(&vals, out, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(i, g)| g.map(|g| (*i, g)))
                    .collect()
            }
        })
    }
}
