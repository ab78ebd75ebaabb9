//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records every differentiable operation of one forward pass in
//! execution order. Nodes hold their forward value (parameter nodes borrow it
//! from the [`ParamStore`]). [`Tape::backward`] walks the record in reverse
//! and returns gradients for the trainable parameters that influenced the
//! scalar loss.
//!
//! Nodes whose inputs are all constants or frozen parameters are marked as
//! not requiring a gradient and are skipped during the reverse sweep, so a
//! frozen backbone costs only the input-gradient half of each product.

use crate::error::{Error, Result};
use crate::numeric::matrix::{axpy, dot};
use crate::numeric::{Matrix, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Softmax over each row restricted to entries whose mask is finite.
///
/// `mask` entries are `0` or `-inf`; `-inf` entries receive exactly zero
/// weight. A row with no finite mask entry is an error.
pub fn masked_row_softmax(logits: &Matrix, mask: &Matrix) -> Result<Matrix> {
    if logits.shape() != mask.shape() {
        return Err(Error::dim("masked_row_softmax", logits.shape(), mask.shape()));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let (l, m) = (logits.row(i), mask.row(i));
        let mut max = f64::NEG_INFINITY;
        for (&x, &mk) in l.iter().zip(m) {
            if mk != f64::NEG_INFINITY {
                max = max.max(x + mk);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for ((o, &x), &mk) in o.iter_mut().zip(l).zip(m) {
            if mk != f64::NEG_INFINITY {
                *o = (x + mk - max).exp();
                sum += *o;
            }
        }
        let inv = 1.0 / sum;
        for v in o.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Per-row standardization followed by an elementwise affine map.
/// Returns `(output, normalized, inverse_std)`.
fn layer_norm_forward(
    x: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    eps: f64,
) -> (Matrix, Matrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        let h = xhat.row_mut(i);
        for (h, &v) in h.iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        let h = xhat.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = h[j] * gain.as_slice()[j] + bias.as_slice()[j];
        }
    }
    (out, xhat, inv_std)
}

/// Plain-matrix layer norm, no tape.
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<Matrix> {
    check_ln_shapes(x, gain, bias)?;
    Ok(layer_norm_forward(x, gain, bias, eps).0)
}

fn check_ln_shapes(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<()> {
    if gain.shape() != (1, x.cols()) {
        return Err(Error::dim("layer_norm gain", x.shape(), gain.shape()));
    }
    if bias.shape() != (1, x.cols()) {
        return Err(Error::dim("layer_norm bias", x.shape(), bias.shape()));
    }
    Ok(())
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var, usize, usize),
    Bce(Var, f64),
    MeanScalars(Vec<Var>),
    /// Per-group multi-head attention; `probs[group * heads + head]`.
    GroupedAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        tokens: usize,
        factor: f64,
        probs: Vec<Matrix>,
    },
    BceMean(Var, Vec<f64>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass; see the module docs.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it required one and
    /// was reached.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    /// Gradients of trainable parameters touched by the forward pass.
    pub fn params(&self) -> &[(ParamId, Matrix)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.value(id),
            _ => &node.value,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// gradients from every use land in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let trainable = self.store.get(id).trainable;
        let v = self.push(Matrix::zeros(0, 0), Op::Param(id), trainable);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × cols` row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|x| kind.apply(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Act(a, kind), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        check_ln_shapes(self.value(x), self.value(gain), self.value(bias))?;
        let (out, xhat, inv_std) =
            layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row softmax of `logits + mask` with `-inf` mask entries excluded.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Matrix) -> Result<Var> {
        let out = masked_row_softmax(self.value(logits), mask)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::MaskedSoftmax(logits), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Matrix::concat_rows(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Matrix::concat_cols(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean of rows `start..start + len` as a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).mean_rows(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows(a, start, len), rg))
    }

    /// Binary cross-entropy of a `1 × 1` logit against a 0/1 label.
    pub fn bce(&mut self, logit: Var, label: f64) -> Result<Var> {
        let l = self.value(logit);
        if l.shape() != (1, 1) {
            return Err(Error::dim("bce", l.shape(), (1, 1)));
        }
        let out = Matrix::filled(1, 1, bce_with_logit(l[(0, 0)], label));
        let rg = self.rg(&[logit]);
        Ok(self.push(out, Op::Bce(logit, label), rg))
    }

    /// Mean of `1 × 1` scalars.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("mean_scalars", (0, 0), (1, 1)));
        }
        let mut sum = 0.0;
        for &p in parts {
            let v = self.value(p);
            if v.shape() != (1, 1) {
                return Err(Error::dim("mean_scalars", v.shape(), (1, 1)));
            }
            sum += v[(0, 0)];
        }
        let out = Matrix::filled(1, 1, sum / parts.len() as f64);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::MeanScalars(parts.to_vec()), rg))
    }

    /// Multi-head attention applied independently to consecutive groups of
    /// `tokens` rows. `q`, `k`, `v` are `(groups·tokens) × width` with heads
    /// laid out as contiguous column blocks. Each head computes
    /// `softmax(factor · q kᵀ + mask) · v` within its group; head outputs are
    /// returned side by side in the same layout.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &Matrix,
        factor: f64,
    ) -> Result<Var> {
        let tokens = mask.rows();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::dim("grouped_attention", kv.shape(), qv.shape()));
        }
        if mask.cols() != tokens || tokens == 0 || rows % tokens != 0 {
            return Err(Error::dim("grouped_attention mask", mask.shape(), (rows, rows)));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::dim("grouped_attention heads", (heads, width), (heads, heads)));
        }
        let hd = width / heads;
        let mut out = Matrix::zeros(rows, width);
        let mut probs = Vec::with_capacity(rows / tokens * heads);
        let mut scores = Matrix::zeros(tokens, tokens);
        for g in 0..rows / tokens {
            let r0 = g * tokens;
            for h in 0..heads {
                let c = h * hd..(h + 1) * hd;
                for i in 0..tokens {
                    let qi = &qv.row(r0 + i)[c.clone()];
                    for j in 0..tokens {
                        scores.row_mut(i)[j] = dot(qi, &kv.row(r0 + j)[c.clone()]) * factor;
                    }
                }
                let p = masked_row_softmax(&scores, mask)?;
                for i in 0..tokens {
                    let o = &mut out.row_mut(r0 + i)[c.clone()];
                    for (j, &pij) in p.row(i).iter().enumerate() {
                        if pij != 0.0 {
                            axpy(pij, &vv.row(r0 + j)[c.clone()], o);
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::GroupedAttention {
                q,
                k,
                v,
                heads,
                tokens,
                factor,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights of one group and head from a
    /// [`grouped_attention`](Self::grouped_attention) node.
    pub fn attention_probs(&self, node: Var, group: usize, head: usize) -> Option<&Matrix> {
        match &self.nodes[node.0].op {
            Op::GroupedAttention { heads, probs, .. } if head < *heads => probs.get(group * heads + head),
            _ => None,
        }
    }

    /// Mean binary cross-entropy of a column of logits against 0/1 labels.
    pub fn bce_mean(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let l = self.value(logits);
        if l.shape() != (labels.len(), 1) || labels.is_empty() {
            return Err(Error::dim("bce_mean", l.shape(), (labels.len(), 1)));
        }
        let sum: f64 = l.as_slice().iter().zip(labels).map(|(&x, &y)| bce_with_logit(x, y)).sum();
        let out = Matrix::filled(1, 1, sum / labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::BceMean(logits, labels.to_vec()), rg))
    }

    /// Reverse sweep from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::dim("backward", lv.shape(), (1, 1)));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[idx]) {
                params.push((*id, g.clone()));
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    let ga = g.matmul_t(self.value(b))?;
                    accumulate(grads, a, ga)?;
                }
                if self.wants(b) {
                    let gb = self.value(a).t_matmul(g)?;
                    accumulate(grads, b, gb)?;
                }
            }
            &Op::MatMulT(a, b) => {
                // out = a·bᵀ: grad_a = g·b, grad_b = gᵀ·a
                if self.wants(a) {
                    let ga = g.matmul(self.value(b))?;
                    accumulate(grads, a, ga)?;
                }
                if self.wants(b) {
                    let gb = g.t_matmul(self.value(a))?;
                    accumulate(grads, b, gb)?;
                }
            }
            &Op::Transpose(a) => {
                if self.wants(a) {
                    accumulate(grads, a, g.transpose())?;
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.wants(b) {
                    accumulate(grads, b, g.clone())?;
                }
            }
            &Op::AddRow(a, row) => {
                if self.wants(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if self.wants(row) {
                    accumulate(grads, row, column_sums(g))?;
                }
            }
            &Op::Scale(a, s) => {
                if self.wants(a) {
                    accumulate(grads, a, g.scale(s))?;
                }
            }
            &Op::Act(a, kind) => {
                if self.wants(a) {
                    let x = self.value(a);
                    let mut ga = g.clone();
                    for (gi, &xi) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *gi *= kind.derivative(xi);
                    }
                    accumulate(grads, a, ga)?;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_v = self.value(*gain);
                if self.wants(*x) {
                    let n = g.cols() as f64;
                    let mut gx = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let dxhat: Vec<f64> = g
                            .row(i)
                            .iter()
                            .zip(gain_v.as_slice())
                            .map(|(a, b)| a * b)
                            .collect();
                        let h = xhat.row(i);
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh = dot(&dxhat, h);
                        let scale = inv_std[i] / n;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = scale * (n * dxhat[j] - sum_d - h[j] * sum_dh);
                        }
                    }
                    accumulate(grads, *x, gx)?;
                }
                if self.wants(*gain) {
                    accumulate(grads, *gain, column_sums(&g.hadamard(xhat)?))?;
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, column_sums(g))?;
                }
            }
            &Op::MaskedSoftmax(a) => {
                if self.wants(a) {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner = dot(gr, yr);
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(grads, a, ga)?;
                }
            }
            &Op::SliceRows(a, start) => {
                if self.wants(a) {
                    let src = self.value(a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate(grads, a, ga)?;
                }
            }
            &Op::SliceCols(a, start) => {
                if self.wants(a) {
                    let src = self.value(a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(grads, a, ga)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        accumulate(grads, p, g.slice_rows(offset, rows)?)?;
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.wants(p) {
                        accumulate(grads, p, g.slice_cols(offset, cols)?)?;
                    }
                    offset += cols;
                }
            }
            &Op::MeanRows(a, start, len) => {
                if self.wants(a) {
                    let src = self.value(a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    let inv = 1.0 / len as f64;
                    for i in start..start + len {
                        axpy(inv, g.as_slice(), ga.row_mut(i));
                    }
                    accumulate(grads, a, ga)?;
                }
            }
            &Op::Bce(logit, label) => {
                if self.wants(logit) {
                    let l = self.value(logit)[(0, 0)];
                    let d = (sigmoid(l) - label) * g[(0, 0)];
                    accumulate(grads, logit, Matrix::filled(1, 1, d))?;
                }
            }
            Op::MeanScalars(parts) => {
                let d = g[(0, 0)] / parts.len() as f64;
                for &p in parts {
                    if self.wants(p) {
                        accumulate(grads, p, Matrix::filled(1, 1, d))?;
                    }
                }
            }
            Op::GroupedAttention {
                q,
                k,
                v,
                heads,
                tokens,
                factor,
                probs,
            } => {
                let (q, k, v, t) = (*q, *k, *v, *tokens);
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let (rows, width) = g.shape();
                let hd = width / heads;
                let mut gq = Matrix::zeros(rows, width);
                let mut gk = Matrix::zeros(rows, width);
                let mut gv = Matrix::zeros(rows, width);
                let mut ds = vec![0.0; t * t];
                for grp in 0..rows / t {
                    let r0 = grp * t;
                    for h in 0..*heads {
                        let c = h * hd..(h + 1) * hd;
                        let p = &probs[grp * heads + h];
                        // dV = Pᵀ dO; dP = dO Vᵀ; dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        for i in 0..t {
                            let go = &g.row(r0 + i)[c.clone()];
                            let pi = p.row(i);
                            let mut inner = 0.0;
                            for j in 0..t {
                                if pi[j] != 0.0 {
                                    axpy(pi[j], go, &mut gv.row_mut(r0 + j)[c.clone()]);
                                }
                                let dp = dot(go, &vv.row(r0 + j)[c.clone()]);
                                ds[i * t + j] = dp;
                                inner += dp * pi[j];
                            }
                            for j in 0..t {
                                ds[i * t + j] = pi[j] * (ds[i * t + j] - inner) * factor;
                            }
                        }
                        for i in 0..t {
                            for j in 0..t {
                                let s = ds[i * t + j];
                                if s != 0.0 {
                                    axpy(s, &kv.row(r0 + j)[c.clone()], &mut gq.row_mut(r0 + i)[c.clone()]);
                                    axpy(s, &qv.row(r0 + i)[c.clone()], &mut gk.row_mut(r0 + j)[c.clone()]);
                                }
                            }
                        }
                    }
                }
                for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
                    if self.wants(var) {
                        accumulate(grads, var, grad)?;
                    }
                }
            }
            Op::BceMean(logits, labels) => {
                if self.wants(*logits) {
                    let l = self.value(*logits);
                    let scale = g[(0, 0)] / labels.len() as f64;
                    let d: Vec<f64> = l.as_slice().iter().zip(labels).map(|(&x, &y)| (sigmoid(x) - y) * scale).collect();
                    accumulate(grads, *logits, Matrix::from_vec(labels.len(), 1, d)?)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        axpy(1.0, g.row(i), out.as_mut_slice());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const NEG_INF: f64 = f64::NEG_INFINITY;

    #[test]
    fn softmax_uniform() {
        let out = masked_row_softmax(
            &Matrix::from_rows(&[[0.0, 0.0]]),
            &Matrix::from_rows(&[[0.0, 0.0]]),
        )
        .unwrap();
        assert_eq!(out, Matrix::from_rows(&[[0.5, 0.5]]));
    }

    #[test]
    fn softmax_single_unmasked_key() {
        let out = masked_row_softmax(
            &Matrix::from_rows(&[[9.0, 5.0]]),
            &Matrix::from_rows(&[[0.0, NEG_INF]]),
        )
        .unwrap();
        assert_eq!(out, Matrix::from_rows(&[[1.0, 0.0]]));
    }

    #[test]
    fn softmax_two_way_analytic() {
        let out = masked_row_softmax(
            &Matrix::from_rows(&[[2f64.ln(), 0.0, 7.0]]),
            &Matrix::from_rows(&[[0.0, 0.0, NEG_INF]]),
        )
        .unwrap();
        assert!((out[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(out[(0, 2)], 0.0);
    }

    #[test]
    fn softmax_all_masked_row_is_an_error() {
        let err = masked_row_softmax(
            &Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]),
            &Matrix::from_rows(&[[0.0, 0.0], [NEG_INF, NEG_INF]]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn activations_at_reference_points() {
        let x = Matrix::row_vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(
            x.map(|v| Activation::Relu.apply(v)),
            Matrix::row_vector(&[0.0, 0.0, 2.0])
        );
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Matrix::from_rows(&[[3.0, 3.0, 3.0]]);
        let out = layer_norm(&x, &Matrix::filled(1, 3, 1.0), &Matrix::zeros(1, 3), 1e-5).unwrap();
        assert_eq!(out, Matrix::zeros(1, 3));
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let x = Matrix::from_rows(&[[1.0, 3.0]]);
        let out = layer_norm(&x, &Matrix::filled(1, 2, 1.0), &Matrix::zeros(1, 2), 1e-14).unwrap();
        assert!((out[(0, 0)] + 1.0).abs() < 1e-12);
        assert!((out[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bce_reference_values() {
        assert!(bce_with_logit(800.0, 1.0).abs() < 1e-300);
        assert!((bce_with_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_with_logit(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logit(-800.0, 1.0).is_finite());
    }

    #[test]
    fn frozen_and_unused_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Matrix::from_rows(&[[2.0]]), true);
        let frozen = store.add("frozen", Matrix::from_rows(&[[3.0]]), false);
        let unused = store.add("unused", Matrix::from_rows(&[[5.0]]), true);
        let mut tape = Tape::new(&store);
        let a = tape.param(used);
        let b = tape.param(frozen);
        let _ = tape.param(unused);
        let y = tape.matmul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(used).unwrap()[(0, 0)], 3.0);
        assert!(g.param(frozen).is_none());
        assert!(g.param(unused).is_none());
    }

    #[test]
    fn shared_param_accumulates_both_uses() {
        let mut store = ParamStore::new();
        let t = store.add("t", Matrix::from_rows(&[[3.0]]), true);
        let mut tape = Tape::new(&store);
        let a = tape.param(t);
        let b = tape.param(t);
        assert_eq!(a, b);
        let y = tape.matmul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(t).unwrap()[(0, 0)], 6.0);
    }
}
