//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes only reference earlier nodes, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    WeightedSum(Var, Vec<f64>),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op output shape is consistent");
        self.push_raw(value, op, requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes its operand.
    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), a_t, self.data(b), b_t, &mut out, false);
        let op = Op::MatMul {
            a,
            b,
            a_t,
            b_t,
            m,
            k,
            n,
        };
        Ok(self.push(vec![m, n], out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row).to_vec();
        let out = self.data(x).iter().enumerate().map(|(i, v)| v + r[i % c]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * s).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), &[x]))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v + s).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), &[x]))
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| ops::gelu(v)).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| ops::sigmoid(v)).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.exp()).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Exp(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.data(x).iter().find(|&&v| v <= 0.0) {
            return Err(Error::Contract(format!("log of non-positive value {bad}")));
        }
        let out = self.data(x).iter().map(|v| v.ln()).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Log(x), &[x]))
    }

    /// Softmax along the last axis, stabilised by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            ops::softmax_in_place(row);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), &[x]))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = self.value(x).rows();
        let mut xhat = Vec::with_capacity(rows * c);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        for row in self.data(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x, gain, bias]))
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < ops::DEGENERATE_NORM {
                return Err(Error::Degenerate {
                    context: "normalize_rows".into(),
                    norm: n,
                });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let op = Op::NormalizeRows { x, norms };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        Ok(self.push(vec![1], vec![s], Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        Ok(self.push(vec![1], vec![s], Op::Mean(x), &[x]))
    }

    /// Mean over rows: `[R×C] -> [1×C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let r = self.value(x).rows();
        let mut out = vec![0.0; c];
        for row in self.data(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(vec![1, c], out, Op::MeanRows(x), &[x]))
    }

    /// `sum(x ⊙ w)` for a constant weight array of the same length.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = self.data(x).iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(vec![1], vec![s], Op::WeightedSum(x, weights), &[x]))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`. Covers reshape,
    /// row/column selection, broadcasting by repetition and patch extraction.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let src = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(shape, out, Op::Gather { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != n {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        self.gather(x, (0..n).collect(), shape)
    }

    /// Selects rows (last axis kept) into a `[rows.len() × C]` matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let c = self.value(x).cols();
        let r = self.value(x).rows();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row {bad} out of range ({r} rows)")));
        }
        let index = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(x, index, vec![rows.len(), c])
    }

    /// Stacks inputs along the row axis; vectors count as single rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("empty concat".into()))?;
        let c = self.value(first).cols();
        let mut out = Vec::new();
        for &x in xs {
            if self.value(x).cols() != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(x)));
            }
            out.extend_from_slice(self.data(x));
        }
        let rows = out.len() / c;
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// Joins inputs side by side; all must have the same row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("empty concat".into()))?;
        let r = self.value(first).rows();
        let mut total = 0;
        for &x in xs {
            if self.value(x).rows() != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
            total += self.value(x).cols();
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        Ok(self.push(vec![r, total], out, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences stacked along the rows. `q` is `[groups·Tq × d]`, `k` and `v`
    /// are `[groups·Tk × d]`; heads split the feature axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var> {
        let (qr, d) = self.matrix_dims(q, "attention")?;
        let (kr, kd) = self.matrix_dims(k, "attention")?;
        self.same_shape(k, v, "attention")?;
        if kd != d {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        if groups == 0 || qr % groups != 0 || kr % groups != 0 {
            return Err(Error::Config(format!("{groups} groups do not divide rows {qr}/{kr}")));
        }
        let (tq, tk, dh) = (qr / groups, kr / groups, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd_, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; groups * heads * tq * tk];
        let mut out = vec![0.0; qr * d];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qrow = &qd[(g * tq + i) * d + off..][..dh];
                    let p = &mut probs[((g * heads + h) * tq + i) * tk..][..tk];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &kd_[(g * tk + j) * d + off..][..dh];
                        *pj = ops::dot(qrow, krow) * scale;
                    }
                    ops::softmax_in_place(p);
                    let orow = &mut out[(g * tq + i) * d + off..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = &vd[(g * tk + j) * d + off..][..dh];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += pj * x);
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            groups,
            probs,
        };
        Ok(self.push(vec![qr, d], out, op, &[q, k, v]))
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid out
    /// as `[groups][heads][Tq][Tk]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of each logit row against its class label.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let c = self.value(logits).cols();
        let r = self.value(logits).rows();
        if labels.len() != r {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} outside [0,{c})")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            loss -= ops::log_softmax_at(row, l);
            ops::softmax_in_place(row);
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss / r as f64], op, &[logits]))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and soft targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Contract(format!("BCE target {bad} outside [0,1]")));
        }
        let n = targets.len() as f64;
        let loss = self
            .data(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Cosine similarity of two equal-length vectors as a scalar node.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).len();
        if self.value(b).len() != d {
            return Err(Error::shape("cosine_sim", self.shape(a), self.shape(b)));
        }
        let a2 = self.reshape(a, vec![1, d])?;
        let b2 = self.reshape(b, vec![1, d])?;
        let an = self.normalize_rows(a2)?;
        let bn = self.normalize_rows(b2)?;
        let s = self.matmul_t(an, false, bn, true)?;
        self.reshape(s, vec![1])
    }

    /// `x · w + b` with `w` stored `[in × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Non-overlapping 3D patch embedding (a Conv3D whose stride equals its
    /// kernel): `[D×H×W]` volume to `[tokens × out]` with `weight` stored
    /// `[p_D·p_H·p_W × out]`.
    pub fn conv3d(&mut self, volume: Var, weight: Var, bias: Option<Var>, patch: [usize; 3]) -> Result<Var> {
        let dims: [usize; 3] = self
            .shape(volume)
            .try_into()
            .map_err(|_| Error::shape("conv3d", self.shape(volume), &[0, 0, 0]))?;
        let (index, tokens, pvol) = ops::patch_index_3d(dims, patch)?;
        let patches = self.gather(volume, index, vec![tokens, pvol])?;
        self.linear(patches, weight, bias)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// that requires one and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape matches value"))
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![0.0; len(v)])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if needs(&a) {
                    let ga = buf!(a);
                    if a_t {
                        gemm(k, n, m, bd, b_t, g, true, ga, true);
                    } else {
                        gemm(m, n, k, g, false, bd, !b_t, ga, true);
                    }
                }
                if needs(&b) {
                    let gb = buf!(b);
                    if b_t {
                        gemm(n, m, k, g, true, ad, a_t, gb, true);
                    } else {
                        gemm(k, m, n, ad, !a_t, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    add_into(buf!(*a), g);
                }
                if needs(b) {
                    add_into(buf!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    add_into(buf!(*a), g);
                }
                if needs(b) {
                    buf!(*b).iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if needs(a) {
                    for ((d, g), y) in buf!(*a).iter_mut().zip(g).zip(bd) {
                        *d += g * y;
                    }
                }
                if needs(b) {
                    for ((d, g), x) in buf!(*b).iter_mut().zip(g).zip(ad) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if needs(x) {
                    add_into(buf!(*x), g);
                }
                if needs(row) {
                    let gr = buf!(*row);
                    let c = gr.len();
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(x, s) => {
                if needs(x) {
                    buf!(*x).iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
                }
            }
            Op::AddScalar(x) => {
                if needs(x) {
                    add_into(buf!(*x), g);
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                for ((d, g), v) in buf!(*x).iter_mut().zip(g).zip(xd) {
                    if *v > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                for ((d, g), &v) in buf!(*x).iter_mut().zip(g).zip(xd) {
                    *d += g * ops::gelu_grad(v);
                }
            }
            Op::Sigmoid(x) => {
                for ((d, g), y) in buf!(*x).iter_mut().zip(g).zip(out) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Exp(x) => {
                for ((d, g), y) in buf!(*x).iter_mut().zip(g).zip(out) {
                    *d += g * y;
                }
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                for ((d, g), v) in buf!(*x).iter_mut().zip(g).zip(xd) {
                    *d += g / v;
                }
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let gx = buf!(*x);
                for ((dx, gy), y) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let s = ops::dot(gy, y);
                    for j in 0..c {
                        dx[j] += y[j] * (gy[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gd = self.data(*gain);
                if needs(gain) {
                    let gg = buf!(*gain);
                    for (gy, h) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gy[j] * h[j];
                        }
                    }
                }
                if needs(bias) {
                    let gb = buf!(*bias);
                    for gy in g.chunks(c) {
                        add_into(gb, gy);
                    }
                }
                if needs(x) {
                    let gx = buf!(*x);
                    let cf = c as f64;
                    for (r, ((dx, gy), h)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gy[j] * gd[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..c {
                            let dh = gy[j] * gd[j];
                            dx[j] += inv / cf * (cf * dh - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let gx = buf!(*x);
                for (r, ((dx, gy), y)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)).enumerate() {
                    let s = ops::dot(gy, y);
                    for j in 0..c {
                        dx[j] += (gy[j] - y[j] * s) / norms[r];
                    }
                }
            }
            Op::Sum(x) => {
                buf!(*x).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let gx = buf!(*x);
                let n = gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::MeanRows(x) => {
                let gx = buf!(*x);
                let c = g.len();
                let r = (gx.len() / c) as f64;
                for chunk in gx.chunks_mut(c) {
                    chunk.iter_mut().zip(g).for_each(|(d, g)| *d += g / r);
                }
            }
            Op::WeightedSum(x, w) => {
                buf!(*x).iter_mut().zip(w).for_each(|(d, w)| *d += g[0] * w);
            }
            Op::Gather { x, index } => {
                let gx = buf!(*x);
                for (&j, gv) in index.iter().zip(g) {
                    gx[j] += gv;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = self.value(*x).len();
                    if needs(x) {
                        add_into(buf!(*x), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut col = 0;
                for x in xs {
                    let c = self.value(*x).cols();
                    if needs(x) {
                        let gx = buf!(*x);
                        for (r, dx) in gx.chunks_mut(c).enumerate() {
                            add_into(dx, &g[r * total + col..r * total + col + c]);
                        }
                    }
                    col += c;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => self.attention_backward((*q, *k, *v), (*heads, *groups), probs, g, grads),
            Op::CrossEntropy { logits, labels, probs } => {
                let cols = self.value(*logits).cols();
                let r = labels.len() as f64;
                let gx = buf!(*logits);
                for (row, (dx, p)) in gx.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                    for j in 0..cols {
                        let y = if j == labels[row] { 1.0 } else { 0.0 };
                        dx[j] += g[0] * (p[j] - y) / r;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let zd = self.data(*logits);
                let n = targets.len() as f64;
                for ((d, &z), y) in buf!(*logits).iter_mut().zip(zd).zip(targets) {
                    *d += g[0] * (ops::sigmoid(z) - y) / n;
                }
            }
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        (heads, groups): (usize, usize),
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).cols();
        let tq = self.value(q).rows() / groups;
        let tk = self.value(k).rows() / groups;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; tk];
        for gi in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let p = &probs[((gi * heads + h) * tq + i) * tk..][..tk];
                    let go = &g[(gi * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        let vrow = &vd[(gi * tk + j) * d + off..][..dh];
                        dp[j] = ops::dot(go, vrow);
                        let gvrow = &mut gv[(gi * tk + j) * d + off..][..dh];
                        gvrow.iter_mut().zip(go).for_each(|(a, b)| *a += p[j] * b);
                    }
                    let s = ops::dot(&dp, p);
                    let qrow = &qd[(gi * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kd[(gi * tk + j) * d + off..][..dh];
                        let gqrow = &mut gq[(gi * tq + i) * d + off..][..dh];
                        gqrow.iter_mut().zip(krow).for_each(|(a, b)| *a += ds * b);
                        let gkrow = &mut gk[(gi * tk + j) * d + off..][..dh];
                        gkrow.iter_mut().zip(qrow).for_each(|(a, b)| *a += ds * b);
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                let n = local.len();
                add_into(grads[var.0].get_or_insert_with(|| vec![0.0; n]), &local);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
