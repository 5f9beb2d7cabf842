//! Define-by-run reverse-mode autodiff over a fixed set of tensor ops.
//!
//! A [`Graph`] is an append-only list of nodes. Every op pushes one node
//! holding its output value, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Gradients are only
//! materialized for nodes that depend on a `requires_grad` leaf, which keeps
//! frozen weights out of the backward pass entirely.

use crate::error::{Error, Result};
use crate::linalg::{gemm, matmul, View};
use crate::spectral::TokenSplitter;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    MeanGroups {
        input: Var,
        group_rows: usize,
    },
    ScaleBy {
        input: Var,
        factor: Var,
    },
    ScaleGroups {
        input: Var,
        weights: Var,
        group_rows: usize,
        column: usize,
    },
    Attention {
        qkv: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Frequency {
        input: Var,
        splitter: Box<TokenSplitter>,
        keep_low: bool,
    },
    Upsample {
        input: Var,
        batch: usize,
        grid: usize,
        patch: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(data, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Adds a length-`c` bias to every row of an `r × c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_bias")?;
        if self.value(bias).numel() != c {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.needs(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| gelu(x).0);
        let rg = self.needs(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Range {
                name: "axis",
                detail: format!("axis {axis} for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(a).data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| out[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (out[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Softmax {
                input: a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let xh = (row[j] - mean) * s;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[r, c], out)?,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows whose label is not `ignore`.
    ///
    /// Returns the scalar loss and the number of rows counted. When every
    /// row is ignored the loss is defined as 0 and the count is 0.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore: usize) -> Result<(Var, usize)> {
        let (p, k) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != p {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; p * k];
        let mut total = 0.0;
        let mut count = 0;
        for (i, &label) in labels.iter().enumerate() {
            if label == ignore {
                continue;
            }
            if label >= k {
                return Err(Error::Range {
                    name: "label",
                    detail: format!("label {label} with {k} classes"),
                });
            }
            let row = &src[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            total += z.ln() + max - row[label];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.needs(&[logits]);
        let v = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        );
        Ok((v, count))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Averages each block of `group_rows` consecutive rows: `(g·n) × c → g × c`.
    pub fn mean_groups(&mut self, x: Var, group_rows: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_groups")?;
        if group_rows == 0 || r % group_rows != 0 {
            return Err(Error::shape("mean_groups", &[r, c], &[group_rows]));
        }
        let groups = r / group_rows;
        let src = self.value(x).data();
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            for row in src[g * group_rows * c..(g + 1) * group_rows * c].chunks_exact(c) {
                for (o, v) in out[g * c..(g + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / group_rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[groups, c], out)?, Op::MeanGroups { input: x, group_rows }, rg))
    }

    /// Multiplies `x` by a single-element tensor.
    pub fn scale_by(&mut self, x: Var, factor: Var) -> Result<Var> {
        if self.value(factor).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(factor)));
        }
        let s = self.value(factor).data()[0];
        let t = self.value(x).map(|v| v * s);
        let rg = self.needs(&[x, factor]);
        Ok(self.push(t, Op::ScaleBy { input: x, factor }, rg))
    }

    /// Scales each block of `group_rows` rows of `x` by `weights[group, column]`.
    pub fn scale_groups(&mut self, x: Var, weights: Var, group_rows: usize, column: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "scale_groups")?;
        let (g, k) = self.dims2(weights, "scale_groups")?;
        if group_rows == 0 || g * group_rows != r || column >= k {
            return Err(Error::shape("scale_groups", &[r, c], &[g, k]));
        }
        let w = self.value(weights).data();
        let mut out = self.value(x).data().to_vec();
        for (row_idx, row) in out.chunks_exact_mut(c).enumerate() {
            let s = w[(row_idx / group_rows) * k + column];
            row.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.needs(&[x, weights]);
        Ok(self.push(
            Tensor::new(&[r, c], out)?,
            Op::ScaleGroups {
                input: x,
                weights,
                group_rows,
                column,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `(batch·n) × 3c` with query, key and value blocks side by
    /// side; the output is `(batch·n) × c`. Tokens only attend within their
    /// own image.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.dims2(qkv, "attention")?;
        if batch == 0 || rows % batch != 0 || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(Error::shape("attention", &[rows, width], &[batch, heads]));
        }
        let n = rows / batch;
        let c = width / 3;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![0.0; batch * heads * n * n];
        let mut out = vec![0.0; rows * c];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * n * width;
                let q = View {
                    data: src,
                    offset: base + h * dh,
                    rows: n,
                    cols: dh,
                    row_stride: width,
                    col_stride: 1,
                };
                let k = View {
                    offset: base + c + h * dh,
                    ..q
                };
                let v = View {
                    offset: base + 2 * c + h * dh,
                    ..q
                };
                let p_off = (b * heads + h) * n * n;
                let p = &mut probs[p_off..p_off + n * n];
                gemm(scale, q, k.t(), 0.0, p, 0, n, 1);
                for row in p.chunks_exact_mut(n) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - max).exp();
                        total += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= total);
                }
                let pv = View::dense(&probs[p_off..p_off + n * n], n, n);
                gemm(1.0, pv, v, 0.0, &mut out, b * n * c + h * dh, c, 1);
            }
        }
        let rg = self.needs(&[qkv]);
        Ok(self.push(
            Tensor::new(&[rows, c], out)?,
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, laid
    /// out as `batch × heads × n × n`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Low- or high-frequency component of a token matrix. The projection is
    /// linear and self-adjoint, so its backward applies the same projection
    /// to the incoming gradient.
    pub fn frequency(&mut self, x: Var, splitter: &TokenSplitter, keep_low: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = splitter.project(self.value(x).data(), keep_low)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Frequency {
                input: x,
                splitter: Box::new(splitter.clone()),
                keep_low,
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of per-token rows to per-pixel rows.
    ///
    /// Input is `(batch·grid²) × k`, output `(batch·(grid·patch)²) × k` with
    /// pixels in row-major order per image.
    pub fn upsample(&mut self, x: Var, batch: usize, grid: usize, patch: usize) -> Result<Var> {
        let (r, k) = self.dims2(x, "upsample")?;
        if r != batch * grid * grid {
            return Err(Error::shape("upsample", &[r, k], &[batch, grid, grid]));
        }
        let side = grid * patch;
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * side * side * k];
        for b in 0..batch {
            for y in 0..side {
                for xp in 0..side {
                    let t = b * grid * grid + (y / patch) * grid + xp / patch;
                    let p = (b * side + y) * side + xp;
                    out[p * k..(p + 1) * k].copy_from_slice(&src[t * k..(t + 1) * k]);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[batch * side * side, k], out)?,
            Op::Upsample {
                input: x,
                batch,
                grid,
                patch,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[idx].value;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let gv = View::dense(g, m, n);
                if let Some(ga) = acc!(*a) {
                    let bv = View::dense(nodes[b.0].value.data(), k, n);
                    gemm(1.0, gv, bv.t(), 1.0, ga, 0, k, 1);
                }
                if let Some(gb) = acc!(*b) {
                    let av = View::dense(nodes[a.0].value.data(), m, k);
                    gemm(1.0, av.t(), gv, 1.0, gb, 0, n, 1);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = acc!(*a) {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc!(*a) {
                    for ((d, gi), bv) in ga.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                        *d += gi * bv;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((d, gi), av) in gb.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *d += gi * av;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = acc!(*a) {
                    for (d, gi) in ga.iter_mut().zip(g) {
                        *d += gi * f;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc!(*bias) {
                    let c = gb.len();
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = acc!(*a) {
                    for ((d, gi), x) in ga.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = acc!(*a) {
                    for ((d, gi), x) in ga.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *d += gi * gelu(*x).1;
                    }
                }
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                if let Some(ga) = acc!(*input) {
                    let y = out.data();
                    for o in 0..*outer {
                        for j in 0..*inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..*len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..*len {
                                ga[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = nodes[gamma.0].value.numel();
                let gam = nodes[gamma.0].value.data();
                if let Some(gg) = acc!(*gamma) {
                    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*beta) {
                    for gr in g.chunks_exact(c) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = acc!(*input) {
                    for (i, (gr, xr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xr[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            gx[i * c + j] += rstd[i] * (d - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                if let Some(gl) = acc!(*logits) {
                    let k = probs.len() / labels.len();
                    let s = g[0] / *count as f64;
                    for (i, &label) in labels.iter().enumerate() {
                        if label == *ignore {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[i * k + j] += s * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanGroups { input, group_rows } => {
                if let Some(gx) = acc!(*input) {
                    let c = out.shape()[1];
                    let inv = 1.0 / *group_rows as f64;
                    for (r, row) in gx.chunks_exact_mut(c).enumerate() {
                        let src = &g[(r / group_rows) * c..(r / group_rows + 1) * c];
                        for (d, s) in row.iter_mut().zip(src) {
                            *d += s * inv;
                        }
                    }
                }
            }
            Op::ScaleBy { input, factor } => {
                let s = nodes[factor.0].value.data()[0];
                if let Some(gx) = acc!(*input) {
                    for (d, gi) in gx.iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
                if let Some(gf) = acc!(*factor) {
                    gf[0] += g.iter().zip(nodes[input.0].value.data()).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::ScaleGroups {
                input,
                weights,
                group_rows,
                column,
            } => {
                let c = out.shape()[1];
                let k = nodes[weights.0].value.shape()[1];
                let w = nodes[weights.0].value.data();
                if let Some(gx) = acc!(*input) {
                    for (r, row) in gx.chunks_exact_mut(c).enumerate() {
                        let s = w[(r / group_rows) * k + column];
                        for (d, gi) in row.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += gi * s;
                        }
                    }
                }
                if let Some(gw) = acc!(*weights) {
                    let x = nodes[input.0].value.data();
                    for (r, (gr, xr)) in g.chunks_exact(c).zip(x.chunks_exact(c)).enumerate() {
                        gw[(r / group_rows) * k + column] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            } => {
                let Some(gq) = acc!(*qkv) else { return };
                let src = nodes[qkv.0].value.data();
                let width = nodes[qkv.0].value.shape()[1];
                let c = width / 3;
                let n = out.shape()[0] / batch;
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dp = vec![0.0; n * n];
                for b in 0..*batch {
                    for h in 0..*heads {
                        let base = b * n * width;
                        let col = |block: usize| base + block * c + h * dh;
                        let strided = |offset: usize| View {
                            data: src,
                            offset,
                            rows: n,
                            cols: dh,
                            row_stride: width,
                            col_stride: 1,
                        };
                        let p_off = (b * heads + h) * n * n;
                        let p = View::dense(&probs[p_off..p_off + n * n], n, n);
                        let go = View {
                            data: g,
                            offset: b * n * c + h * dh,
                            rows: n,
                            cols: dh,
                            row_stride: c,
                            col_stride: 1,
                        };
                        // dV = Pᵀ·dO
                        gemm(1.0, p.t(), go, 1.0, gq, col(2), width, 1);
                        // dP = dO·Vᵀ, then through the row softmax
                        gemm(1.0, go, strided(col(2)).t(), 0.0, &mut dp, 0, n, 1);
                        let pr = &probs[p_off..p_off + n * n];
                        for (drow, prow) in dp.chunks_exact_mut(n).zip(pr.chunks_exact(n)) {
                            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (d, pv) in drow.iter_mut().zip(prow) {
                                *d = pv * (*d - dot);
                            }
                        }
                        let ds = View::dense(&dp, n, n);
                        // dQ = dS·K·scale, dK = dSᵀ·Q·scale
                        gemm(scale, ds, strided(col(1)), 1.0, gq, col(0), width, 1);
                        gemm(scale, ds.t(), strided(col(0)), 1.0, gq, col(1), width, 1);
                    }
                }
            }
            Op::Frequency {
                input,
                splitter,
                keep_low,
            } => {
                if let Some(gx) = acc!(*input) {
                    let back = splitter
                        .project(g, *keep_low)
                        .expect("frequency backward on a validated shape");
                    add_into(gx, &back);
                }
            }
            Op::Upsample {
                input,
                batch,
                grid,
                patch,
            } => {
                if let Some(gx) = acc!(*input) {
                    let k = out.shape()[1];
                    let side = grid * patch;
                    for b in 0..*batch {
                        for y in 0..side {
                            for xp in 0..side {
                                let t = b * grid * grid + (y / patch) * grid + xp / patch;
                                let p = (b * side + y) * side + xp;
                                add_into(&mut gx[t * k..(t + 1) * k], &g[p * k..(p + 1) * k]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// tanh-approximated GELU and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = K * (x + A * x * x * x);
    let t = 1.0 - 2.0 / (1.0 + (2.0 * u).exp());
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
    (y, dy)
}
