//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and enough
//! context to apply its local backward rule. [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because a node can only reference nodes created before it.
//!
//! Leaves created with [`Tape::param`] carry a gradient slot. Gradients in
//! those slots accumulate across `backward` calls until
//! [`Tape::zero_grads`] is invoked.

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a fused causal self-attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
        seq: usize,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations for one forward pass and replays them backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Row-wise softmax of a plain tensor along its last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let d = x.last_dim();
    if d > 0 {
        for r in 0..x.rows() {
            softmax_row(x.row(r), out.row_mut(r));
        }
    }
    out
}

/// Row-wise log-softmax of a plain tensor along its last axis.
pub fn log_softmax_last(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let d = x.last_dim();
    if d > 0 {
        for r in 0..x.rows() {
            log_softmax_row(x.row(r), out.row_mut(r));
        }
    }
    out
}

/// Rotation tables for rotary position embeddings, `[seq × head_dim/2]`.
fn rope_tables(seq: usize, head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

/// Adds `src` (or its sum, when the target is a broadcast scalar) into `dst`.
fn add_broadcast_into(dst: &mut Option<Vec<f64>>, target_numel: usize, src: &[f64], sign: f64) {
    if target_numel == src.len() {
        if sign == 1.0 {
            add_into(dst, src);
        } else {
            let neg: Vec<f64> = src.iter().map(|g| sign * g).collect();
            add_into(dst, &neg);
        }
    } else {
        let total = sign * src.iter().sum::<f64>();
        add_into(dst, &[total]);
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a trainable tensor to the tape; its gradient is collected.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    /// Binds a gradient-exempt tensor to the tape.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of a leaf, or zeros when it was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- forward operations ------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[m×in] · w[out×in]ᵀ`, the usual dense layer with `[out×in]` weights.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(dim_err("linear", tx, tw));
        }
        let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let data = matmul_nt(tx.data(), tw.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Linear(x, w), &[x, w]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(dim_err(name, ta, tb));
        };
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(bad) = ta.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        let out = ta.map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_last(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_last(self.value(a));
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// `x / sqrt(mean(x²) + eps) · weight` over the last axis.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let d = tx.last_dim();
        if tw.ndim() != 1 || tw.numel() != d {
            return Err(dim_err("rms_norm", tx, tw));
        }
        let mut out = Tensor::zeros(tx.shape());
        let rows = tx.rows();
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = tx.row(r);
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &xv), &wv) in out.row_mut(r).iter_mut().zip(xr).zip(tw.data()) {
                *o = xv * inv * wv;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, w, inv_rms }, &[x, w]))
    }

    /// Looks up rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let vocab = t.shape()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let out = t.select_rows(ids);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Keeps the listed rows of a `[N×d]` tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let out = t.select_rows(rows);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// `out[n] = x[n, cols[n]]` for a `[N×V]` input.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || t.shape()[0] != cols.len() || cols.iter().any(|&c| c >= t.shape()[1]) {
            return Err(Error::Dimension {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let data = cols.iter().enumerate().map(|(n, &c)| t.at(n, c)).collect();
        let out = Tensor::new(vec![cols.len()], data)?;
        Ok(self.push(
            out,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    /// Rotary position embedding on `[B·S × H·head_dim]` activations.
    ///
    /// Row `r` sits at position `r % seq`. Each head is rotated in
    /// half-split pairs `(i, i + head_dim/2)`.
    pub fn rope(&mut self, x: Var, seq: usize, head_dim: usize, base: f64) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || head_dim % 2 != 0 || head_dim == 0 || t.shape()[1] % head_dim != 0 || t.shape()[0] % seq.max(1) != 0 {
            return Err(Error::Dimension {
                op: "rope",
                lhs: t.shape().to_vec(),
                rhs: vec![seq, head_dim],
            });
        }
        let (cos, sin) = rope_tables(seq, head_dim, base);
        let out = rotate(t, &cos, &sin, seq, head_dim, 1.0);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                cos,
                sin,
                seq,
                head_dim,
            },
            &[x],
        ))
    }

    /// Fused causal multi-head (optionally grouped-query) attention.
    ///
    /// `q` is `[B·S × H·hd]`, `k` and `v` are `[B·S × KV·hd]`; query head `h`
    /// reads key/value head `h / (H / KV)`. Scores are scaled by `1/sqrt(hd)`
    /// and position `t` attends only to positions `≤ t`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let AttentionShape {
            batch,
            seq,
            n_heads,
            n_kv_heads,
            head_dim,
        } = shape;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let rows = batch * seq;
        let ok = n_kv_heads > 0
            && n_heads % n_kv_heads == 0
            && tq.shape() == [rows, n_heads * head_dim]
            && tk.shape() == [rows, n_kv_heads * head_dim]
            && tv.shape() == tk.shape();
        if !ok {
            return Err(dim_err("attention", tq, tk));
        }
        let group = n_heads / n_kv_heads;
        let qw = n_heads * head_dim;
        let kw = n_kv_heads * head_dim;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut probs = vec![0.0; batch * n_heads * seq * seq];
        let mut out = vec![0.0; rows * qw];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..n_heads {
                let kvh = h / group;
                for t in 0..seq {
                    let qrow = &tq.data()[(b * seq + t) * qw + h * head_dim..][..head_dim];
                    for u in 0..=t {
                        let krow = &tk.data()[(b * seq + u) * kw + kvh * head_dim..][..head_dim];
                        scores[u] = dot(qrow, krow) * scale;
                    }
                    let base = ((b * n_heads + h) * seq + t) * seq;
                    softmax_row(&scores[..=t], &mut probs[base..base + t + 1]);
                    let orow = &mut out[(b * seq + t) * qw + h * head_dim..][..head_dim];
                    for u in 0..=t {
                        let p = probs[base + u];
                        let vrow = &tv.data()[(b * seq + u) * kw + kvh * head_dim..][..head_dim];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, qw], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    // ---- backward -----------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into every reachable
    /// parameter's gradient slot.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                add_into(&mut self.nodes[i].grad, &g);
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    add_into(&mut adj[a.0], &matmul_nt(g, tb.data(), m, n, k));
                }
                if needs(*b) {
                    add_into(&mut adj[b.0], &matmul_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Linear(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                if needs(*x) {
                    add_into(&mut adj[x.0], &matmul_nn(g, tw.data(), m, n, k));
                }
                if needs(*w) {
                    add_into(&mut adj[w.0], &matmul_tn(g, tx.data(), m, n, k));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    add_broadcast_into(&mut adj[a.0], val(*a).numel(), g, 1.0);
                }
                if needs(*b) {
                    add_broadcast_into(&mut adj[b.0], val(*b).numel(), g, sign);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let other = |t: &Tensor, j: usize| if t.numel() == 1 { t.item() } else { t.data()[j] };
                if needs(*a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * other(tb, j)).collect();
                    add_broadcast_into(&mut adj[a.0], ta.numel(), &ga, 1.0);
                }
                if needs(*b) {
                    let gb: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * other(ta, j)).collect();
                    add_broadcast_into(&mut adj[b.0], tb.numel(), &gb, 1.0);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(&mut adj[a.0], &ga);
            }
            Op::Silu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gj, &x)| {
                        let s = sigmoid(x);
                        gj * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                add_into(&mut adj[a.0], &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(node.value.data()).map(|(gj, y)| gj * y).collect();
                add_into(&mut adj[a.0], &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g.iter().zip(val(*a).data()).map(|(gj, x)| gj / x).collect();
                add_into(&mut adj[a.0], &ga);
            }
            Op::Sum(a) => {
                add_into(&mut adj[a.0], &vec![g[0]; val(*a).numel()]);
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                add_into(&mut adj[a.0], &vec![g[0] / n as f64; n]);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut ga = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let s = dot(yr, gr);
                    for j in 0..d {
                        ga[r * d + j] = yr[j] * (gr[j] - s);
                    }
                }
                add_into(&mut adj[a.0], &ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut ga = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        ga[r * d + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                add_into(&mut adj[a.0], &ga);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (tx, tw) = (val(*x), val(*w));
                let d = tx.last_dim();
                if needs(*w) {
                    let mut gw = vec![0.0; d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = tx.row(r);
                        for j in 0..d {
                            gw[j] += g[r * d + j] * xr[j] * inv;
                        }
                    }
                    add_into(&mut adj[w.0], &gw);
                }
                if needs(*x) {
                    let mut gx = vec![0.0; tx.numel()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = tx.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let proj: f64 = (0..d).map(|j| gr[j] * tw.data()[j] * xr[j]).sum();
                        let coef = inv * inv * inv * proj / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv * gr[j] * tw.data()[j] - coef * xr[j];
                        }
                    }
                    add_into(&mut adj[x.0], &gx);
                }
            }
            Op::Embedding { table: src, ids } | Op::GatherRows { x: src, rows: ids } => {
                let t = val(*src);
                let d = t.last_dim();
                let mut gt = vec![0.0; t.numel()];
                for (n, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[n * d + j];
                    }
                }
                add_into(&mut adj[src.0], &gt);
            }
            Op::Pick { x, cols } => {
                let t = val(*x);
                let v = t.last_dim();
                let mut gx = vec![0.0; t.numel()];
                for (n, &c) in cols.iter().enumerate() {
                    gx[n * v + c] += g[n];
                }
                add_into(&mut adj[x.0], &gx);
            }
            Op::Rope {
                x,
                cos,
                sin,
                seq,
                head_dim,
            } => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("rope grad");
                let gx = rotate(&gt, cos, sin, *seq, *head_dim, -1.0);
                add_into(&mut adj[x.0], gx.data());
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(val(*q), val(*k), val(*v), *shape, probs, g);
                if needs(*q) {
                    add_into(&mut adj[q.0], &gq);
                }
                if needs(*k) {
                    add_into(&mut adj[k.0], &gk);
                }
                if needs(*v) {
                    add_into(&mut adj[v.0], &gv);
                }
            }
            Op::Reshape(a) => add_into(&mut adj[a.0], g),
        }
    }
}

/// Applies the rotary rotation; `direction = -1` applies the inverse,
/// which is also the transpose used by the backward pass.
fn rotate(t: &Tensor, cos: &[f64], sin: &[f64], seq: usize, head_dim: usize, direction: f64) -> Tensor {
    let width = t.shape()[1];
    let half = head_dim / 2;
    let mut out = Tensor::zeros(t.shape());
    for r in 0..t.shape()[0] {
        let pos = r % seq;
        let (c, s) = (&cos[pos * half..(pos + 1) * half], &sin[pos * half..(pos + 1) * half]);
        let xr = t.row(r);
        let or = out.row_mut(r);
        for h in 0..width / head_dim {
            let off = h * head_dim;
            for i in 0..half {
                let (x1, x2) = (xr[off + i], xr[off + half + i]);
                let sn = direction * s[i];
                or[off + i] = x1 * c[i] - x2 * sn;
                or[off + half + i] = x1 * sn + x2 * c[i];
            }
        }
    }
    out
}

fn attention_backward(
    tq: &Tensor,
    tk: &Tensor,
    tv: &Tensor,
    shape: AttentionShape,
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttentionShape {
        batch,
        seq,
        n_heads,
        n_kv_heads,
        head_dim,
    } = shape;
    let group = n_heads / n_kv_heads;
    let qw = n_heads * head_dim;
    let kw = n_kv_heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut gq = vec![0.0; tq.numel()];
    let mut gk = vec![0.0; tk.numel()];
    let mut gv = vec![0.0; tv.numel()];
    let mut gp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..n_heads {
            let kvh = h / group;
            for t in 0..seq {
                let base = ((b * n_heads + h) * seq + t) * seq;
                let p = &probs[base..base + t + 1];
                let go = &g[(b * seq + t) * qw + h * head_dim..][..head_dim];
                for u in 0..=t {
                    let voff = (b * seq + u) * kw + kvh * head_dim;
                    gp[u] = dot(go, &tv.data()[voff..voff + head_dim]);
                    for (gvj, goj) in gv[voff..voff + head_dim].iter_mut().zip(go) {
                        *gvj += p[u] * goj;
                    }
                }
                let s: f64 = (0..=t).map(|u| p[u] * gp[u]).sum();
                let qoff = (b * seq + t) * qw + h * head_dim;
                for u in 0..=t {
                    let gs = p[u] * (gp[u] - s) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    let koff = (b * seq + u) * kw + kvh * head_dim;
                    for j in 0..head_dim {
                        gq[qoff + j] += gs * tk.data()[koff + j];
                        gk[koff + j] += gs * tq.data()[qoff + j];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central-difference check of `f` at each input.
    fn check_grads(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        let h = 1e-5;
        let eval = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item()
        };
        for (which, t) in inputs.iter().enumerate() {
            let analytic = tape.grad_or_zeros(vars[which]);
            for j in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(rel <= tol, "input {which}[{j}]: autodiff {a} vs fd {fd} (rel {rel})");
            }
        }
    }

    /// Reduces a tensor output to a scalar with fixed random weights so
    /// every output element contributes distinctly to the gradient.
    fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.value(v).shape(), &mut rng);
        let w = tape.constant(w);
        let m = tape.mul(v, w).unwrap();
        tape.sum(m)
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sel = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let col = tape.constant(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
        let p = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { op: "matmul", .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        check_grads(
            &[a, b],
            |t, v| {
                let p = t.matmul(v[0], v[1]).unwrap();
                project(t, p, 9)
            },
            1e-6,
        );
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 5], &mut rng);
        let w = random(&[4, 5], &mut rng);
        check_grads(
            &[x, w],
            |t, v| {
                let p = t.linear(v[0], v[1]).unwrap();
                project(t, p, 10)
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.silu(z);
        assert_eq!(tape.value(s).item(), 0.0);
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(a), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn incompatible_broadcast_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn silu_derivative_at_one() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(1.0));
        let y = tape.silu(x);
        tape.backward(y).unwrap();
        let analytic = tape.grad(x).unwrap().item();
        let f = |x: f64| x / (1.0 + (-x).exp());
        let h = 1e-5;
        let fd = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        assert!((analytic - fd).abs() <= 1e-8, "{analytic} vs {fd}");
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        let s = random(&[], &mut rng);
        check_grads(
            &[a, b, s],
            |t, v| {
                let m = t.mul(v[0], v[1]).unwrap();
                let d = t.sub(m, v[2]).unwrap();
                let e = t.exp(d);
                let k = t.scale(e, 0.3);
                let si = t.silu(k);
                let sq = t.mul(v[1], v[1]).unwrap();
                let one = t.constant(Tensor::scalar(1.0));
                let pos = t.add(sq, one).unwrap();
                let l = t.log(pos).unwrap();
                let w = t.mul(si, v[2]).unwrap();
                let tot = t.add(w, l).unwrap();
                project(t, tot, 11)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x);
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::new(vec![3], vec![1000.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x);
        let v = tape.value(y);
        assert!(v.is_finite());
        assert!((v.data()[0] - 1.0).abs() < 1e-15);
        assert!(v.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 5], &mut rng);
        check_grads(
            &[x.clone()],
            |t, v| {
                let y = t.softmax(v[0]);
                project(t, y, 12)
            },
            1e-6,
        );
        check_grads(
            &[x],
            |t, v| {
                let y = t.log_softmax(v[0]);
                project(t, y, 13)
            },
            1e-6,
        );
    }

    #[test]
    fn rms_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4]));
        let w = tape.constant(Tensor::ones(&[4]));
        let y = tape.rms_norm(x, w, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 4]);
        let w0 = tape.constant(Tensor::zeros(&[4]));
        let y = tape.rms_norm(x, w0, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
        let bad = tape.constant(Tensor::ones(&[3]));
        assert!(tape.rms_norm(x, bad, 0.0).is_err());
    }

    #[test]
    fn rms_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 6], &mut rng);
        let w = random(&[6], &mut rng);
        check_grads(
            &[x, w],
            |t, v| {
                let y = t.rms_norm(v[0], v[1], 1e-6).unwrap();
                project(t, y, 14)
            },
            1e-6,
        );
    }

    #[test]
    fn gather_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = random(&[5, 3], &mut rng);
        check_grads(
            &[table],
            |t, v| {
                let e = t.embedding(v[0], &[4, 1, 1, 0]).unwrap();
                let r = t.gather_rows(e, &[3, 1, 2]).unwrap();
                let p = t.pick(r, &[2, 0, 2]).unwrap();
                project(t, p, 15)
            },
            1e-8,
        );
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.embedding(table, &[4]), Err(Error::Input(_))));
    }

    #[test]
    fn rope_is_orthogonal_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[6, 8], &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.rope(v, 3, 4, 10_000.0).unwrap();
        // Position 0 is the identity rotation.
        assert_eq!(tape.value(y).row(0), x.row(0));
        for r in 0..6 {
            let n0: f64 = x.row(r).iter().map(|a| a * a).sum();
            let n1: f64 = tape.value(y).row(r).iter().map(|a| a * a).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
        check_grads(
            &[x],
            |t, v| {
                let y = t.rope(v[0], 3, 4, 100.0).unwrap();
                project(t, y, 16)
            },
            1e-6,
        );
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = AttentionShape {
            batch: 2,
            seq: 3,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 2,
        };
        let q = random(&[6, 8], &mut rng);
        let k = random(&[6, 4], &mut rng);
        let v = random(&[6, 4], &mut rng);
        check_grads(
            &[q, k, v],
            |t, vars| {
                let y = t.attention(vars[0], vars[1], vars[2], shape).unwrap();
                project(t, y, 17)
            },
            1e-6,
        );
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = AttentionShape {
            batch: 1,
            seq: 4,
            n_heads: 2,
            n_kv_heads: 2,
            head_dim: 3,
        };
        let q = random(&[4, 6], &mut rng);
        let k = random(&[4, 6], &mut rng);
        let v = random(&[4, 6], &mut rng);
        let run = |k: &Tensor, v: &Tensor| {
            let mut tape = Tape::new();
            let (a, b, c) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let y = tape.attention(a, b, c, shape).unwrap();
            tape.value(y).clone()
        };
        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        k2.row_mut(3).iter_mut().for_each(|x| *x += 1.0);
        v2.row_mut(3).iter_mut().for_each(|x| *x -= 2.0);
        let changed = run(&k2, &v2);
        for r in 0..3 {
            assert_eq!(base.row(r), changed.row(r));
        }
        assert_ne!(base.row(3), changed.row(3));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.param(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[2, 3], &mut rng);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.softmax(v);
        let loss = project(&mut tape, y, 18);
        tape.backward(loss).unwrap();
        let once = tape.grad(v).unwrap();
        tape.backward(loss).unwrap();
        let twice = tape.grad(v).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grads();
        assert!(tape.grad(v).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let m = tape.mul(w, c).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(w).is_some());
    }
}
