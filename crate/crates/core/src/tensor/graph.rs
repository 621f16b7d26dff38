use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this bound (and above `1 - Q_EPS`) are clamped so that
/// relaxed Bernoulli posteriors stay strictly inside (0, 1).
pub(crate) const Q_EPS: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One independent attention problem inside a packed batch: queries
/// `q_start..q_start + q_len` attend to keys `k_start..k_start + k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat(Vec<Var>),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<AttentionSegment>,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    GumbelSigmoid {
        logits: Var,
        tau: f64,
    },
    StraightThrough {
        q: Var,
        index: usize,
    },
    KlBernoulli {
        q: Var,
        prior: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of tensor operations. Append order is a topological
/// order, so [`Graph::backward`] visits each node once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `sigmoid((logit + noise) / tau)`, clamped into `[Q_EPS, 1 - Q_EPS]`.
pub(crate) fn relaxed_select_prob(logit: f64, noise: f64, tau: f64) -> f64 {
    sigmoid((logit + noise) / tau).clamp(Q_EPS, 1.0 - Q_EPS)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. It receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[n]` vector to every row of a `[..., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.shape() != [ta.last_dim()] {
            return Err(dim_err("add_bias", ta, tb));
        }
        let n = ta.last_dim();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.numel() != 1 {
            return Err(dim_err("mul_scalar", ta, ts));
        }
        let f = ts.data()[0];
        let data = ta.data().iter().map(|x| x * f).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(a), &[a])
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.last_dim();
        let mut data = ta.data().to_vec();
        data.chunks_mut(n).for_each(softmax_in_place);
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Normalises each row of the last axis to zero mean and unit variance
    /// (with `eps = 1e-5`), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.shape() != [d] {
            return Err(dim_err("layer_norm", tx, tg));
        }
        if tb.shape() != [d] {
            return Err(dim_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Concatenates along the last axis, in argument order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        for p in &parts[1..] {
            let s = self.value(*p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err("concat", self.value(*first), self.value(*p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::contract("gather expects a 2-d table"));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::Input(format!("index {bad} out of range for table of {v} rows")));
        }
        if rows.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(tt.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    /// Scaled dot-product attention over packed rows. Each segment is an
    /// independent problem; with `causal`, query `i` only sees keys `j <= i`
    /// (positions relative to the segment start).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[AttentionSegment], causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape().len() != 2 || tk.shape().len() != 2 || tq.shape()[1] != tk.shape()[1] {
            return Err(dim_err("attention", tq, tk));
        }
        if tv.shape().len() != 2 || tv.shape()[0] != tk.shape()[0] {
            return Err(dim_err("attention", tk, tv));
        }
        let dh = tq.shape()[1];
        let dv = tv.shape()[1];
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; tq.shape()[0] * dv];
        let mut probs = Vec::with_capacity(segments.len());
        for seg in segments {
            if seg.q_start + seg.q_len > tq.shape()[0] || seg.k_start + seg.k_len > tk.shape()[0] {
                return Err(Error::contract("attention segment out of bounds"));
            }
            let mut p = vec![0.0; seg.q_len * seg.k_len];
            for i in 0..seg.q_len {
                let qi = tq.row(seg.q_start + i);
                let prow = &mut p[i * seg.k_len..(i + 1) * seg.k_len];
                for (j, pj) in prow.iter_mut().enumerate() {
                    let kj = tk.row(seg.k_start + j);
                    let mut s = dot(qi, kj) * scale;
                    if causal && j > i {
                        s += MASKED_SCORE;
                    }
                    *pj = s;
                }
                softmax_in_place(prow);
                let orow = &mut out[(seg.q_start + i) * dv..(seg.q_start + i + 1) * dv];
                for (j, &pj) in prow.iter().enumerate() {
                    axpy(pj, tv.row(seg.k_start + j), orow);
                }
            }
            probs.push(p);
        }
        let value = Tensor::new(vec![tq.shape()[0], dv], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean token cross-entropy of `[n, V]` logits against `n` class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let vocab = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Elementwise product with a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::contract("dropout mask length mismatch"));
        }
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Relaxed Bernoulli posterior `sigmoid((logit + noise) / tau)`, where
    /// `noise` is the difference of the two Gumbel draws of the select and
    /// deselect classes (zero for the noise-free posterior).
    pub fn gumbel_sigmoid(&mut self, logits: Var, noise: &[f64], tau: f64) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::contract(format!("temperature must be positive, got {tau}")));
        }
        let tl = self.value(logits);
        if noise.len() != tl.numel() {
            return Err(Error::contract("noise length mismatch"));
        }
        let data = tl
            .data()
            .iter()
            .zip(noise)
            .map(|(&phi, &g)| relaxed_select_prob(phi, g, tau))
            .collect();
        let value = Tensor::new(tl.shape().to_vec(), data)?;
        Ok(self.push(value, Op::GumbelSigmoid { logits, tau }, &[logits]))
    }

    /// Scalar gate whose value is `forward` but whose gradient is routed
    /// entirely to `q[index]`.
    pub fn straight_through(&mut self, q: Var, index: usize, forward: f64) -> Result<Var> {
        if index >= self.value(q).numel() {
            return Err(Error::contract("straight-through index out of range"));
        }
        Ok(self.push(Tensor::scalar(forward), Op::StraightThrough { q, index }, &[q]))
    }

    /// Sum over entries of KL(Bernoulli(q) || Bernoulli(prior)).
    pub fn kl_bernoulli(&mut self, q: Var, prior: f64) -> Result<Var> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::contract(format!("prior must lie in (0,1), got {prior}")));
        }
        let total = self.value(q).data().iter().map(|&qi| bernoulli_kl(qi, prior)).sum();
        Ok(self.push(Tensor::scalar(total), Op::KlBernoulli { q, prior }, &[q]))
    }

    /// Backpropagates from the scalar `out`, accumulating into the gradient
    /// of every leaf that requires one.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let da = self.slot(grads, *a);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            da[r * k + p] += dot(grow, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.needs(*b) {
                    let db = self.slot(grads, *b);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            axpy(ta.data()[r * k + p], grow, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.needs(*x) {
                        add_into(self.slot(grads, *x), g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.needs(*bias) {
                    let n = self.value(*bias).numel();
                    let db = self.slot(grads, *bias);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = self.slot(grads, *a);
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gi * y;
                    }
                }
                if self.needs(*b) {
                    let db = self.slot(grads, *b);
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                let da = self.slot(grads, *a);
                da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * f);
            }
            Op::MulScalar(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let f = ts.data()[0];
                if self.needs(*a) {
                    let da = self.slot(grads, *a);
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * f);
                }
                if self.needs(*s) {
                    let ds = dot(g, ta.data());
                    self.slot(grads, *s)[0] += ds;
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let da = self.slot(grads, *a);
                for ((d, gi), x) in da.iter_mut().zip(g).zip(ta.data()) {
                    if *x > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = out.last_dim();
                let da = self.slot(grads, *a);
                for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let s = dot(grow, yrow);
                    for j in 0..n {
                        drow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let tg = self.value(*gain);
                if self.needs(*x) {
                    let dx = self.slot(grads, *x);
                    for r in 0..rstd.len() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * tg.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = grow[j] * tg.data()[j];
                            dx[r * d + j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
                if self.needs(*gain) {
                    let dg = self.slot(grads, *gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.needs(*bias) {
                    let db = self.slot(grads, *bias);
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if self.needs(*p) {
                        let dp = self.slot(grads, *p);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { table, rows } => {
                let d = out.last_dim();
                let dt = self.slot(grads, *table);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut dt[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            } => self.attention_backward(g, (*q, *k, *v), segments, *scale, probs, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.value(*logits).last_dim();
                let f = g[0] / targets.len() as f64;
                let dl = self.slot(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..vocab {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * vocab + j] += f * (probs[r * vocab + j] - onehot);
                    }
                }
            }
            Op::Sum(a) => {
                let da = self.slot(grads, *a);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Dropout { x, mask } => {
                let dx = self.slot(grads, *x);
                for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::GumbelSigmoid { logits, tau } => {
                let dl = self.slot(grads, *logits);
                for ((d, gi), q) in dl.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * q * (1.0 - q) / tau;
                }
            }
            Op::StraightThrough { q, index } => {
                self.slot(grads, *q)[*index] += g[0];
            }
            Op::KlBernoulli { q, prior } => {
                let tq = self.value(*q);
                let p = *prior;
                let dq = self.slot(grads, *q);
                for (d, &qi) in dq.iter_mut().zip(tq.data()) {
                    // Clamped so a saturated q yields a finite slope; the
                    // sigmoid in front of it contributes a zero factor there.
                    let qi = qi.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                    *d += g[0] * ((qi / p).ln() - ((1.0 - qi) / (1.0 - p)).ln());
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        segments: &[AttentionSegment],
        scale: f64,
        probs: &[Vec<f64>],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let dh = tq.last_dim();
        let dvw = tv.last_dim();
        let mut dq = vec![0.0; tq.numel()];
        let mut dk = vec![0.0; tk.numel()];
        let mut dv = vec![0.0; tv.numel()];
        for (seg, p) in segments.iter().zip(probs) {
            let mut ds = vec![0.0; seg.k_len];
            for i in 0..seg.q_len {
                let gi = &g[(seg.q_start + i) * dvw..(seg.q_start + i + 1) * dvw];
                let prow = &p[i * seg.k_len..(i + 1) * seg.k_len];
                // dP = dO V^T, then through the row softmax.
                let mut s = 0.0;
                for j in 0..seg.k_len {
                    let dp = dot(gi, tv.row(seg.k_start + j));
                    ds[j] = dp;
                    s += dp * prow[j];
                }
                for j in 0..seg.k_len {
                    let pj = prow[j];
                    let kr = seg.k_start + j;
                    axpy(pj, gi, &mut dv[kr * dvw..(kr + 1) * dvw]);
                    let dsj = pj * (ds[j] - s) * scale;
                    if dsj != 0.0 {
                        let qr = seg.q_start + i;
                        axpy(dsj, tk.row(kr), &mut dq[qr * dh..(qr + 1) * dh]);
                        axpy(dsj, tq.row(qr), &mut dk[kr * dh..(kr + 1) * dh]);
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                add_into(self.slot(grads, var), &d);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

/// `0 * ln 0` is taken as 0, so a saturated posterior gives a finite KL.
pub(crate) fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let xlogy = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    xlogy(q, p) + xlogy(1.0 - q, 1.0 - p)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.leaf(
            Tensor::new(shape.to_vec(), data.to_vec())
                .unwrap()
                .with_requires_grad(true),
        )
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let eye = leaf(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = leaf(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let proj = leaf(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let m2 = leaf(&mut g, &[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c2 = g.matmul(proj, m2).unwrap();
        assert_eq!(g.value(c2).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2], &[0.0, 0.0]);
        let s = g.softmax(a);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = leaf(&mut g, &[2], &[1000.0, 0.0]);
        let s = g.softmax(b);
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(s).is_finite());

        let c = leaf(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let s = g.softmax(c);
        for (got, want) in g.value(s).data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = leaf(&mut g, &[3], &[2.0, 2.0, 2.0]);
        let bias = leaf(&mut g, &[3], &[0.1, 0.2, 0.3]);
        let x = leaf(&mut g, &[3], &[7.0, 7.0, 7.0]);
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3]);

        let gain = leaf(&mut g, &[2], &[1.0, 1.0]);
        let bias = leaf(&mut g, &[2], &[0.0, 0.0]);
        let x = leaf(&mut g, &[2], &[1.0, 3.0]);
        let y = g.layer_norm(x, gain, bias).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-3 && (d[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn concat_order_and_width() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[1, 2], &[1.0, 2.0]);
        let b = leaf(&mut g, &[1, 1], &[3.0]);
        let ab = g.concat(&[a, b]).unwrap();
        let ba = g.concat(&[b, a]).unwrap();
        assert_eq!(g.value(ab).data(), &[1.0, 2.0, 3.0]);
        assert_ne!(g.value(ab).data(), g.value(ba).data());

        let heads: Vec<Var> = (0..4).map(|i| leaf(&mut g, &[3, 2], &[i as f64; 6])).collect();
        let cat = g.concat(&heads).unwrap();
        assert_eq!(g.value(cat).shape(), &[3, 8]);

        let bad = leaf(&mut g, &[2, 2], &[0.0; 4]);
        assert!(g.concat(&[a, bad]).is_err());
    }

    #[test]
    fn backward_twice_accumulates_double() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[1.0, -2.0, 0.5]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_values() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::vector(vec![0.9]));
        let kl = g.kl_bernoulli(q, 0.5).unwrap();
        let want = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((g.scalar_value(kl) - want).abs() < 1e-12);
        assert!((g.scalar_value(kl) - 0.36803).abs() < 1e-4);
        assert!(g.kl_bernoulli(q, 1.0).is_err());
    }
}
