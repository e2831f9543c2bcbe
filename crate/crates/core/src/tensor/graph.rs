use std::collections::HashMap;

use rayon::prelude::*;

use super::kernels::{dot, matmul, matmul_nt, matmul_tn, softmax_row};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    AddTiled { x: Var, p: Var },
    Sum { a: Var },
    Mean { a: Var },
    Softmax { a: Var, outer: usize, dim: usize, inner: usize },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, dim: usize, xhat: Vec<S>, rstd: Vec<S> },
    Attention { q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<S> },
    Upsample { x: Var, batch: usize, grid: usize, patch: usize, channels: usize },
    Precomputed { a: Var, local_grad: Vec<S> },
    Freed,
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in creation order, which is a valid topological
/// order, so [`Graph::backward`] simply walks the node list in reverse.
/// A graph built with [`Graph::inference`] records no gradient
/// requirements and is intended for teacher and evaluation passes.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    params: HashMap<String, Var>,
    recording: bool,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A graph whose nodes never require gradients.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor in as a leaf. The leaf requires a gradient iff the
    /// tensor does and the graph is recording.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape.clone(), t.data, Op::Leaf, false))
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// existing node so shared weights accumulate into one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<S>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor<S>> {
        Tensor::new(self.shape(v), self.value(v).to_vec())
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[S]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn check_finite(&self, op: &'static str, v: Var) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite input to {op}")))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, factor }, rg)
    }

    /// `x + p` where `p` is repeated over the leading rows of `x`
    /// (bias vectors, positional tables).
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x), self.shape(p));
        let (lx, lp) = (self.value(x).len(), self.value(p).len());
        if lx % lp != 0 || sx.last() != sp.last() {
            return Err(Error::dim("add_tiled", sx, sp));
        }
        let pv = self.value(p);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + pv[i % lp])
            .collect();
        let rg = self.rg(x) || self.rg(p);
        Ok(self.push(sx.to_vec(), out, Op::AddTiled { x, p }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: S = v.iter().copied().sum::<S>() / S::of(v.len() as f64);
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean { a }, rg)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        self.check_finite("softmax", a)?;
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![S::zero(); x.len()];
        let mut row = vec![S::zero(); dim];
        let mut tmp = vec![S::zero(); dim];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                for (c, r) in row.iter_mut().enumerate() {
                    *r = x[base + c * inner];
                }
                softmax_row(&row, &mut tmp);
                for (c, &t) in tmp.iter().enumerate() {
                    out[base + c * inner] = t;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { a, outer, dim, inner }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a }, rg)
    }

    /// Layer normalisation over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let dim = *sx.last().expect("shape is non-empty");
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::dim("layer_norm", &sx, self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / dim;
        let inv_d = S::of(1.0 / dim as f64);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + S::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..dim {
                let h = (row[c] - mean) * rs;
                xhat[r * dim + c] = h;
                out[r * dim + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm { x, gamma, beta, dim, xhat, rstd };
        Ok(self.push(sx, out, op, rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·tokens, d]` with heads interleaved along
    /// `d` in contiguous blocks of `d / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || batch == 0 || shape[0] % batch != 0 || heads == 0 || shape[1] % heads != 0 {
            return Err(Error::dim("attention", &shape, &[batch, heads]));
        }
        let tokens = shape[0] / batch;
        let d = shape[1];
        let dh = d / heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let blocks: Vec<(Vec<S>, Vec<S>)> = (0..batch * heads)
            .into_par_iter()
            .map(|bh| {
                let (b, h) = (bh / heads, bh % heads);
                let qb = gather_head(qv, b, h, tokens, d, dh);
                let kb = gather_head(kv, b, h, tokens, d, dh);
                let vb = gather_head(vv, b, h, tokens, d, dh);
                let mut scores = matmul_nt(&qb, &kb, tokens, dh, tokens);
                scores.iter_mut().for_each(|s| *s *= scale);
                let mut probs = vec![S::zero(); tokens * tokens];
                for i in 0..tokens {
                    softmax_row(
                        &scores[i * tokens..(i + 1) * tokens],
                        &mut probs[i * tokens..(i + 1) * tokens],
                    );
                }
                let out = matmul(&probs, &vb, tokens, tokens, dh);
                (probs, out)
            })
            .collect();
        let mut out = vec![S::zero(); shape[0] * d];
        let mut probs = Vec::with_capacity(batch * heads * tokens * tokens);
        for (bh, (p, o)) in blocks.into_iter().enumerate() {
            scatter_head(&mut out, &o, bh / heads, bh % heads, tokens, d, dh);
            probs.extend(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::Attention { q, k, v, batch, tokens, heads, probs };
        Ok(self.push(shape, out, op, rg))
    }

    /// Nearest-neighbour upsampling of per-patch rows `[batch·grid², C]` to
    /// a channel-major pixel map `[batch, C, grid·patch, grid·patch]`.
    pub fn upsample_nearest(&mut self, x: Var, batch: usize, grid: usize, patch: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != batch * grid * grid {
            return Err(Error::dim("upsample_nearest", &sx, &[batch, grid, grid]));
        }
        let channels = sx[1];
        let side = grid * patch;
        let xv = self.value(x);
        let mut out = vec![S::zero(); batch * channels * side * side];
        for b in 0..batch {
            for c in 0..channels {
                let plane = &mut out[(b * channels + c) * side * side..(b * channels + c + 1) * side * side];
                for y in 0..side {
                    for xx in 0..side {
                        let tok = b * grid * grid + (y / patch) * grid + xx / patch;
                        plane[y * side + xx] = xv[tok * channels + c];
                    }
                }
            }
        }
        let rg = self.rg(x);
        let op = Op::Upsample { x, batch, grid, patch, channels };
        Ok(self.push(vec![batch, channels, side, side], out, op, rg))
    }

    /// A scalar whose value and gradient with respect to `a` were computed
    /// outside the graph. Loss functions with closed-form gradients use this.
    pub fn precomputed_scalar(&mut self, a: Var, value: S, local_grad: Vec<S>) -> Result<Var> {
        if local_grad.len() != self.value(a).len() {
            return Err(Error::dim("precomputed_scalar", self.shape(a), &[local_grad.len()]));
        }
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![value], Op::Precomputed { a, local_grad }, rg))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Afterwards every leaf that requires a gradient holds one (zero if no
    /// path reaches it) and intermediate values are released. A graph can
    /// be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on the same graph; run a new forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g);
        }
        for i in 0..self.nodes.len() {
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad && self.grads[i].is_none() {
                    self.grads[i] = Some(vec![S::zero(); node.value.len()]);
                }
            } else {
                node.value = Vec::new();
                node.op = Op::Freed;
                self.grads[i] = None;
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, g: Vec<S>) {
        if !self.rg(v) {
            return;
        }
        match self.grads[v.0].as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grads[v.0] = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Freed);
        match &op {
            Op::Leaf | Op::Freed => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let da = matmul_nt(g, self.value(b), m, n, k);
                    self.acc(a, da);
                }
                if self.rg(b) {
                    let db = matmul_tn(self.value(a), g, m, k, n);
                    self.acc(b, db);
                }
            }
            &Op::Add { a, b } => {
                self.acc(a, g.to_vec());
                self.acc(b, g.to_vec());
            }
            &Op::Sub { a, b } => {
                self.acc(a, g.to_vec());
                self.acc(b, g.iter().map(|&x| -x).collect());
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    let da = zip_map(g, self.value(b), |x, y| x * y);
                    self.acc(a, da);
                }
                if self.rg(b) {
                    let db = zip_map(g, self.value(a), |x, y| x * y);
                    self.acc(b, db);
                }
            }
            &Op::Scale { a, factor } => {
                self.acc(a, g.iter().map(|&x| x * factor).collect());
            }
            &Op::AddTiled { x, p } => {
                self.acc(x, g.to_vec());
                if self.rg(p) {
                    let lp = self.value(p).len();
                    let mut dp = vec![S::zero(); lp];
                    for (j, &gv) in g.iter().enumerate() {
                        dp[j % lp] += gv;
                    }
                    self.acc(p, dp);
                }
            }
            &Op::Sum { a } => {
                let n = self.value(a).len();
                self.acc(a, vec![g[0]; n]);
            }
            &Op::Mean { a } => {
                let n = self.value(a).len();
                self.acc(a, vec![g[0] / S::of(n as f64); n]);
            }
            &Op::Softmax { a, outer, dim, inner } => {
                let y = &self.nodes[i].value;
                let mut da = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * dim * inner + j;
                        let mut s = S::zero();
                        for c in 0..dim {
                            s += g[base + c * inner] * y[base + c * inner];
                        }
                        for c in 0..dim {
                            let idx = base + c * inner;
                            da[idx] = y[idx] * (g[idx] - s);
                        }
                    }
                }
                self.acc(a, da);
            }
            &Op::Gelu { a } => {
                let da = zip_map(g, self.value(a), |gv, x| gv * gelu(x).1);
                self.acc(a, da);
            }
            Op::LayerNorm { x, gamma, beta, dim, xhat, rstd } => {
                let (x, gamma, beta, dim) = (*x, *gamma, *beta, *dim);
                let rows = g.len() / dim;
                if self.rg(gamma) || self.rg(beta) {
                    let mut dg = vec![S::zero(); dim];
                    let mut db = vec![S::zero(); dim];
                    for r in 0..rows {
                        for c in 0..dim {
                            dg[c] += g[r * dim + c] * xhat[r * dim + c];
                            db[c] += g[r * dim + c];
                        }
                    }
                    self.acc(gamma, dg);
                    self.acc(beta, db);
                }
                if self.rg(x) {
                    let gv = self.value(gamma);
                    let inv_d = S::of(1.0 / dim as f64);
                    let mut dx = vec![S::zero(); g.len()];
                    for r in 0..rows {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for c in 0..dim {
                            let dxh = g[r * dim + c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xhat[r * dim + c];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for c in 0..dim {
                            let dxh = g[r * dim + c] * gv[c];
                            dx[r * dim + c] = rstd[r] * (dxh - m1 - xhat[r * dim + c] * m2);
                        }
                    }
                    self.acc(x, dx);
                }
            }
            Op::Attention { q, k, v, batch, tokens, heads, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let d = self.shape(q)[1];
                let dh = d / heads;
                let scale = S::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let blocks: Vec<(Vec<S>, Vec<S>, Vec<S>)> = (0..batch * heads)
                    .into_par_iter()
                    .map(|bh| {
                        let (b, h) = (bh / heads, bh % heads);
                        let p = &probs[bh * tokens * tokens..(bh + 1) * tokens * tokens];
                        let go = gather_head(g, b, h, tokens, d, dh);
                        let qb = gather_head(qv, b, h, tokens, d, dh);
                        let kb = gather_head(kv, b, h, tokens, d, dh);
                        let vb = gather_head(vv, b, h, tokens, d, dh);
                        let dv = matmul_tn(p, &go, tokens, tokens, dh);
                        let dp = matmul_nt(&go, &vb, tokens, dh, tokens);
                        let mut ds = vec![S::zero(); tokens * tokens];
                        for r in 0..tokens {
                            let pr = &p[r * tokens..(r + 1) * tokens];
                            let dpr = &dp[r * tokens..(r + 1) * tokens];
                            let s = dot(pr, dpr);
                            for c in 0..tokens {
                                ds[r * tokens + c] = pr[c] * (dpr[c] - s) * scale;
                            }
                        }
                        let dq = matmul(&ds, &kb, tokens, tokens, dh);
                        let dk = matmul_tn(&ds, &qb, tokens, tokens, dh);
                        (dq, dk, dv)
                    })
                    .collect();
                let n = batch * tokens * d;
                let (mut dq, mut dk, mut dv) = (vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n]);
                for (bh, (a, b, c)) in blocks.into_iter().enumerate() {
                    let (bb, h) = (bh / heads, bh % heads);
                    scatter_head(&mut dq, &a, bb, h, tokens, d, dh);
                    scatter_head(&mut dk, &b, bb, h, tokens, d, dh);
                    scatter_head(&mut dv, &c, bb, h, tokens, d, dh);
                }
                self.acc(q, dq);
                self.acc(k, dk);
                self.acc(v, dv);
            }
            &Op::Upsample { x, batch, grid, patch, channels } => {
                let side = grid * patch;
                let mut dx = vec![S::zero(); batch * grid * grid * channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let plane = &g[(b * channels + c) * side * side..(b * channels + c + 1) * side * side];
                        for y in 0..side {
                            for xx in 0..side {
                                let tok = b * grid * grid + (y / patch) * grid + xx / patch;
                                dx[tok * channels + c] += plane[y * side + xx];
                            }
                        }
                    }
                }
                self.acc(x, dx);
            }
            Op::Precomputed { a, local_grad } => {
                let a = *a;
                let da = local_grad.iter().map(|&v| v * g[0]).collect();
                self.acc(a, da);
            }
        }
        self.nodes[i].op = op;
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Value and derivative of tanh-approximated GELU.
fn gelu<S: Scalar>(x: S) -> (S, S) {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::of(3.0) * k * x * x);
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
    (y, dy)
}

fn gather_head<S: Scalar>(src: &[S], b: usize, h: usize, tokens: usize, d: usize, dh: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(tokens * dh);
    for i in 0..tokens {
        let start = (b * tokens + i) * d + h * dh;
        out.extend_from_slice(&src[start..start + dh]);
    }
    out
}

fn scatter_head<S: Scalar>(dst: &mut [S], block: &[S], b: usize, h: usize, tokens: usize, d: usize, dh: usize) {
    for i in 0..tokens {
        let start = (b * tokens + i) * d + h * dh;
        dst[start..start + dh].copy_from_slice(&block[i * dh..(i + 1) * dh]);
    }
}
