use std::collections::HashMap;

use rayon::prelude::*;

use super::kernels::{axpy, dot, gemm, map, softmax_in_place, transpose, zip_acc};
use super::{is_deterministic, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{GurError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a batched multi-head attention call.
///
/// Queries are `[batch * q_len, dim]`, keys and values `[batch * k_len, dim]`;
/// sequence `b` may attend to its first `key_lens[b]` keys only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        bias: Var,
    },
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        ignore: Option<u32>,
        probs: Vec<T>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations. Nodes are appended in evaluation order, so
/// reverse insertion order is a reverse topological order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    train: bool,
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> GurError {
    GurError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

// 0.5·x·(1 + tanh(u)) written as x·σ(2u).
fn gelu<T: Scalar>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_C) * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = T::c(SQRT_2_OVER_PI);
    let u = s * (x + T::c(GELU_C) * x * x * x);
    let sig = T::one() / (T::one() + (-(u + u)).exp());
    let du = s * (T::one() + T::c(3.0 * GELU_C) * x * x);
    sig + x * sig * (T::one() - sig) * (du + du)
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph whose parameters require gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            train: true,
        }
    }

    /// A graph for inference: parameters are constants and no backward
    /// state is kept.
    pub fn inference() -> Self {
        Graph {
            train: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward output");
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), self.train);
        self.params.insert(id, v);
        v
    }

    /// Makes later `param(_, id)` calls resolve to `var`.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    /// Gradient of every parameter touched by this graph, indexed by id.
    pub fn param_grads(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
        let mut out = vec![None; store.len()];
        for (id, v) in &self.params {
            out[id.index()] = grads.get(*v).map(<[T]>::to_vec);
        }
        out
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[r, c] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims(x)?;
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape() != [cols] {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::c(c);
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v * c).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Scale(x, c), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let bt = transpose(n, k, self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), &bt, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let out = Tensor::new(vec![c, r], transpose(r, c, self.value(x).data()))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), map(tx.data(), gelu))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gelu(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.tanh()).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Tanh(x), rg))
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let data = match axis {
            1 => {
                let mut d = self.value(x).data().to_vec();
                d.chunks_mut(c.max(1)).for_each(softmax_in_place);
                d
            }
            0 => {
                let mut t = transpose(r, c, self.value(x).data());
                t.chunks_mut(r.max(1)).for_each(softmax_in_place);
                transpose(c, r, &t)
            }
            _ => return Err(GurError::invalid(format!("softmax axis {axis} out of range for 2-D"))),
        };
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(GurError::invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (r, c) = self.dims(x)?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::c(eps);
        let n = T::from_usize(c).expect("dim");
        let (tx, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &tx[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by token id.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims(table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(GurError::invalid(format!(
                    "token id {id} outside embedding table of {v}"
                )));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let t = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(GurError::invalid(format!("row {i} out of range for {r} rows")));
            }
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let t = self.value(x).data();
        let floor = T::c(1e-12);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in t.chunks(c.max(1)).take(r) {
            let n = dot(row, row).sqrt().max(floor);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Mean token cross-entropy of `logits: [n, vocab]` against `targets`,
    /// skipping rows whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: Option<u32>) -> Result<Var> {
        let (n, v) = self.dims(logits)?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let l = self.value(logits).data();
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t as usize >= v {
                return Err(GurError::invalid(format!("target {t} outside {v} classes")));
            }
            let row = &l[i * v..(i + 1) * v];
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(row);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t as usize];
            softmax_in_place(p);
            count += 1;
        }
        if count == 0 {
            return Err(GurError::invalid("cross_entropy: every target is ignored"));
        }
        let loss = total / T::from_usize(count).expect("count");
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over `spec.heads` heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (qr, d) = self.dims(q)?;
        let (kr, kd) = self.dims(k)?;
        if self.shape(k) != self.shape(v) || kd != d {
            return Err(shape_err("attention", self.shape(k), self.shape(v)));
        }
        if qr != spec.batch * spec.q_len || kr != spec.batch * spec.k_len {
            return Err(shape_err(
                "attention",
                self.shape(q),
                &[spec.batch, spec.q_len, spec.k_len],
            ));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(GurError::invalid(format!(
                "dim {d} not divisible by {} heads",
                spec.heads
            )));
        }
        if spec.key_lens.len() != spec.batch || spec.key_lens.iter().any(|&l| l == 0 || l > spec.k_len) {
            return Err(GurError::invalid(format!(
                "key lengths {:?} invalid for batch {} x {}",
                spec.key_lens, spec.batch, spec.k_len
            )));
        }
        if spec.causal && spec.q_len != spec.k_len {
            return Err(GurError::invalid("causal attention needs q_len == k_len"));
        }
        let (lq, lk, h) = (spec.q_len, spec.k_len, spec.heads);
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); qr * d];
        let mut probs = vec![T::zero(); spec.batch * h * lq * lk];

        let per_batch = |(b, (out_b, p_b)): (usize, (&mut [T], &mut [T]))| {
            let klen = spec.key_lens[b];
            for hh in 0..h {
                let off = hh * dh;
                for i in 0..lq {
                    let qi = &qd[(b * lq + i) * d + off..][..dh];
                    let p = &mut p_b[(hh * lq + i) * lk..][..lk];
                    let kmax = if spec.causal { (i + 1).min(klen) } else { klen };
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = if j < kmax {
                            dot(qi, &kd[(b * lk + j) * d + off..][..dh]) * scale
                        } else {
                            T::neg_infinity()
                        };
                    }
                    softmax_in_place(p);
                    let oi = &mut out_b[i * d + off..][..dh];
                    for (j, &pj) in p.iter().enumerate().take(kmax) {
                        axpy(pj, &vd[(b * lk + j) * d + off..][..dh], oi);
                    }
                }
            }
        };
        if is_deterministic() {
            out.chunks_mut(lq * d)
                .zip(probs.chunks_mut(h * lq * lk))
                .enumerate()
                .for_each(per_batch);
        } else {
            out.par_chunks_mut(lq * d)
                .zip(probs.par_chunks_mut(h * lq * lk))
                .enumerate()
                .for_each(per_batch);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let out = Tensor::new(vec![qr, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec: spec.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != [1] {
            return Err(GurError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        axpy(T::one(), g, ga);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(T::one(), g, gx);
                }
                let c = self.nodes[bias.0].value.len();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        axpy(T::one(), row, gb);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(*c, g, gx);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                if self.rg(*a) {
                    let bt = transpose(k, n, val(*b));
                    let ga = self.acc(grads, *a).expect("requires grad");
                    gemm(m, n, k, g, &bt, ga);
                }
                if self.rg(*b) {
                    let at = transpose(m, k, val(*a));
                    let gb = self.acc(grads, *b).expect("requires grad");
                    gemm(k, m, n, &at, g, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (n, _) = self.dims(*b)?;
                if self.rg(*a) {
                    let ga = self.acc(grads, *a).expect("requires grad");
                    gemm(m, n, k, g, val(*b), ga);
                }
                if self.rg(*b) {
                    let gt = transpose(m, n, g);
                    let gb = self.acc(grads, *b).expect("requires grad");
                    gemm(n, m, k, &gt, val(*a), gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x)?;
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(T::one(), &transpose(c, r, g), gx);
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    zip_acc(gx, g, val(*x), |gi, xi| gi * gelu_grad(xi));
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * (T::one() - yi * yi);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (r, c) = self.dims(*x)?;
                let y = node.value.data();
                let mut dx = vec![T::zero(); r * c];
                let (outer, inner, idx): (usize, usize, Box<dyn Fn(usize, usize) -> usize>) = if *axis == 1 {
                    (r, c, Box::new(move |o, i| o * c + i))
                } else {
                    (c, r, Box::new(move |o, i| i * c + o))
                };
                for o in 0..outer {
                    let s: T = (0..inner).map(|i| g[idx(o, i)] * y[idx(o, i)]).sum();
                    for i in 0..inner {
                        let at = idx(o, i);
                        dx[at] = y[at] * (g[at] - s);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(T::one(), &dx, gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = self.dims(*x)?;
                let gv = val(*gain);
                let n = T::from_usize(c).expect("dim");
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        axpy(T::one(), row, gb);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gv[j];
                        }
                        let h = &xhat[i * c..(i + 1) * c];
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = dot(&dxhat, h) / n;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                let (_, d) = self.dims(*table)?;
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let (_, c) = self.dims(*x)?;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(T::one(), &g[r * c..(r + 1) * c], &mut gx[src * c..(src + 1) * c]);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let (_, c) = self.dims(*x)?;
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &n) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        let proj = dot(yr, gr);
                        for j in 0..c {
                            gx[i * c + j] += (gr[j] - yr[j] * proj) / n;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let (_, v) = self.dims(*logits)?;
                let s = g[0] / T::from_usize(*count).expect("count");
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        axpy(s, &probs[i * v..(i + 1) * v], row);
                        row[t as usize] -= s;
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (_, d) = self.dims(q)?;
        let (lq, lk, h) = (spec.q_len, spec.k_len, spec.heads);
        let dh = d / h;
        let scale = T::one() / T::from_usize(dh).expect("dh").sqrt();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];

        let per_batch = |(b, ((dq_b, dk_b), dv_b)): (usize, ((&mut [T], &mut [T]), &mut [T]))| {
            let klen = spec.key_lens[b];
            let mut dp = vec![T::zero(); lk];
            for hh in 0..h {
                let off = hh * dh;
                for i in 0..lq {
                    let p = &probs[((b * h + hh) * lq + i) * lk..][..lk];
                    let kmax = if spec.causal { (i + 1).min(klen) } else { klen };
                    let go = &g[(b * lq + i) * d + off..][..dh];
                    let mut s = T::zero();
                    for j in 0..kmax {
                        dp[j] = dot(go, &vd[(b * lk + j) * d + off..][..dh]);
                        s += dp[j] * p[j];
                        axpy(p[j], go, &mut dv_b[j * d + off..][..dh]);
                    }
                    let qi = &qd[(b * lq + i) * d + off..][..dh];
                    for j in 0..kmax {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        axpy(ds, &kd[(b * lk + j) * d + off..][..dh], &mut dq_b[i * d + off..][..dh]);
                        axpy(ds, qi, &mut dk_b[j * d + off..][..dh]);
                    }
                }
            }
        };
        if is_deterministic() {
            dq.chunks_mut(lq * d)
                .zip(dk.chunks_mut(lk * d))
                .zip(dv.chunks_mut(lk * d))
                .enumerate()
                .for_each(per_batch);
        } else {
            dq.par_chunks_mut(lq * d)
                .zip(dk.par_chunks_mut(lk * d))
                .zip(dv.par_chunks_mut(lk * d))
                .enumerate()
                .for_each(per_batch);
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gx) = self.acc(grads, var) {
                axpy(T::one(), &buf, gx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
