//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value,
//! and [`Graph::backward`] walks the tape in reverse. Parameters enter as
//! borrowed leaves so building a graph never copies weights.

use std::borrow::Cow;

use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Mse(Var, Var),
    TokenLogProbs {
        logits: Var,
        picks: Vec<(usize, usize)>,
        inv_temp: f64,
        allowed: Option<Vec<bool>>,
        probs: Vec<Vec<f64>>,
    },
    Mean(Var),
    Ppo {
        logp: Var,
        ratio_adv: Vec<(f64, f64)>,
        eps: f64,
        norm: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A contiguous block of parameter leaves created by [`Graph::bind`].
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    base: usize,
    len: usize,
}

impl Bound {
    #[inline]
    pub fn at(&self, idx: usize) -> Var {
        debug_assert!(idx < self.len);
        Var(self.base + idx)
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for a bound block, zero-filled where no gradient reached.
    pub fn collect(&self, bound: Bound, shapes: &[Tensor]) -> Vec<Tensor> {
        (0..bound.len)
            .map(|i| match &self.grads[bound.base + i] {
                Some(g) => g.clone(),
                None => Tensor::zeros(shapes[i].rows(), shapes[i].cols()),
            })
            .collect()
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row softmax restricted to `allowed` entries; disallowed entries get exactly 0.
fn masked_softmax_row(row: &[f64], allowed: impl Fn(usize) -> bool, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        *o = if allowed(j) { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Owned leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind borrowed tensors as consecutive leaves.
    pub fn bind(&mut self, tensors: &'a [Tensor], trainable: bool) -> Bound {
        let base = self.nodes.len();
        for t in tensors {
            self.push_cow(Cow::Borrowed(t), Op::Leaf, trainable);
        }
        Bound {
            base,
            len: tensors.len(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Add a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        let bias = r.row(0).to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with `1 x m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut xhat = Tensor::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Tensor::zeros(n, m);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..m {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row softmax. `mask[r][c] == false` excludes entry `(r, c)` exactly.
    pub fn softmax(&mut self, a: Var, mask: Option<&[Vec<bool>]>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r).to_vec();
            match mask {
                Some(m) => masked_softmax_row(&row, |c| m[r][c], out.row_mut(r)),
                None => masked_softmax_row(&row, |_| true, out.row_mut(r)),
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Select rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(idx.len(), tv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather(table, idx.to_vec()), rg)
    }

    /// Mean of squared entrywise differences, as a `1 x 1` node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let p = self.value(pred);
        let t = self.value(target);
        assert_eq!(p.shape(), t.shape(), "mse shape mismatch");
        let n = p.len() as f64;
        let v = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(pred) || self.rg(target);
        self.push(Tensor::scalar(v), Op::Mse(pred, target), rg)
    }

    /// Log-probabilities of `(row, token)` picks under
    /// `softmax(logits[row] * inv_temp)` restricted to `allowed` tokens.
    /// Output is `picks.len() x 1`.
    pub fn token_log_probs(
        &mut self,
        logits: Var,
        picks: &[(usize, usize)],
        inv_temp: f64,
        allowed: Option<&[bool]>,
    ) -> Var {
        let lv = self.value(logits);
        let mut out = Tensor::zeros(picks.len(), 1);
        let mut probs = Vec::with_capacity(picks.len());
        for (k, &(r, t)) in picks.iter().enumerate() {
            let z: Vec<f64> = lv.row(r).iter().map(|v| v * inv_temp).collect();
            let ok = |j: usize| allowed.is_none_or(|a| a[j]);
            let max = z.iter().enumerate().filter(|(j, _)| ok(*j)).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().enumerate().filter(|(j, _)| ok(*j)).map(|(_, v)| (v - max).exp()).sum::<f64>().ln();
            let logp = if ok(t) { z[t] - lse } else { f64::NEG_INFINITY };
            out.set(k, 0, logp);
            probs.push(
                z.iter()
                    .enumerate()
                    .map(|(j, v)| if ok(j) { (v - lse).exp() } else { 0.0 })
                    .collect(),
            );
        }
        let rg = self.rg(logits);
        self.push(
            out,
            Op::TokenLogProbs {
                logits,
                picks: picks.to_vec(),
                inv_temp,
                allowed: allowed.map(<[bool]>::to_vec),
                probs,
            },
            rg,
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = av.sum() / av.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Mean(a), rg)
    }

    /// Negated clipped surrogate `-Σ min(ρA, clip(ρ, 1-ε, 1+ε)A) / norm`
    /// with `ρ = exp(logp - old)`. Gradient flows only into `logp`.
    pub fn ppo_clip(&mut self, logp: Var, old: &[f64], adv: &[f64], eps: f64, norm: f64) -> Var {
        let lv = self.value(logp);
        assert_eq!(lv.len(), old.len());
        assert_eq!(lv.len(), adv.len());
        let mut total = 0.0;
        let mut ratio_adv = Vec::with_capacity(old.len());
        for ((&lp, &o), &a) in lv.data().iter().zip(old).zip(adv) {
            let rho = (lp - o).exp();
            total += clipped_term(rho, a, eps).0;
            ratio_adv.push((rho, a));
        }
        let rg = self.rg(logp);
        self.push(
            Tensor::scalar(-total / norm),
            Op::Ppo {
                logp,
                ratio_adv,
                eps,
                norm,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.rg(*row) {
                    let mut s = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, v) in s.row_mut(0).iter_mut().zip(g.row(r)) {
                            *x += v;
                        }
                    }
                    accumulate(&mut grads[row.0], s);
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale(*s);
                accumulate(&mut grads[a.0], d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = Tensor::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data().iter().zip(g.data()).map(|(&xv, &gv)| gv * gelu_grad(xv)).collect(),
                );
                accumulate(&mut grads[a.0], d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, m) = xhat.shape();
                let gv = self.value(*gain).row(0);
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = Tensor::zeros(1, m);
                    let mut db = Tensor::zeros(1, m);
                    for r in 0..n {
                        for c in 0..m {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            db.data_mut()[c] += g.get(r, c);
                        }
                    }
                    if self.rg(*gain) {
                        accumulate(&mut grads[gain.0], dg);
                    }
                    if self.rg(*bias) {
                        accumulate(&mut grads[bias.0], db);
                    }
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(n, m);
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..m).map(|c| g.get(r, c) * gv[c]).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let sum_x: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..m {
                            let v = inv_std[r] / m as f64 * (m as f64 * dxhat[c] - sum - xhat.get(r, c) * sum_x);
                            dx.set(r, c, v);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Softmax(a) => {
                let mut d = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let inner = dot(y, gy);
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = y[c] * (gy[c] - inner);
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        accumulate(&mut grads[p.0], d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (h, w) = self.value(p).shape();
                    if self.rg(p) {
                        let d = Tensor::from_vec(h, w, g.data()[off * w..(off + h) * w].to_vec());
                        accumulate(&mut grads[p.0], d);
                    }
                    off += h;
                }
            }
            Op::Gather(table, idx) => {
                let tv = self.value(*table);
                let mut d = Tensor::zeros(tv.rows(), tv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (x, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *x += v;
                    }
                }
                accumulate(&mut grads[table.0], d);
            }
            Op::Mse(pred, target) => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let scale = 2.0 * g.item() / p.len() as f64;
                let d = Tensor::from_vec(
                    p.rows(),
                    p.cols(),
                    p.data().iter().zip(t.data()).map(|(a, b)| scale * (a - b)).collect(),
                );
                if self.rg(*target) {
                    let mut neg = d.clone();
                    neg.scale(-1.0);
                    accumulate(&mut grads[target.0], neg);
                }
                if self.rg(*pred) {
                    accumulate(&mut grads[pred.0], d);
                }
            }
            Op::TokenLogProbs {
                logits,
                picks,
                inv_temp,
                allowed,
                probs,
            } => {
                let lv = self.value(*logits);
                let mut d = Tensor::zeros(lv.rows(), lv.cols());
                for (k, &(r, t)) in picks.iter().enumerate() {
                    let gk = g.get(k, 0) * inv_temp;
                    let row = d.row_mut(r);
                    for (j, x) in row.iter_mut().enumerate() {
                        if allowed.as_ref().is_none_or(|a| a[j]) {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            *x += gk * (ind - probs[k][j]);
                        }
                    }
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.item() / av.len() as f64;
                accumulate(&mut grads[a.0], Tensor::filled(av.rows(), av.cols(), v));
            }
            Op::Ppo {
                logp,
                ratio_adv,
                eps,
                norm,
            } => {
                let gs = g.item();
                let d: Vec<f64> = ratio_adv
                    .iter()
                    .map(|&(rho, a)| {
                        let (_, unclipped) = clipped_term(rho, a, *eps);
                        if unclipped {
                            -gs * rho * a / norm
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[logp.0], Tensor::from_vec(d.len(), 1, d));
            }
        }
    }
}

/// `min(ρA, clip(ρ)A)` and whether the unclipped branch is the active one.
pub fn clipped_term(rho: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}
