//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Values are computed eagerly when an op is recorded. [`Tape::backward`]
//! walks the tape in reverse and returns the gradient of every parameter
//! slice that was read, as a leading sub-block of the full parameter.

use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Matrix};

/// Index of a tensor in a weight bank's declaration order.
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys each query may attend to.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub causal: bool,
    /// `batch × k_len`; false marks a padded key.
    pub key_valid: Vec<bool>,
}

impl AttnMask {
    #[inline]
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

enum Op {
    Constant,
    Param { id: ParamId, full: (usize, usize) },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        smoothing: f64,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradient of one parameter read: the leading `block.shape()` corner of a
/// tensor whose full shape is `full`.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub id: ParamId,
    pub full: (usize, usize),
    pub block: Matrix,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Row-major `batch × heads × q_len × k_len` probabilities of an
    /// attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Reads the leading `rows × cols` block of parameter `id`.
    pub fn param(&mut self, id: ParamId, source: &Matrix, rows: usize, cols: usize) -> Var {
        let value = source.leading_block(rows, cols);
        self.push(
            value,
            Op::Param {
                id,
                full: source.shape(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Row-wise normalization with `gain`/`bias` of shape `1 × cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        assert_eq!(g.len(), cols, "layer norm gain width");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xr = xhat.row_mut(r);
            for c in 0..cols {
                xr[c] = (row[c] - mean) * is;
            }
            let or = out.row_mut(r);
            for c in 0..cols {
                or[c] = g[c] * xhat.get(r, c) + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let s = self.value(src);
        let cols = s.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(s.row(i));
        }
        let value = Matrix::from_vec(idx.len(), cols, data);
        self.push(value, Op::Gather { src, idx })
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat width");
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    /// Scaled dot-product attention over `heads` column groups.
    ///
    /// `q` is `batch·q_len × d`, `k`/`v` are `batch·k_len × d`. A query row
    /// with no permitted key gets an all-zero probability row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(d % heads, 0, "width not divisible by heads");
        assert_eq!(qv.rows(), mask.batch * mask.q_len);
        assert_eq!(kv.rows(), mask.batch * mask.k_len);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk) = (mask.q_len, mask.k_len);
        let mut probs = vec![0.0; mask.batch * heads * lq * lk];
        let mut out = Matrix::zeros(qv.rows(), d);
        let mut scores = vec![0.0; lk];
        for b in 0..mask.batch {
            for h in 0..heads {
                let cs = h * dh..(h + 1) * dh;
                for i in 0..lq {
                    let qrow = &qv.row(b * lq + i)[cs.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if mask.allowed(b, i, j) {
                            let s = dot(qrow, &kv.row(b * lk + j)[cs.clone()]) * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let base = ((b * heads + h) * lq + i) * lk;
                    let mut z = 0.0;
                    for j in 0..lk {
                        if mask.allowed(b, i, j) {
                            let e = (scores[j] - max).exp();
                            probs[base + j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out.row_mut(b * lq + i)[cs.clone()];
                    for j in 0..lk {
                        let p = probs[base + j] / z;
                        probs[base + j] = p;
                        if p != 0.0 {
                            let vrow = &vv.row(b * lk + j)[cs.clone()];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
        )
    }

    /// Weighted sum over rows of label-smoothed cross-entropy. Rows with
    /// weight 0 are skipped entirely. Returns a `1 × 1` value.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        smoothing: f64,
    ) -> Var {
        let lv = self.value(logits);
        let (rows, vocab) = lv.shape();
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let mut probs = Matrix::zeros(rows, vocab);
        let mut total = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            let mut mean_logp = 0.0;
            let pr = probs.row_mut(r);
            for c in 0..vocab {
                let lp = row[c] - lse;
                pr[c] = lp.exp();
                mean_logp += lp;
            }
            mean_logp /= vocab as f64;
            let nll = -(row[targets[r]] - lse);
            let loss = (1.0 - smoothing) * nll - smoothing * mean_logp;
            total += weights[r] * loss;
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                probs,
            },
        )
    }

    /// Back-propagates from the scalar `loss` and returns one entry per
    /// parameter read, in tape order.
    pub fn backward(&self, loss: Var) -> Vec<ParamGrad> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Vec::new();

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param { id, full } => out.push(ParamGrad {
                    id: *id,
                    full: *full,
                    block: g,
                }),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm_nt(g.as_slice(), bv.as_slice(), da.as_mut_slice(), g.rows(), g.cols(), bv.rows());
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm_tn(av.as_slice(), g.as_slice(), db.as_mut_slice(), av.rows(), av.cols(), g.cols());
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    // c = a·bᵀ: da = g·b, db = gᵀ·a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm_nn(g.as_slice(), bv.as_slice(), da.as_mut_slice(), g.rows(), g.cols(), bv.cols());
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm_tn(g.as_slice(), av.as_slice(), db.as_mut_slice(), g.rows(), g.cols(), av.cols());
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let mut d = g;
                    for (dv, &x) in d.as_mut_slice().iter_mut().zip(av.as_slice()) {
                        if x <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gv = self.value(*gain).as_slice();
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dgain.as_mut_slice()[c] += gr[c] * xr[c];
                            dbias.as_mut_slice()[c] += gr[c];
                            dxhat[c] = gr[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                }
                Op::Gather { src, idx } => {
                    let sv = self.value(*src);
                    let mut d = Matrix::zeros(sv.rows(), sv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *src, d);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let slice = g.as_slice()[start * cols..(start + rows) * cols].to_vec();
                        acc(&mut grads, p, Matrix::from_vec(rows, cols, slice));
                        start += rows;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    mask,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (lq, lk) = (mask.q_len, mask.k_len);
                    let mut dq = Matrix::zeros(qv.rows(), d);
                    let mut dk = Matrix::zeros(kv.rows(), d);
                    let mut dv = Matrix::zeros(vv.rows(), d);
                    let mut dp = vec![0.0; lk];
                    for b in 0..mask.batch {
                        for h in 0..*heads {
                            let cs = h * dh..(h + 1) * dh;
                            for i in 0..lq {
                                let base = ((b * heads + h) * lq + i) * lk;
                                let prow = &probs[base..base + lk];
                                let grow = &g.row(b * lq + i)[cs.clone()];
                                let mut s = 0.0;
                                for j in 0..lk {
                                    if prow[j] != 0.0 {
                                        dp[j] = dot(grow, &vv.row(b * lk + j)[cs.clone()]);
                                        s += prow[j] * dp[j];
                                    }
                                }
                                let qrow = qv.row(b * lq + i)[cs.clone()].to_vec();
                                for j in 0..lk {
                                    let p = prow[j];
                                    if p == 0.0 {
                                        continue;
                                    }
                                    let ds = p * (dp[j] - s) * scale;
                                    let krow = &kv.row(b * lk + j)[cs.clone()];
                                    let dqrow = &mut dq.row_mut(b * lq + i)[cs.clone()];
                                    for (o, x) in dqrow.iter_mut().zip(krow) {
                                        *o += ds * x;
                                    }
                                    let dkrow = &mut dk.row_mut(b * lk + j)[cs.clone()];
                                    for (o, x) in dkrow.iter_mut().zip(&qrow) {
                                        *o += ds * x;
                                    }
                                    let dvrow = &mut dv.row_mut(b * lk + j)[cs.clone()];
                                    for (o, x) in dvrow.iter_mut().zip(grow) {
                                        *o += p * x;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    smoothing,
                    probs,
                } => {
                    let upstream = g.get(0, 0);
                    let (rows, vocab) = probs.shape();
                    let mut d = Matrix::zeros(rows, vocab);
                    let uniform = smoothing / vocab as f64;
                    for r in 0..rows {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let pr = probs.row(r);
                        let dr = d.row_mut(r);
                        for c in 0..vocab {
                            dr[c] = pr[c] - uniform;
                        }
                        dr[targets[r]] -= 1.0 - smoothing;
                        for x in dr.iter_mut() {
                            *x *= upstream * w;
                        }
                    }
                    acc(&mut grads, *logits, d);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of a scalar function of one constant input.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, input: Matrix) {
        let mut tape = Tape::new();
        let x = tape.param(0, &input, input.rows(), input.cols());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = &grads.iter().find(|g| g.id == 0).unwrap().block;
        let h = 1e-5;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.as_mut_slice()[i] += delta;
                let mut t = Tape::new();
                let xv = t.param(0, &m, m.rows(), m.cols());
                let l = build(&mut t, xv);
                t.value(l).get(0, 0)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice()[i];
            assert!(
                (a - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn input(rows: usize, cols: usize, phase: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| ((i * cols + j) as f64 * 0.37 + phase).sin())
    }

    fn to_scalar(t: &mut Tape, v: Var) -> Var {
        let (rows, cols) = t.value(v).shape();
        let targets = (0..rows).map(|r| r % cols).collect();
        t.cross_entropy(v, targets, vec![1.0; rows], 0.1)
    }

    #[test]
    fn layer_norm_gradient() {
        check(
            |t, x| {
                let g = t.constant(input(1, 5, 0.5).map(|v| 1.0 + v));
                let b = t.constant(input(1, 5, 1.5));
                let y = t.layer_norm(x, g, b);
                to_scalar(t, y)
            },
            input(3, 5, 0.1),
        );
    }

    #[test]
    fn attention_gradient_through_q_k_v() {
        let mask = AttnMask {
            batch: 2,
            q_len: 3,
            k_len: 3,
            causal: true,
            key_valid: vec![true, true, false, true, true, true],
        };
        check(
            move |t, x| {
                let w = t.constant(input(4, 4, 2.0));
                let k = t.matmul(x, w);
                let y = t.attention(x, k, x, 2, mask.clone());
                to_scalar(t, y)
            },
            input(6, 4, 0.3),
        );
    }

    #[test]
    fn matmul_gather_concat_relu_gradient() {
        check(
            |t, x| {
                let w = t.constant(input(3, 4, 0.9));
                let a = t.matmul(x, w);
                let b = t.matmul_nt(x, x);
                let r = t.relu(a);
                let g = t.gather_rows(r, vec![1, 0, 1]);
                let c = t.concat_rows(vec![g, r]);
                let s = t.scale(c, 0.7);
                let _ = b;
                to_scalar(t, s)
            },
            input(2, 3, 0.2),
        );
        check(
            |t, x| {
                let b = t.matmul_nt(x, x);
                let y = t.add(b, b);
                to_scalar(t, y)
            },
            input(3, 3, 0.4),
        );
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let mut t = Tape::new();
        let x = t.constant(input(2, 2, 0.0));
        let mask = AttnMask {
            batch: 1,
            q_len: 2,
            k_len: 2,
            causal: false,
            key_valid: vec![false, false],
        };
        let y = t.attention(x, x, x, 1, mask);
        assert!(t.value(y).as_slice().iter().all(|&v| v == 0.0));
        assert!(t.attention_probs(y).unwrap().iter().all(|&p| p == 0.0));
    }
}
