//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! A [`Graph`] is built per forward pass; trainable tensors live in a
//! [`ParamStore`] and enter the graph by reference. After
//! [`Graph::backward`], gradients for parameters are folded into a
//! [`ParamGrads`] buffer aligned with the store.
//!
//! Besides the usual dense ops the tape carries a few fused ops with
//! hand-written adjoints: multi-head masked attention, hierarchical rotary
//! rotation, pairwise Gram volumes, and the Gaussian likelihood terms used by
//! the mutual-information estimator.

use std::sync::Arc;

use crate::tensor::{adjugate, determinant, gemm_acc, Matrix};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::all_finite)
    }

    /// Round every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Matrix>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: store
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_in_place(s);
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-token rotation tables for [`Graph::rope`]: `cos`/`sin` are
/// `tokens x head_dim/2`, pair `p` of every head rotates by the angle in
/// column `p`.
#[derive(Clone, Debug)]
pub struct RopeAngles {
    pub cos: Matrix,
    pub sin: Matrix,
}

/// For each query row, the sorted key rows it may attend to.
pub type KeySets = Arc<Vec<Vec<u32>>>;

#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub n_q: usize,
    pub n_kv: usize,
    pub head_dim: usize,
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    SumAll(Var),
    SumSq(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxRows(Var),
    BlockSum {
        x: Var,
        block: usize,
    },
    BlockRepeat {
        x: Var,
        block: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        count: usize,
    },
    Rope {
        x: Var,
        angles: Arc<RopeAngles>,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        keys: KeySets,
        shape: AttnShape,
        probs: Vec<f64>,
        offsets: Vec<usize>,
    },
    PairVolumes {
        anchor: Var,
        data: Vec<Var>,
    },
    GaussianLogLik {
        mu: Var,
        log_sigma: Var,
        y: Var,
    },
    ClubEstimate {
        mu: Var,
        log_sigma: Var,
        y: Var,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Volumes below this get a zero (sub)gradient: `sqrt(det)` is not
/// differentiable at zero and the adjugate formula divides by the volume.
pub const VOLUME_GRAD_FLOOR: f64 = 1e-7;

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self
                .params
                .expect("parameter node without a store")
                .get(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Free input that does receive a gradient (used by tests and oracles).
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "graph was built without parameters");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -1.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "shape mismatch in mul");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!(r.shape(), (1, out.cols()), "bias shape mismatch");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gain);
        assert_eq!(g.shape(), (1, xv.cols()));
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let c = xv.cols() as f64;
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|a| a * a).sum::<f64>() / c;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, a), gg) in out.row_mut(r).iter_mut().zip(row).zip(g.data()) {
                *o = a * inv * gg;
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select_rows(ids);
        let rg = self.rg(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = self.value(x).select_rows(rows);
        let rg = self.rg(x);
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_cols(start, end);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(x).frobenius_sq());
        let rg = self.rg(x);
        self.push(out, Op::SumSq(x), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = crate::tensor::norm(xv.row(r));
            norms.push(n);
            for o in out.row_mut(r) {
                *o /= n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// `[n, h*block] -> [n, h]`, summing contiguous column blocks.
    pub fn block_sum(&mut self, x: Var, block: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols() % block, 0);
        let h = xv.cols() / block;
        let mut out = Matrix::zeros(xv.rows(), h);
        for r in 0..xv.rows() {
            for (j, chunk) in xv.row(r).chunks_exact(block).enumerate() {
                out[(r, j)] = chunk.iter().sum();
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::BlockSum { x, block }, rg)
    }

    /// `[n, h] -> [n, h*block]`, repeating each column `block` times.
    pub fn block_repeat(&mut self, x: Var, block: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows(), xv.cols() * block);
        for r in 0..xv.rows() {
            for (j, &v) in xv.row(r).iter().enumerate() {
                out.row_mut(r)[j * block..(j + 1) * block].fill(v);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::BlockRepeat { x, block }, rg)
    }

    /// Mean softmax cross-entropy over rows with a target; rows with `None`
    /// are ignored. Panics if no row is supervised.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        let mut probs = lv.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            if let Some(t) = t {
                total += lse - row[*t];
                count += 1;
            }
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        assert!(count > 0, "cross entropy with no supervised rows");
        let out = Matrix::filled(1, 1, total / count as f64);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Rotates adjacent pairs of every head by the per-token angles.
    pub fn rope(&mut self, x: Var, angles: Arc<RopeAngles>, head_dim: usize) -> Var {
        let out = rotate_heads(self.value(x), &angles, head_dim, false);
        let rg = self.rg(x);
        self.push(
            out,
            Op::Rope {
                x,
                angles,
                head_dim,
            },
            rg,
        )
    }

    /// Grouped-query attention restricted to `keys[q]` for each query row.
    /// Query head `h` reads key/value head `h / (n_q / n_kv)`. Rows with no
    /// visible key produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, keys: KeySets, shape: AttnShape) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttnShape {
            n_q,
            n_kv,
            head_dim,
        } = shape;
        assert_eq!(qv.cols(), n_q * head_dim);
        assert_eq!(kv.cols(), n_kv * head_dim);
        assert_eq!(vv.cols(), n_kv * head_dim);
        assert_eq!(keys.len(), qv.rows());
        let group = n_q / n_kv;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut offsets = Vec::with_capacity(keys.len() + 1);
        let mut acc = 0;
        for ks in keys.iter() {
            offsets.push(acc);
            acc += ks.len();
        }
        offsets.push(acc);
        let mut probs = vec![0.0; acc * n_q];
        let mut out = Matrix::zeros(qv.rows(), n_q * head_dim);
        for (i, ks) in keys.iter().enumerate() {
            if ks.is_empty() {
                continue;
            }
            for h in 0..n_q {
                let g = h / group;
                let qh = &qv.row(i)[h * head_dim..(h + 1) * head_dim];
                let p = &mut probs[offsets[i] * n_q + h * ks.len()..][..ks.len()];
                for (slot, &kj) in p.iter_mut().zip(ks.iter()) {
                    let kh = &kv.row(kj as usize)[g * head_dim..(g + 1) * head_dim];
                    *slot = crate::tensor::dot(qh, kh) * scale;
                }
                softmax_in_place(p);
                let o = &mut out.row_mut(i)[h * head_dim..(h + 1) * head_dim];
                for (&w, &kj) in p.iter().zip(ks.iter()) {
                    let vh = &vv.row(kj as usize)[g * head_dim..(g + 1) * head_dim];
                    for (a, b) in o.iter_mut().zip(vh) {
                        *a += w * b;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                keys,
                shape,
                probs,
                offsets,
            },
            rg,
        )
    }

    /// `out[k][i] = Vol(anchor_k, data[0]_i, data[1]_i, ...)` where `Vol` is
    /// the square root of the (clamped) Gram determinant.
    pub fn pair_volumes(&mut self, anchor: Var, data: &[Var]) -> Var {
        let a = self.value(anchor);
        let b = a.rows();
        let mut out = Matrix::zeros(b, b);
        for k in 0..b {
            for i in 0..b {
                let g = self.gram_for(anchor, data, k, i);
                out[(k, i)] = determinant(&g).max(0.0).sqrt();
            }
        }
        let rg = self.rg(anchor) || data.iter().any(|&d| self.rg(d));
        self.push(
            out,
            Op::PairVolumes {
                anchor,
                data: data.to_vec(),
            },
            rg,
        )
    }

    fn pair_rows(&self, anchor: Var, data: &[Var], k: usize, i: usize) -> Vec<&[f64]> {
        let mut rows = vec![self.value(anchor).row(k)];
        rows.extend(data.iter().map(|&d| self.value(d).row(i)));
        rows
    }

    fn gram_for(&self, anchor: Var, data: &[Var], k: usize, i: usize) -> Matrix {
        let rows = self.pair_rows(anchor, data, k, i);
        gram(&rows)
    }

    /// Mean over rows of `log N(y_k; mu_k, diag(exp(log_sigma_k))^2)`.
    pub fn gaussian_log_lik(&mut self, mu: Var, log_sigma: Var, y: Var) -> Var {
        let (m, s, yv) = (self.value(mu), self.value(log_sigma), self.value(y));
        assert_eq!(m.shape(), s.shape());
        assert_eq!(m.shape(), yv.shape());
        let b = m.rows() as f64;
        let mut total = 0.0;
        for ((mi, si), yi) in m.data().iter().zip(s.data()).zip(yv.data()) {
            let z = (yi - mi) * (-si).exp();
            total += -0.5 * z * z - si - HALF_LN_2PI;
        }
        let out = Matrix::filled(1, 1, total / b);
        let rg = self.rg(mu) || self.rg(log_sigma) || self.rg(y);
        self.push(out, Op::GaussianLogLik { mu, log_sigma, y }, rg)
    }

    /// Batch contrastive log-ratio estimate:
    /// `1/B sum_k log q(y_k|x_k) - 1/B^2 sum_k sum_l log q(y_l|x_k)` where
    /// row `k` of `mu`/`log_sigma` parameterises `q(.|x_k)`.
    pub fn club_estimate(&mut self, mu: Var, log_sigma: Var, y: Var) -> Var {
        let value = club_value(self.value(mu), self.value(log_sigma), self.value(y));
        let rg = self.rg(mu) || self.rg(log_sigma) || self.rg(y);
        self.push(
            Matrix::filled(1, 1, value),
            Op::ClubEstimate { mu, log_sigma, y },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = match &node.value {
            Value::Owned(m) => m,
            Value::Param(_) => return,
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let ga = grad_slot(grads, *a, av.rows(), av.cols());
                    gemm_acc(g, false, self.value(*b), true, ga, 1.0);
                }
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let gb = grad_slot(grads, *b, bv.rows(), bv.cols());
                    gemm_acc(self.value(*a), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g, 1.0);
                self.acc(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g, 1.0);
                self.acc(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let t = elementwise(g, self.value(*b), |x, y| x * y);
                    self.acc(grads, *a, &t, 1.0);
                }
                if self.rg(*b) {
                    let t = elementwise(g, self.value(*a), |x, y| x * y);
                    self.acc(grads, *b, &t, 1.0);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g, 1.0);
                if self.rg(*row) {
                    let gr = grad_slot(grads, *row, 1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g, *s),
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let c = xv.cols();
                if self.rg(*gain) {
                    let gg = grad_slot(grads, *gain, 1, c);
                    for r in 0..xv.rows() {
                        for ((o, a), d) in gg.data_mut().iter_mut().zip(xv.row(r)).zip(g.row(r)) {
                            *o += d * a * inv_rms[r];
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = grad_slot(grads, *x, xv.rows(), c);
                    for r in 0..xv.rows() {
                        let inv = inv_rms[r];
                        let xr = xv.row(r);
                        let dr = g.row(r);
                        let mut m = 0.0;
                        for j in 0..c {
                            m += dr[j] * gv.data()[j] * xr[j] * inv;
                        }
                        m /= c as f64;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            let dxhat = dr[j] * gv.data()[j];
                            *o += inv * (dxhat - xr[j] * inv * m);
                        }
                    }
                }
            }
            Op::Silu(a) => {
                let t = elementwise(g, self.value(*a), |d, x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    d * s * (1.0 + x * (1.0 - s))
                });
                self.acc(grads, *a, &t, 1.0);
            }
            Op::Tanh(a) => {
                let t = elementwise(g, out, |d, y| d * (1.0 - y * y));
                self.acc(grads, *a, &t, 1.0);
            }
            Op::Exp(a) => {
                let t = elementwise(g, out, |d, y| d * y);
                self.acc(grads, *a, &t, 1.0);
            }
            Op::Gather { table: src, ids } | Op::SelectRows { x: src, rows: ids } => {
                if self.rg(*src) {
                    let sv = self.value(*src);
                    let gt = grad_slot(grads, *src, sv.rows(), sv.cols());
                    for (i, &r) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let gx = grad_slot(grads, *x, xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gx.row_mut(r)[*start..].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Transpose(x) => self.acc(grads, *x, &g.transpose(), 1.0),
            Op::SumAll(x) => {
                let xv = self.value(*x);
                let t = Matrix::filled(xv.rows(), xv.cols(), g[(0, 0)]);
                self.acc(grads, *x, &t, 1.0);
            }
            Op::SumSq(x) => self.acc(grads, *x, self.value(*x), 2.0 * g[(0, 0)]),
            Op::L2NormalizeRows { x, norms } => {
                let mut t = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let d = g.row(r);
                    let yd = crate::tensor::dot(y, d);
                    for ((o, yy), dd) in t.row_mut(r).iter_mut().zip(y).zip(d) {
                        *o = (dd - yy * yd) / norms[r];
                    }
                }
                self.acc(grads, *x, &t, 1.0);
            }
            Op::SoftmaxRows(x) => {
                let mut t = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let d = g.row(r);
                    let yd = crate::tensor::dot(y, d);
                    for ((o, yy), dd) in t.row_mut(r).iter_mut().zip(y).zip(d) {
                        *o = yy * (dd - yd);
                    }
                }
                self.acc(grads, *x, &t, 1.0);
            }
            Op::BlockSum { x, block } => {
                let t = Matrix::from_vec(
                    g.rows(),
                    g.cols() * block,
                    g.data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v, *block))
                        .collect(),
                );
                self.acc(grads, *x, &t, 1.0);
            }
            Op::BlockRepeat { x, block } => {
                let t = Matrix::from_vec(
                    g.rows(),
                    g.cols() / block,
                    g.data().chunks_exact(*block).map(|c| c.iter().sum()).collect(),
                );
                self.acc(grads, *x, &t, 1.0);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let s = g[(0, 0)] / *count as f64;
                let mut t = Matrix::zeros(probs.rows(), probs.cols());
                for (r, tgt) in targets.iter().enumerate() {
                    if let Some(tgt) = tgt {
                        for (o, p) in t.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = s * p;
                        }
                        t[(r, *tgt)] -= s;
                    }
                }
                self.acc(grads, *logits, &t, 1.0);
            }
            Op::Rope {
                x,
                angles,
                head_dim,
            } => {
                let t = rotate_heads(g, angles, *head_dim, true);
                self.acc(grads, *x, &t, 1.0);
            }
            Op::Attention {
                q,
                k,
                v,
                keys,
                shape,
                probs,
                offsets,
            } => self.attention_backward(g, grads, (*q, *k, *v), keys, *shape, probs, offsets),
            Op::PairVolumes { anchor, data } => {
                self.pair_volumes_backward(g, out, grads, *anchor, data)
            }
            Op::GaussianLogLik { mu, log_sigma, y } => {
                let (m, s, yv) = (self.value(*mu), self.value(*log_sigma), self.value(*y));
                let b = m.rows() as f64;
                let sc = g[(0, 0)] / b;
                let mut dmu = Matrix::zeros(m.rows(), m.cols());
                let mut ds = Matrix::zeros(m.rows(), m.cols());
                for i in 0..m.len() {
                    let inv_var = (-2.0 * s.data()[i]).exp();
                    let diff = yv.data()[i] - m.data()[i];
                    dmu.data_mut()[i] = sc * diff * inv_var;
                    ds.data_mut()[i] = sc * (diff * diff * inv_var - 1.0);
                }
                if self.rg(*y) {
                    self.acc(grads, *y, &dmu, -1.0);
                }
                self.acc(grads, *mu, &dmu, 1.0);
                self.acc(grads, *log_sigma, &ds, 1.0);
            }
            Op::ClubEstimate { mu, log_sigma, y } => {
                let (dmu, ds, dy) =
                    club_grad(self.value(*mu), self.value(*log_sigma), self.value(*y));
                let sc = g[(0, 0)];
                self.acc(grads, *mu, &dmu, sc);
                self.acc(grads, *log_sigma, &ds, sc);
                self.acc(grads, *y, &dy, sc);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], target: Var, g: &Matrix, scale: f64) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_scaled(g, scale),
            slot @ None => {
                let mut m = g.clone();
                if scale != 1.0 {
                    m.scale_in_place(scale);
                }
                *slot = Some(m);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
        (q, k, v): (Var, Var, Var),
        keys: &KeySets,
        shape: AttnShape,
        probs: &[f64],
        offsets: &[usize],
    ) {
        let AttnShape {
            n_q,
            n_kv,
            head_dim,
        } = shape;
        let group = n_q / n_kv;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = Matrix::zeros(qv.rows(), qv.cols());
        let mut dk = Matrix::zeros(kv.rows(), kv.cols());
        let mut dv = Matrix::zeros(vv.rows(), vv.cols());
        let mut dp = Vec::new();
        for (i, ks) in keys.iter().enumerate() {
            if ks.is_empty() {
                continue;
            }
            for h in 0..n_q {
                let gh = h / group;
                let p = &probs[offsets[i] * n_q + h * ks.len()..][..ks.len()];
                let go = &g.row(i)[h * head_dim..(h + 1) * head_dim];
                dp.clear();
                for (&w, &kj) in p.iter().zip(ks.iter()) {
                    let kj = kj as usize;
                    let vh = &vv.row(kj)[gh * head_dim..(gh + 1) * head_dim];
                    dp.push(crate::tensor::dot(go, vh));
                    for (o, x) in dv.row_mut(kj)[gh * head_dim..(gh + 1) * head_dim]
                        .iter_mut()
                        .zip(go)
                    {
                        *o += w * x;
                    }
                }
                let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qh = &qv.row(i)[h * head_dim..(h + 1) * head_dim];
                for ((&w, &d), &kj) in p.iter().zip(&dp).zip(ks.iter()) {
                    let kj = kj as usize;
                    let ds = w * (d - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kh = &kv.row(kj)[gh * head_dim..(gh + 1) * head_dim];
                    for (o, x) in dq.row_mut(i)[h * head_dim..(h + 1) * head_dim]
                        .iter_mut()
                        .zip(kh)
                    {
                        *o += ds * x;
                    }
                    for (o, x) in dk.row_mut(kj)[gh * head_dim..(gh + 1) * head_dim]
                        .iter_mut()
                        .zip(qh)
                    {
                        *o += ds * x;
                    }
                }
            }
        }
        self.acc(grads, q, &dq, 1.0);
        self.acc(grads, k, &dk, 1.0);
        self.acc(grads, v, &dv, 1.0);
    }

    fn pair_volumes_backward(
        &self,
        g: &Matrix,
        out: &Matrix,
        grads: &mut [Option<Matrix>],
        anchor: Var,
        data: &[Var],
    ) {
        let av = self.value(anchor);
        let b = av.rows();
        let mut da = Matrix::zeros(av.rows(), av.cols());
        let mut dd: Vec<Matrix> = data
            .iter()
            .map(|&d| Matrix::zeros(self.value(d).rows(), self.value(d).cols()))
            .collect();
        for k in 0..b {
            for i in 0..b {
                let vol = out[(k, i)];
                let gk = g[(k, i)];
                if vol < VOLUME_GRAD_FLOOR || gk == 0.0 {
                    continue;
                }
                let rows = self.pair_rows(anchor, data, k, i);
                let adj = adjugate(&gram(&rows));
                // d vol / d z_r = sum_s adj[r][s] z_s / vol
                for (r, target) in (0..rows.len()).map(|r| (r, r)) {
                    let dst: &mut [f64] = if target == 0 {
                        da.row_mut(k)
                    } else {
                        dd[target - 1].row_mut(i)
                    };
                    for (s, zs) in rows.iter().enumerate() {
                        let c = gk * adj[(r, s)] / vol;
                        if c != 0.0 {
                            for (o, x) in dst.iter_mut().zip(zs.iter()) {
                                *o += c * x;
                            }
                        }
                    }
                }
            }
        }
        self.acc(grads, anchor, &da, 1.0);
        for (&d, m) in data.iter().zip(&dd) {
            self.acc(grads, d, m, 1.0);
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Adds the gradient of every parameter node into `into`, scaled.
    pub fn accumulate(&self, graph: &Graph<'_>, into: &mut ParamGrads, scale: f64) {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Value::Param(id), Some(g)) = (&node.value, g) {
                into.grads[id.0].add_scaled(g, scale);
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Matrix>], v: Var, rows: usize, cols: usize) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn gram(rows: &[&[f64]]) -> Matrix {
    let n = rows.len();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = crate::tensor::dot(rows[i], rows[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

/// Rotates each adjacent pair `(x[2p], x[2p+1])` of every head by the
/// token's angle for pair `p`. `inverse` rotates by the negated angle, which
/// is the adjoint of the forward map.
pub fn rotate_heads(x: &Matrix, angles: &RopeAngles, head_dim: usize, inverse: bool) -> Matrix {
    assert_eq!(x.cols() % head_dim, 0);
    assert_eq!(angles.cos.rows(), x.rows(), "one angle row per token");
    assert_eq!(angles.cos.cols(), head_dim / 2);
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for t in 0..x.rows() {
        let (cs, sn) = (angles.cos.row(t), angles.sin.row(t));
        for head in out.row_mut(t).chunks_exact_mut(head_dim) {
            for (p, pair) in head.chunks_exact_mut(2).enumerate() {
                let (c, s) = (cs[p], sign * sn[p]);
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
    out
}

fn club_value(mu: &Matrix, log_sigma: &Matrix, y: &Matrix) -> f64 {
    let (b, d) = mu.shape();
    let bf = b as f64;
    let (s1, s2) = column_moments(y);
    let mut positive = 0.0;
    let mut all_pairs = 0.0;
    for k in 0..b {
        for i in 0..d {
            let m = mu[(k, i)];
            let s = log_sigma[(k, i)];
            let inv_var = (-2.0 * s).exp();
            let diff = y[(k, i)] - m;
            positive += -0.5 * diff * diff * inv_var - s - HALF_LN_2PI;
            let sq = s2[i] - 2.0 * m * s1[i] + bf * m * m;
            all_pairs += -0.5 * sq * inv_var - bf * (s + HALF_LN_2PI);
        }
    }
    positive / bf - all_pairs / (bf * bf)
}

fn column_moments(y: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let d = y.cols();
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d];
    for r in 0..y.rows() {
        for (i, &v) in y.row(r).iter().enumerate() {
            s1[i] += v;
            s2[i] += v * v;
        }
    }
    (s1, s2)
}

fn club_grad(mu: &Matrix, log_sigma: &Matrix, y: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (b, d) = mu.shape();
    let bf = b as f64;
    let (s1, s2) = column_moments(y);
    let mut dmu = Matrix::zeros(b, d);
    let mut ds = Matrix::zeros(b, d);
    let mut dy = Matrix::zeros(b, d);
    let mut sum_inv_var = vec![0.0; d];
    let mut sum_mu_inv_var = vec![0.0; d];
    for k in 0..b {
        for i in 0..d {
            let m = mu[(k, i)];
            let inv_var = (-2.0 * log_sigma[(k, i)]).exp();
            sum_inv_var[i] += inv_var;
            sum_mu_inv_var[i] += m * inv_var;
            let diff = y[(k, i)] - m;
            dmu[(k, i)] = (y[(k, i)] - s1[i] / bf) * inv_var / bf;
            let sq = s2[i] - 2.0 * m * s1[i] + bf * m * m;
            ds[(k, i)] = diff * diff * inv_var / bf - sq * inv_var / (bf * bf);
        }
    }
    for l in 0..b {
        for i in 0..d {
            let yl = y[(l, i)];
            let inv_var = (-2.0 * log_sigma[(l, i)]).exp();
            dy[(l, i)] = -(yl - mu[(l, i)]) * inv_var / bf
                + (yl * sum_inv_var[i] - sum_mu_inv_var[i]) / (bf * bf);
        }
    }
    (dmu, ds, dy)
}


#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_error;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_m(r: usize, c: usize, seed: u64) -> Matrix {
        Matrix::random_normal(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn dense_ops_gradcheck() {
        let inputs = [rand_m(3, 4, 1), rand_m(4, 5, 2), rand_m(1, 5, 3), rand_m(1, 5, 4)];
        let err = max_rel_error(&inputs, 1e-5, |g, v| {
            let h = g.matmul(v[0], v[1]);
            let h = g.add_row(h, v[2]);
            let n = g.rms_norm(h, v[3], 1e-6);
            let s = g.silu(n);
            let t = g.tanh(h);
            let m = g.mul(s, t);
            let sm = g.softmax_rows(m);
            let bs = g.block_sum(sm, 5);
            let br = g.block_repeat(bs, 2);
            let q = g.sum_sq(br);
            let e = g.exp(t);
            let se = g.sum(e);
            g.add(q, se)
        });
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn cross_entropy_and_selection_gradcheck() {
        let inputs = [rand_m(6, 3, 7), rand_m(4, 5, 8)];
        let err = max_rel_error(&inputs, 1e-5, |g, v| {
            let x = g.gather(v[0], &[0, 2, 2, 5]);
            let xt = g.transpose(x);
            let y = g.matmul(x, xt);
            let sel = g.select_rows(y, &[3, 1]);
            let z = g.matmul(sel, v[1]);
            let sl = g.slice_cols(z, 1, 4);
            g.cross_entropy(sl, &[Some(2), Some(0)])
        });
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut g = Graph::new();
        let l = g.constant(Matrix::zeros(3, 7));
        let ce = g.cross_entropy(l, &[Some(1), None, Some(6)]);
        assert!((g.scalar(ce) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_gradcheck_grouped() {
        let keys: KeySets = Arc::new(vec![vec![0], vec![0, 1], vec![1, 2], vec![0, 2, 3]]);
        let shape = AttnShape {
            n_q: 4,
            n_kv: 2,
            head_dim: 4,
        };
        let angles = Arc::new(RopeAngles {
            cos: rand_m(4, 2, 11).map(f64::cos),
            sin: rand_m(4, 2, 11).map(f64::sin),
        });
        let inputs = [rand_m(4, 16, 9), rand_m(4, 8, 10), rand_m(4, 8, 12)];
        let err = max_rel_error(&inputs, 1e-5, |g, v| {
            let q = g.rope(v[0], angles.clone(), 4);
            let k = g.rope(v[1], angles.clone(), 4);
            let a = g.attention(q, k, v[2], keys.clone(), shape);
            g.sum_sq(a)
        });
        assert!(err < 1e-5, "rel error {err}");
    }

    #[test]
    fn empty_key_row_yields_zero() {
        let mut g = Graph::new();
        let q = g.input(rand_m(2, 4, 1));
        let k = g.input(rand_m(2, 4, 2));
        let v = g.input(rand_m(2, 4, 3));
        let keys: KeySets = Arc::new(vec![vec![], vec![0, 1]]);
        let a = g.attention(
            q,
            k,
            v,
            keys,
            AttnShape {
                n_q: 1,
                n_kv: 1,
                head_dim: 4,
            },
        );
        assert!(g.value(a).row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn volumes_and_normalize_gradcheck() {
        let inputs = [rand_m(3, 5, 21), rand_m(3, 5, 22), rand_m(3, 5, 23)];
        let err = max_rel_error(&inputs, 1e-5, |g, v| {
            let a = g.l2_normalize_rows(v[0]);
            let b = g.l2_normalize_rows(v[1]);
            let c = g.l2_normalize_rows(v[2]);
            let vols = g.pair_volumes(a, &[b, c]);
            let w = g.constant(rand_m(3, 3, 24));
            let p = g.mul(vols, w);
            g.sum(p)
        });
        assert!(err < 1e-5, "rel error {err}");
    }

    #[test]
    fn gaussian_terms_gradcheck() {
        let inputs = [rand_m(5, 3, 31), rand_m(5, 3, 32).map(|x| 0.3 * x), rand_m(5, 3, 33)];
        let err = max_rel_error(&inputs, 1e-5, |g, v| {
            let a = g.club_estimate(v[0], v[1], v[2]);
            let b = g.gaussian_log_lik(v[0], v[1], v[2]);
            let b = g.scale(b, 0.5);
            g.add(a, b)
        });
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn club_value_matches_double_loop() {
        let (mu, s, y) = (rand_m(4, 3, 1), rand_m(4, 3, 2).map(|x| 0.2 * x), rand_m(4, 3, 3));
        let ll = |k: usize, l: usize| -> f64 {
            (0..3)
                .map(|i| {
                    let sig = s[(k, i)].exp();
                    let z = (y[(l, i)] - mu[(k, i)]) / sig;
                    -0.5 * z * z - sig.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .sum()
        };
        let b = 4.0;
        let pos: f64 = (0..4).map(|k| ll(k, k)).sum::<f64>() / b;
        let all: f64 = (0..4).flat_map(|k| (0..4).map(move |l| (k, l))).map(|(k, l)| ll(k, l)).sum::<f64>()
            / (b * b);
        assert!((club_value(&mu, &s, &y) - (pos - all)).abs() < 1e-10);
    }

    #[test]
    fn params_flow_into_grad_buffer() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_rows(&[vec![1.0, 2.0]]));
        let mut g = Graph::with_params(&store);
        let wv = g.param(w);
        let l = g.sum_sq(wv);
        let grads = g.backward(l);
        let mut buf = ParamGrads::zeros_like(&store);
        grads.accumulate(&g, &mut buf, 0.5);
        assert_eq!(buf.get(w).data(), &[1.0, 2.0]);
    }
}
