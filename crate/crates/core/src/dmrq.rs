//! Disentangled modal-residual quantization.
//!
//! A fused view of each item is quantized by a stack of shared residual
//! codebooks. The last shared residual is unfolded into `H` subspaces that
//! each modality's own vector attends over (PSGR) to recover its specific
//! part, which one codebook per modality then quantizes. A variational
//! upper bound on the mutual information between the shared reconstruction
//! and each specific code vector is penalised during training.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads, ParamId, ParamStore, Var};
use crate::cga::ModalEmbeddingSet;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{stage_rng, StageRng};
use crate::tensor::{cosine, squared_distance, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseKind {
    Mean,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmrqConfig {
    pub n_shared: usize,
    pub codebook_size: usize,
    pub heads: usize,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub fuse: FuseKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier for the linear fusion maps.
    pub fuse_lr_scale: f64,
    pub estimator_lr: f64,
    /// Hidden width of the estimator networks; 0 means `d`.
    pub estimator_hidden: usize,
    pub kmeans_iters: usize,
    pub reseed_dead: bool,
}

impl Default for DmrqConfig {
    fn default() -> Self {
        DmrqConfig {
            n_shared: 3,
            codebook_size: 512,
            heads: 4,
            beta: 1.0,
            lambda: 0.1,
            gamma: 0.25,
            fuse: FuseKind::Mean,
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            fuse_lr_scale: 0.05,
            estimator_lr: 1e-3,
            estimator_hidden: 0,
            kmeans_iters: 10,
            reseed_dead: true,
        }
    }
}

impl DmrqConfig {
    pub fn violations(&self, d: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_shared == 0 {
            v.push("dmrq.n_shared must be at least 1".into());
        }
        if self.codebook_size < 2 {
            v.push("dmrq.codebook_size must be at least 2".into());
        }
        if self.heads == 0 || d % self.heads != 0 {
            v.push(format!(
                "dmrq.heads ({}) must divide the aligned dimension ({d}) so that H * d_h = d",
                self.heads
            ));
        }
        for (name, x) in [("beta", self.beta), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("dmrq.{name} must be finite and >= 0 (got {x})"));
            }
        }
        if self.batch_size == 0 {
            v.push("dmrq.batch_size must be positive".into());
        }
        v
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl LossWeights {
    fn check(&self) -> Result<()> {
        for (name, x) in [("beta", self.beta), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(x >= 0.0) {
                return Err(Error::config(format!("{name} must be >= 0, got {x}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CodebookKind {
    Shared,
    Specific(usize),
}

/// Borrowed view of one codebook in a stack.
#[derive(Clone, Copy, Debug)]
pub struct Codebook<'a> {
    pub kind: CodebookKind,
    pub layer: usize,
    pub entries: &'a Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct PsgrIds {
    wq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
}

/// Shared and specific codebooks plus the fusion and PSGR parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookStack {
    store: ParamStore,
    shared: Vec<ParamId>,
    specific: Vec<ParamId>,
    fuse: Option<Vec<ParamId>>,
    psgr: PsgrIds,
    d: usize,
    heads: usize,
}

impl CodebookStack {
    /// Fresh stack with zero codebooks; see [`init_stack`] for data-driven
    /// codebook seeding.
    pub fn new(d: usize, n_modalities: usize, n_shared: usize, v: usize, heads: usize, fuse: FuseKind, seed: u64) -> Self {
        assert!(heads > 0 && d % heads == 0, "heads must divide d");
        let mut rng = stage_rng(seed, "dmrq.init");
        let mut store = ParamStore::new();
        let shared = (0..n_shared)
            .map(|k| store.add(format!("cb.shared.{k}"), Matrix::zeros(v, d)))
            .collect();
        let specific = (0..n_modalities)
            .map(|j| store.add(format!("cb.specific.{j}"), Matrix::zeros(v, d)))
            .collect();
        let fuse = (fuse == FuseKind::Linear).then(|| {
            (0..n_modalities)
                .map(|j| {
                    let mut a = Matrix::identity(d);
                    a.scale_in_place(1.0 / n_modalities as f64);
                    store.add(format!("fuse.{j}"), a)
                })
                .collect()
        });
        let std = 1.0 / (d as f64).sqrt();
        let mut w = |name: &str, rng: &mut StageRng| store.add(name, Matrix::random_normal(d, d, std, rng));
        let wq = w("psgr.wq", &mut rng);
        let wk = w("psgr.wk", &mut rng);
        let wv = w("psgr.wv", &mut rng);
        let wo = w("psgr.wo", &mut rng);
        let bk = store.add("psgr.bk", Matrix::zeros(1, d));
        let bv = store.add("psgr.bv", Matrix::zeros(1, d));
        CodebookStack {
            store,
            shared,
            specific,
            fuse,
            psgr: PsgrIds {
                wq,
                wk,
                bk,
                wv,
                bv,
                wo,
            },
            d,
            heads,
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn n_shared(&self) -> usize {
        self.shared.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.specific.len()
    }

    pub fn fuse_kind(&self) -> FuseKind {
        if self.fuse.is_some() {
            FuseKind::Linear
        } else {
            FuseKind::Mean
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn shared_book(&self, k: usize) -> Codebook<'_> {
        Codebook {
            kind: CodebookKind::Shared,
            layer: k,
            entries: self.store.get(self.shared[k]),
        }
    }

    pub fn specific_book(&self, j: usize) -> Codebook<'_> {
        Codebook {
            kind: CodebookKind::Specific(j),
            layer: self.shared.len() + j,
            entries: self.store.get(self.specific[j]),
        }
    }

    /// All codebooks in token order: shared layers, then modalities.
    pub fn books(&self) -> Vec<Codebook<'_>> {
        (0..self.n_shared())
            .map(|k| self.shared_book(k))
            .chain((0..self.n_modalities()).map(|j| self.specific_book(j)))
            .collect()
    }

    pub fn codebook_sizes(&self) -> Vec<usize> {
        self.books().iter().map(|b| b.entries.rows()).collect()
    }

    fn book_id(&self, layer: usize) -> ParamId {
        if layer < self.shared.len() {
            self.shared[layer]
        } else {
            self.specific[layer - self.shared.len()]
        }
    }

    fn vars(&self, g: &mut Graph<'_>) -> StackVars {
        StackVars {
            shared: self.shared.iter().map(|&id| g.param(id)).collect(),
            specific: self.specific.iter().map(|&id| g.param(id)).collect(),
            fuse: self.fuse.as_ref().map(|ids| ids.iter().map(|&id| g.param(id)).collect()),
            psgr: PsgrVars {
                wq: g.param(self.psgr.wq),
                wk: g.param(self.psgr.wk),
                bk: g.param(self.psgr.bk),
                wv: g.param(self.psgr.wv),
                bv: g.param(self.psgr.bv),
                wo: g.param(self.psgr.wo),
            },
            heads: self.heads,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    /// `HISAM-CB v1` header with the shape summary, then every tensor as a
    /// `name rows cols` line followed by little-endian `f64` data.
    pub fn encode(&self) -> Vec<u8> {
        let sizes: Vec<String> = self.codebook_sizes().iter().map(usize::to_string).collect();
        let fuse = match self.fuse_kind() {
            FuseKind::Mean => "mean",
            FuseKind::Linear => "linear",
        };
        let mut out = format!(
            "HISAM-CB v1 {} {} {} {} {} {} {} {}\n",
            self.n_shared(),
            self.n_modalities(),
            sizes.join(" "),
            self.d,
            self.heads,
            self.head_dim(),
            fuse,
            self.store.len()
        )
        .into_bytes();
        for (name, m) in self.store.iter() {
            out.extend_from_slice(format!("{name} {} {}\n", m.rows(), m.cols()).as_bytes());
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes, path)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut line_no = 0;
        let mut next_line = |pos: &mut usize| -> Result<String> {
            line_no += 1;
            let end = bytes[*pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|p| *pos + p)
                .ok_or_else(|| Error::parse(path, line_no, "unexpected end of file"))?;
            let s = std::str::from_utf8(&bytes[*pos..end])
                .map_err(|_| Error::parse(path, line_no, "header is not UTF-8"))?
                .to_string();
            *pos = end + 1;
            Ok(s)
        };
        let header = next_line(&mut pos)?;
        let f: Vec<&str> = header.split_whitespace().collect();
        let bad = |m: &str| Error::parse(path, 1, m.to_string());
        if f.len() < 4 || f[0] != "HISAM-CB" || f[1] != "v1" {
            return Err(bad("expected `HISAM-CB v1` header"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer in header"));
        let n_sh = num(f[2])?;
        let n_m = num(f[3])?;
        if f.len() != 4 + n_sh + n_m + 5 {
            return Err(bad("header field count does not match codebook count"));
        }
        let sizes = f[4..4 + n_sh + n_m].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let rest = &f[4 + n_sh + n_m..];
        let (d, heads, d_h) = (num(rest[0])?, num(rest[1])?, num(rest[2])?);
        let fuse = match rest[3] {
            "mean" => FuseKind::Mean,
            "linear" => FuseKind::Linear,
            other => return Err(bad(&format!("unknown fuse kind {other}"))),
        };
        let n_tensors = num(rest[4])?;
        if heads == 0 || heads * d_h != d {
            return Err(bad("H * d_h must equal d"));
        }
        let mut store = ParamStore::new();
        for _ in 0..n_tensors {
            let l = next_line(&mut pos)?;
            let p: Vec<&str> = l.split_whitespace().collect();
            if p.len() != 3 {
                return Err(Error::parse(path, 0, format!("bad tensor line `{l}`")));
            }
            let (r, c) = (num(p[1])?, num(p[2])?);
            let end = pos + 8 * r * c;
            if end > bytes.len() {
                return Err(Error::parse(path, 0, format!("tensor {} truncated", p[0])));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
                .collect();
            pos = end;
            store.add(p[0], Matrix::from_vec(r, c, data));
        }
        if pos != bytes.len() {
            return Err(Error::parse(path, 0, "trailing bytes after last tensor"));
        }
        let find = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| Error::parse(path, 0, format!("missing tensor {name}")))
        };
        let shared = (0..n_sh).map(|k| find(format!("cb.shared.{k}"))).collect::<Result<Vec<_>>>()?;
        let specific = (0..n_m).map(|j| find(format!("cb.specific.{j}"))).collect::<Result<Vec<_>>>()?;
        let fuse_ids = match fuse {
            FuseKind::Mean => None,
            FuseKind::Linear => Some((0..n_m).map(|j| find(format!("fuse.{j}"))).collect::<Result<Vec<_>>>()?),
        };
        let psgr = PsgrIds {
            wq: find("psgr.wq".into())?,
            wk: find("psgr.wk".into())?,
            bk: find("psgr.bk".into())?,
            wv: find("psgr.wv".into())?,
            bv: find("psgr.bv".into())?,
            wo: find("psgr.wo".into())?,
        };
        let stack = CodebookStack {
            store,
            shared,
            specific,
            fuse: fuse_ids,
            psgr,
            d,
            heads,
        };
        if stack.codebook_sizes() != sizes || stack.books().iter().any(|b| b.entries.cols() != d) {
            return Err(Error::parse(path, 0, "codebook shapes disagree with the header"));
        }
        if !stack.store.all_finite() {
            return Err(Error::parse(path, 0, "non-finite parameter"));
        }
        Ok(stack)
    }
}

struct PsgrVars {
    wq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
}

struct StackVars {
    shared: Vec<Var>,
    specific: Vec<Var>,
    fuse: Option<Vec<Var>>,
    psgr: PsgrVars,
    heads: usize,
}

/// Nearest row of `entries` to `x` by squared distance; ties go to the
/// lowest index.
pub fn nearest_entry(entries: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, e) in entries.iter_rows().enumerate() {
        let dist = squared_distance(e, x);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

/// `Φ_fuse`: mean of the modality vectors, or the learned linear map.
pub fn fuse(z: &[Vec<f64>], stack: &CodebookStack) -> Vec<f64> {
    let d = stack.d;
    let mut f = vec![0.0; d];
    match &stack.fuse {
        None => {
            for zj in z {
                for (a, b) in f.iter_mut().zip(zj) {
                    *a += b;
                }
            }
            let n = z.len() as f64;
            for a in &mut f {
                *a /= n;
            }
        }
        Some(ids) => {
            for (zj, &id) in z.iter().zip(ids) {
                let y = Matrix::row_vector(zj.clone()).matmul(stack.store.get(id));
                for (a, b) in f.iter_mut().zip(y.data()) {
                    *a += b;
                }
            }
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedQuantization {
    pub codes: Vec<usize>,
    pub z_hat: Vec<f64>,
    /// `r_k` after each layer; the last one feeds PSGR.
    pub residuals: Vec<Vec<f64>>,
}

impl SharedQuantization {
    pub fn residual(&self) -> &[f64] {
        self.residuals.last().expect("at least one layer")
    }
}

/// Greedy residual quantization: `r_0 = f`, `c_k = argmin_v |r_{k-1} - e_v|`,
/// `r_k = r_{k-1} - e_{c_k}`, `z_hat = e_{c_1} + ... + e_{c_K}`.
pub fn residual_quantize_shared(f: &[f64], books: &[&Matrix]) -> SharedQuantization {
    let mut r = f.to_vec();
    let mut z_hat = vec![0.0; f.len()];
    let mut codes = Vec::with_capacity(books.len());
    let mut residuals = Vec::with_capacity(books.len());
    for book in books {
        let (c, _) = nearest_entry(book, &r);
        let e = book.row(c);
        for ((ri, zi), ei) in r.iter_mut().zip(&mut z_hat).zip(e) {
            *ri -= ei;
            *zi += ei;
        }
        codes.push(c);
        residuals.push(r.clone());
    }
    SharedQuantization {
        codes,
        z_hat,
        residuals,
    }
}

pub fn quantize_specific(x: &[f64], book: &Matrix) -> (usize, Vec<f64>) {
    let (c, _) = nearest_entry(book, x);
    (c, book.row(c).to_vec())
}

/// Attention of the probe over the `H` subspaces of the residual.
pub fn psgr_recover(r: &[f64], probe: &[f64], stack: &CodebookStack) -> Vec<f64> {
    let mut g = Graph::with_params(&stack.store);
    let vars = stack.vars(&mut g);
    let rv = g.constant(Matrix::row_vector(r.to_vec()));
    let pv = g.constant(Matrix::row_vector(probe.to_vec()));
    let out = psgr_on_tape(&mut g, &vars.psgr, vars.heads, rv, pv);
    g.value(out).data().to_vec()
}

/// Head weights `softmax_h(<q_h, k_h> / sqrt(d_h))` for one residual/probe.
pub fn psgr_weights(r: &[f64], probe: &[f64], stack: &CodebookStack) -> Vec<f64> {
    let mut g = Graph::with_params(&stack.store);
    let vars = stack.vars(&mut g);
    let rv = g.constant(Matrix::row_vector(r.to_vec()));
    let pv = g.constant(Matrix::row_vector(probe.to_vec()));
    let (w, _) = psgr_parts(&mut g, &vars.psgr, vars.heads, rv, pv);
    g.value(w).data().to_vec()
}

fn psgr_parts(g: &mut Graph<'_>, p: &PsgrVars, heads: usize, r: Var, probe: Var) -> (Var, Var) {
    let d = g.value(r).cols();
    let dh = d / heads;
    let k = g.matmul(r, p.wk);
    let k = g.add_row(k, p.bk);
    let v = g.matmul(r, p.wv);
    let v = g.add_row(v, p.bv);
    let q = g.matmul(probe, p.wq);
    let qk = g.mul(q, k);
    let scores = g.block_sum(qk, dh);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let w = g.softmax_rows(scores);
    (w, v)
}

fn psgr_on_tape(g: &mut Graph<'_>, p: &PsgrVars, heads: usize, r: Var, probe: Var) -> Var {
    let d = g.value(r).cols();
    let (w, v) = psgr_parts(g, p, heads, r, probe);
    let wr = g.block_repeat(w, d / heads);
    let mixed = g.mul(wr, v);
    g.matmul(mixed, p.wo)
}

/// Conditional diagonal Gaussian `q(x | z) = N(mu(z), sigma(z)^2 I)`. Both
/// maps are one-hidden-layer tanh MLPs; the variance head ends in a tanh so
/// that `log sigma^2` stays in `(-1, 1)`.
#[derive(Clone, Debug)]
pub struct VariationalEstimator {
    store: ParamStore,
    ids: [ParamId; 8],
    opt: Adam,
}

struct EstimatorVars([Var; 8]);

impl VariationalEstimator {
    pub fn new(d: usize, hidden: usize, lr: f64, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let s1 = 1.0 / (d as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let ids = [
            store.add("mu.w1", Matrix::random_normal(d, hidden, s1, rng)),
            store.add("mu.b1", Matrix::zeros(1, hidden)),
            store.add("mu.w2", Matrix::random_normal(hidden, d, s2, rng)),
            store.add("mu.b2", Matrix::zeros(1, d)),
            store.add("ls.w1", Matrix::random_normal(d, hidden, s1, rng)),
            store.add("ls.b1", Matrix::zeros(1, hidden)),
            store.add("ls.w2", Matrix::random_normal(hidden, d, 0.1 * s2, rng)),
            store.add("ls.b2", Matrix::zeros(1, d)),
        ];
        let opt = Adam::new(&store, lr);
        VariationalEstimator { store, ids, opt }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.lr = lr;
    }

    fn param_vars(&self, g: &mut Graph<'_>) -> EstimatorVars {
        EstimatorVars(self.ids.map(|id| g.param(id)))
    }

    fn const_vars(&self, g: &mut Graph<'_>) -> EstimatorVars {
        EstimatorVars(self.ids.map(|id| g.constant(self.store.get(id).clone())))
    }

    /// `(mu(z), sigma(z))` for each row of `z`.
    pub fn conditional(&self, z: &Matrix) -> (Matrix, Matrix) {
        let mut g = Graph::new();
        let ev = self.const_vars(&mut g);
        let zv = g.constant(z.clone());
        let (mu, ls) = estimator_on_tape(&mut g, &ev, zv);
        (g.value(mu).clone(), g.value(ls).map(f64::exp))
    }

    /// Mean log-likelihood of `x_k` under `q(. | z_k)`.
    pub fn log_likelihood(&self, z: &Matrix, x: &Matrix) -> f64 {
        let mut g = Graph::new();
        let ev = self.const_vars(&mut g);
        let zv = g.constant(z.clone());
        let xv = g.constant(x.clone());
        let (mu, ls) = estimator_on_tape(&mut g, &ev, zv);
        let ll = g.gaussian_log_lik(mu, ls, xv);
        g.scalar(ll)
    }

    /// One ascent step on the mean log-likelihood; returns the value before
    /// the step.
    pub fn fit_step(&mut self, z: &Matrix, x: &Matrix) -> f64 {
        assert!(z.rows() > 0, "empty estimator batch");
        let mut grads = ParamGrads::zeros_like(&self.store);
        let value = {
            let mut g = Graph::with_params(&self.store);
            let ev = self.param_vars(&mut g);
            let zv = g.constant(z.clone());
            let xv = g.constant(x.clone());
            let (mu, ls) = estimator_on_tape(&mut g, &ev, zv);
            let ll = g.gaussian_log_lik(mu, ls, xv);
            g.backward(ll).accumulate(&g, &mut grads, 1.0);
            g.scalar(ll)
        };
        self.opt.ascend(&mut self.store, &grads);
        value
    }
}

fn estimator_on_tape(g: &mut Graph<'_>, ev: &EstimatorVars, z: Var) -> (Var, Var) {
    let [w1, b1, w2, b2, u1, c1, u2, c2] = ev.0;
    let mut mlp = |a: Var, ab: Var, b: Var, bb: Var| {
        let h = g.matmul(z, a);
        let h = g.add_row(h, ab);
        let h = g.tanh(h);
        let o = g.matmul(h, b);
        g.add_row(o, bb)
    };
    let mu = mlp(w1, b1, w2, b2);
    let raw = mlp(u1, c1, u2, c2);
    // log-variance squashed into (-1, 1)
    let ls = g.tanh(raw);
    let ls = g.scale(ls, 0.5);
    (mu, ls)
}

/// `1/B sum_k log q(x_k|z_k) - 1/B^2 sum_k sum_l log q(x_l|z_k)`.
pub fn vclub_estimate(z_sh: &Matrix, z_sp: &Matrix, est: &VariationalEstimator) -> f64 {
    let mut g = Graph::new();
    let ev = est.const_vars(&mut g);
    let zv = g.constant(z_sh.clone());
    let xv = g.constant(z_sp.clone());
    let (mu, ls) = estimator_on_tape(&mut g, &ev, zv);
    let c = g.club_estimate(mu, ls, xv);
    g.scalar(c)
}

pub fn fit_estimator_step(est: &mut VariationalEstimator, z_sh: &Matrix, z_sp: &Matrix) -> f64 {
    est.fit_step(z_sh, z_sp)
}

/// How stop-gradients are treated when building the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Straight-through quantization with detached codebook/commitment
    /// targets, as used for training.
    Training,
    /// Same value with every stop-gradient removed and quantized vectors
    /// used directly; differentiable almost everywhere, for gradient checks.
    Exact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub reconstruction: f64,
    pub vq_shared: f64,
    pub vq_specific: f64,
    pub mi: f64,
    pub total: f64,
}

struct TapeLoss {
    total: Var,
    reconstruction: Var,
    vq_shared: Var,
    vq_specific: Var,
    mi: Option<Var>,
    shared_codes: Vec<Vec<usize>>,
    specific_codes: Vec<Vec<usize>>,
    /// Inputs each codebook quantized, for dead-code reseeding.
    book_inputs: Vec<Matrix>,
    z_hat_sh: Var,
    /// Continuous PSGR outputs, one per modality.
    z_sp: Vec<Var>,
}

fn nearest_rows(entries: &Matrix, x: &Matrix) -> Vec<usize> {
    x.iter_rows().map(|r| nearest_entry(entries, r).0).collect()
}

fn dmrq_on_tape(
    g: &mut Graph<'_>,
    sv: &StackVars,
    est: Option<&[EstimatorVars]>,
    z: &[Matrix],
    w: LossWeights,
    mode: LossMode,
) -> TapeLoss {
    let training = mode == LossMode::Training;
    let b = z[0].rows() as f64;
    let n_m = z.len();
    let zv: Vec<Var> = z.iter().map(|m| g.constant(m.clone())).collect();

    let f = match &sv.fuse {
        None => {
            let mut acc = zv[0];
            for &x in &zv[1..] {
                acc = g.add(acc, x);
            }
            g.scale(acc, 1.0 / n_m as f64)
        }
        Some(a) => {
            let mut acc = g.matmul(zv[0], a[0]);
            for j in 1..n_m {
                let t = g.matmul(zv[j], a[j]);
                acc = g.add(acc, t);
            }
            acc
        }
    };

    let mut book_inputs = Vec::new();
    let mut shared_codes = Vec::new();
    let mut r = f;
    let mut z_hat: Option<Var> = None;
    let mut vq_sh: Option<Var> = None;
    let add_opt = |g: &mut Graph<'_>, acc: Option<Var>, x: Var| Some(acc.map_or(x, |a| g.add(a, x)));
    for &book in &sv.shared {
        let codes = nearest_rows(g.value(book), g.value(r));
        book_inputs.push(g.value(r).clone());
        let e = g.gather(book, &codes);
        let term = vq_terms(g, r, e, w.gamma, training);
        vq_sh = add_opt(g, vq_sh, term);
        z_hat = add_opt(g, z_hat, e);
        r = if training {
            let ed = g.detach(e);
            g.sub(r, ed)
        } else {
            g.sub(r, e)
        };
        shared_codes.push(codes);
    }
    let z_hat_sh = z_hat.expect("at least one shared layer");
    let vq_sh = vq_sh.expect("at least one shared layer");
    let z_sh_out = if training {
        let diff = g.sub(z_hat_sh, f);
        let diff = g.detach(diff);
        g.add(f, diff)
    } else {
        z_hat_sh
    };
    let mi_input = if training { g.detach(z_hat_sh) } else { z_hat_sh };

    let mut specific_codes = Vec::new();
    let mut z_sp = Vec::new();
    let mut vq_sp: Option<Var> = None;
    let mut recon: Option<Var> = None;
    let mut mi: Option<Var> = None;
    for j in 0..n_m {
        let zsp = psgr_on_tape(g, &sv.psgr, sv.heads, r, zv[j]);
        let codes = nearest_rows(g.value(sv.specific[j]), g.value(zsp));
        book_inputs.push(g.value(zsp).clone());
        let e = g.gather(sv.specific[j], &codes);
        let term = vq_terms(g, zsp, e, w.gamma, training);
        vq_sp = add_opt(g, vq_sp, term);
        let zsp_out = if training {
            let diff = g.sub(e, zsp);
            let diff = g.detach(diff);
            g.add(zsp, diff)
        } else {
            e
        };
        let rec = g.add(z_sh_out, zsp_out);
        let err = g.sub(zv[j], rec);
        let sq = g.sum_sq(err);
        recon = add_opt(g, recon, sq);
        if let Some(est) = est {
            let (mu, ls) = estimator_on_tape(g, &est[j], mi_input);
            let c = g.club_estimate(mu, ls, zsp);
            mi = add_opt(g, mi, c);
        }
        specific_codes.push(codes);
        z_sp.push(zsp);
    }
    let recon = g.scale(recon.expect("modalities"), 1.0 / b);
    let vq_sh = g.scale(vq_sh, 1.0 / b);
    let vq_sp = g.scale(vq_sp.expect("modalities"), 1.0 / b);
    let vq = g.add(vq_sh, vq_sp);
    let vq_weighted = g.scale(vq, w.beta);
    let mut total = g.add(recon, vq_weighted);
    if let Some(m) = mi {
        let mw = g.scale(m, w.lambda);
        total = g.add(total, mw);
    }
    TapeLoss {
        total,
        reconstruction: recon,
        vq_shared: vq_sh,
        vq_specific: vq_sp,
        mi,
        shared_codes,
        specific_codes,
        book_inputs,
        z_hat_sh,
        z_sp,
    }
}

/// Codebook term plus `gamma` times the commitment term, summed over rows.
fn vq_terms(g: &mut Graph<'_>, x: Var, e: Var, gamma: f64, training: bool) -> Var {
    if training {
        let xd = g.detach(x);
        let ed = g.detach(e);
        let book = g.sub(xd, e);
        let book = g.sum_sq(book);
        let commit = g.sub(x, ed);
        let commit = g.sum_sq(commit);
        let commit = g.scale(commit, gamma);
        g.add(book, commit)
    } else {
        let diff = g.sub(x, e);
        let s = g.sum_sq(diff);
        g.scale(s, 1.0 + gamma)
    }
}

fn batch_matrices(batch: &[ModalEmbeddingSet]) -> Result<Vec<Matrix>> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let n_m = first.z.len();
    (0..n_m)
        .map(|j| {
            let rows: Vec<Vec<f64>> = batch
                .iter()
                .map(|s| {
                    s.z.get(j)
                        .cloned()
                        .ok_or_else(|| Error::invalid(format!("item {} lacks modality {j}", s.item_id)))
                })
                .collect::<Result<_>>()?;
            Ok(Matrix::from_rows(&rows))
        })
        .collect()
}

fn check_batch(z: &[Matrix], stack: &CodebookStack, estimators: &[VariationalEstimator]) -> Result<()> {
    if z.len() != stack.n_modalities() || z.iter().any(|m| m.cols() != stack.d) {
        return Err(Error::invalid(format!(
            "batch shape does not match stack ({} modalities of dim {})",
            stack.n_modalities(),
            stack.d
        )));
    }
    if !estimators.is_empty() && estimators.len() != stack.n_modalities() {
        return Err(Error::invalid("need one estimator per modality"));
    }
    Ok(())
}

fn components(g: &Graph<'_>, t: &TapeLoss) -> LossComponents {
    LossComponents {
        reconstruction: g.scalar(t.reconstruction),
        vq_shared: g.scalar(t.vq_shared),
        vq_specific: g.scalar(t.vq_specific),
        mi: t.mi.map_or(0.0, |m| g.scalar(m)),
        total: g.scalar(t.total),
    }
}

/// `sum_j |z_j - (z_sh + z_sp_j)|^2 + beta L_vq + lambda L_MI`, each term a
/// batch mean. The MI term is skipped when `estimators` is empty.
pub fn dmrq_loss(
    batch: &[ModalEmbeddingSet],
    stack: &CodebookStack,
    estimators: &[VariationalEstimator],
    weights: LossWeights,
    mode: LossMode,
) -> Result<LossComponents> {
    Ok(dmrq_loss_with_grads(batch, stack, estimators, weights, mode)?.0)
}

/// [`dmrq_loss`] plus the gradient of the total w.r.t. every stack parameter.
pub fn dmrq_loss_with_grads(
    batch: &[ModalEmbeddingSet],
    stack: &CodebookStack,
    estimators: &[VariationalEstimator],
    weights: LossWeights,
    mode: LossMode,
) -> Result<(LossComponents, ParamGrads)> {
    weights.check()?;
    let z = batch_matrices(batch)?;
    check_batch(&z, stack, estimators)?;
    let mut g = Graph::with_params(&stack.store);
    let sv = stack.vars(&mut g);
    let ev: Vec<EstimatorVars> = estimators.iter().map(|e| e.const_vars(&mut g)).collect();
    let t = dmrq_on_tape(&mut g, &sv, (!ev.is_empty()).then_some(ev.as_slice()), &z, weights, mode);
    let mut grads = ParamGrads::zeros_like(&stack.store);
    g.backward(t.total).accumulate(&g, &mut grads, 1.0);
    Ok((components(&g, &t), grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemCodes {
    pub item_id: String,
    pub c_sh: Vec<usize>,
    pub c_sp: Vec<usize>,
    pub z_hat_sh: Vec<f64>,
    pub z_hat_sp: Vec<Vec<f64>>,
}

impl ItemCodes {
    /// Shared layers ascending, then modalities ascending.
    pub fn codes(&self) -> Vec<usize> {
        self.c_sh.iter().chain(&self.c_sp).copied().collect()
    }
}

pub fn tokenize_one(set: &ModalEmbeddingSet, stack: &CodebookStack) -> ItemCodes {
    let f = fuse(&set.z, stack);
    let books: Vec<&Matrix> = (0..stack.n_shared()).map(|k| stack.shared_book(k).entries).collect();
    let sq = residual_quantize_shared(&f, &books);
    let mut c_sp = Vec::new();
    let mut z_hat_sp = Vec::new();
    for (j, zj) in set.z.iter().enumerate() {
        let zsp = psgr_recover(sq.residual(), zj, stack);
        let (c, e) = quantize_specific(&zsp, stack.specific_book(j).entries);
        c_sp.push(c);
        z_hat_sp.push(e);
    }
    ItemCodes {
        item_id: set.item_id.clone(),
        c_sh: sq.codes,
        c_sp,
        z_hat_sh: sq.z_hat,
        z_hat_sp,
    }
}

pub fn tokenize(sets: &[ModalEmbeddingSet], stack: &CodebookStack) -> Result<Vec<ItemCodes>> {
    for s in sets {
        if s.z.len() != stack.n_modalities() || s.z.iter().any(|z| z.len() != stack.d) {
            return Err(Error::invalid(format!("item {} does not match the codebook stack", s.item_id)));
        }
    }
    Ok(sets.iter().map(|s| tokenize_one(s, stack)).collect())
}

/// Recomputes `(z_hat_sh, z_hat_sp)` from codes alone.
pub fn reconstruct(codes: &ItemCodes, stack: &CodebookStack) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut z = vec![0.0; stack.d];
    for (k, &c) in codes.c_sh.iter().enumerate() {
        for (a, b) in z.iter_mut().zip(stack.shared_book(k).entries.row(c)) {
            *a += b;
        }
    }
    let sp = codes
        .c_sp
        .iter()
        .enumerate()
        .map(|(j, &c)| stack.specific_book(j).entries.row(c).to_vec())
        .collect();
    (z, sp)
}

/// Rows are codebook layers in token order, columns are modalities; entry
/// `(l, j)` is the mean cosine between an item's layer-`l` code vector and
/// its aligned modality-`j` input.
pub fn layer_modality_similarity(sets: &[ModalEmbeddingSet], codes: &[ItemCodes], stack: &CodebookStack) -> Matrix {
    let layers = stack.n_shared() + stack.n_modalities();
    let mut sim = Matrix::zeros(layers, stack.n_modalities());
    for (s, c) in sets.iter().zip(codes) {
        for (l, &code) in c.codes().iter().enumerate() {
            let e = stack.books()[l].entries.row(code);
            for (j, zj) in s.z.iter().enumerate() {
                sim[(l, j)] += cosine(e, zj);
            }
        }
    }
    sim.scale_in_place(1.0 / sets.len().max(1) as f64);
    sim
}

/// Linear CKA between two row-aligned representation matrices.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> f64 {
    let center = |m: &Matrix| {
        let mut c = m.clone();
        let n = m.rows() as f64;
        for col in 0..m.cols() {
            let mean = (0..m.rows()).map(|r| m[(r, col)]).sum::<f64>() / n;
            for r in 0..m.rows() {
                c[(r, col)] -= mean;
            }
        }
        c
    };
    let (x, y) = (center(x), center(y));
    let cross = x.transpose().matmul(&y).frobenius_sq();
    let xx = x.transpose().matmul(&x).frobenius_sq().sqrt();
    let yy = y.transpose().matmul(&y).frobenius_sq().sqrt();
    if xx == 0.0 || yy == 0.0 {
        0.0
    } else {
        cross / (xx * yy)
    }
}

/// k-means++ seeding followed by `iters` Lloyd refinements.
pub fn kmeans(points: &Matrix, k: usize, iters: usize, rng: &mut impl Rng) -> Matrix {
    let n = points.rows();
    let d = points.cols();
    let mut centers = Matrix::zeros(k, d);
    if n == 0 {
        return centers;
    }
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = points.iter_rows().map(|p| squared_distance(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            dist[i] = dist[i].min(squared_distance(p, centers.row(c)));
        }
    }
    for _ in 0..iters {
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for p in points.iter_rows() {
            let (c, _) = nearest_entry(&centers, p);
            counts[c] += 1;
            for (a, b) in sums.row_mut(c).iter_mut().zip(p) {
                *a += b;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (a, b) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *a = b / counts[c] as f64;
                }
            }
        }
    }
    centers
}

pub fn new_estimators(d: usize, n_m: usize, cfg: &DmrqConfig, seed: u64) -> Vec<VariationalEstimator> {
    let mut rng = stage_rng(seed, "dmrq.estimators");
    let hidden = if cfg.estimator_hidden == 0 { d } else { cfg.estimator_hidden };
    (0..n_m)
        .map(|_| VariationalEstimator::new(d, hidden, cfg.estimator_lr, &mut rng))
        .collect()
}

/// Builds a stack and seeds every codebook with k-means on the inputs it
/// sees for the first training batch.
pub fn init_stack(sets: &[ModalEmbeddingSet], cfg: &DmrqConfig, seed: u64) -> Result<CodebookStack> {
    let first = sets.first().ok_or_else(|| Error::invalid("cannot train on an empty corpus"))?;
    let d = first.z.first().map_or(0, Vec::len);
    let problems = cfg.violations(d);
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    let n_m = first.z.len();
    let mut stack = CodebookStack::new(d, n_m, cfg.n_shared, cfg.codebook_size, cfg.heads, cfg.fuse, seed);
    let mut rng = stage_rng(seed, "dmrq.kmeans");
    let order = epoch_order(sets.len(), seed, 0);
    let batch: Vec<ModalEmbeddingSet> = order.iter().take(cfg.batch_size).map(|&i| sets[i].clone()).collect();
    let z = batch_matrices(&batch)?;
    check_batch(&z, &stack, &[])?;
    for layer in 0..cfg.n_shared + n_m {
        let inputs = {
            let mut g = Graph::with_params(&stack.store);
            let sv = stack.vars(&mut g);
            let t = dmrq_on_tape(&mut g, &sv, None, &z, cfg.weights(), LossMode::Exact);
            t.book_inputs[layer].clone()
        };
        let centers = kmeans(&inputs, cfg.codebook_size, cfg.kmeans_iters, &mut rng);
        *stack.store.get_mut(stack.book_id(layer)) = centers;
    }
    Ok(stack)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stage_rng(seed, &format!("dmrq.epoch.{epoch}")));
    order
}

#[derive(Clone, Debug)]
pub struct DmrqOutcome {
    pub stack: CodebookStack,
    pub estimators: Vec<VariationalEstimator>,
    /// Training-mode loss components per main step.
    pub steps: Vec<LossComponents>,
    /// Mean reconstruction error over the whole corpus before training and
    /// after each epoch.
    pub epoch_reconstruction: Vec<f64>,
    /// `usage[epoch][book][entry]` selection counts.
    pub usage: Vec<Vec<Vec<usize>>>,
    pub warnings: Vec<String>,
}

/// Mean over items of `sum_j |z_j - (z_hat_sh + z_hat_sp_j)|^2` with hard
/// codes.
pub fn corpus_reconstruction(sets: &[ModalEmbeddingSet], stack: &CodebookStack) -> f64 {
    let mut total = 0.0;
    for s in sets {
        let c = tokenize_one(s, stack);
        for (zj, sp) in s.z.iter().zip(&c.z_hat_sp) {
            total += zj
                .iter()
                .zip(&c.z_hat_sh)
                .zip(sp)
                .map(|((a, b), c)| (a - b - c) * (a - b - c))
                .sum::<f64>();
        }
    }
    total / sets.len().max(1) as f64
}

/// Alternates one estimator ascent step with one descent step on the
/// quantizer loss per batch.
pub fn train_dmrq(sets: &[ModalEmbeddingSet], cfg: &DmrqConfig, seed: u64) -> Result<DmrqOutcome> {
    let mut stack = init_stack(sets, cfg, seed)?;
    let n_m = stack.n_modalities();
    let mut estimators = new_estimators(stack.d, n_m, cfg, seed);
    let mut opt = Adam::new(&stack.store, cfg.lr);
    for &id in stack.fuse.iter().flatten() {
        opt.set_lr_scale(id, cfg.fuse_lr_scale);
    }
    let weights = cfg.weights();
    let use_mi = cfg.lambda > 0.0;
    let mut rng = stage_rng(seed, "dmrq.reseed");
    let n_books = cfg.n_shared + n_m;
    let mut out = DmrqOutcome {
        stack: stack.clone(),
        estimators: Vec::new(),
        steps: Vec::new(),
        epoch_reconstruction: vec![corpus_reconstruction(sets, &stack)],
        usage: Vec::new(),
        warnings: Vec::new(),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(sets.len(), seed, epoch);
        let mut usage = vec![vec![0usize; cfg.codebook_size]; n_books];
        let mut last_inputs: Vec<Matrix> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ModalEmbeddingSet> = chunk.iter().map(|&i| sets[i].clone()).collect();
            let z = batch_matrices(&batch)?;
            let mut grads = ParamGrads::zeros_like(&stack.store);
            let (comps, inputs, mi_pairs) = {
                let mut g = Graph::with_params(&stack.store);
                let sv = stack.vars(&mut g);
                let ev: Vec<EstimatorVars> = if use_mi {
                    estimators.iter().map(|e| e.const_vars(&mut g)).collect()
                } else {
                    Vec::new()
                };
                let t = dmrq_on_tape(&mut g, &sv, use_mi.then_some(ev.as_slice()), &z, weights, LossMode::Training);
                let comps = components(&g, &t);
                if !comps.total.is_finite() {
                    return Err(Error::NonFinite { stage: "dmrq", step });
                }
                g.backward(t.total).accumulate(&g, &mut grads, 1.0);
                for (b, codes) in t.shared_codes.iter().chain(&t.specific_codes).enumerate() {
                    for &c in codes {
                        usage[b][c] += 1;
                    }
                }
                let pairs: Vec<(Matrix, Matrix)> = t
                    .z_sp
                    .iter()
                    .map(|&e| (g.value(t.z_hat_sh).clone(), g.value(e).clone()))
                    .collect();
                (comps, t.book_inputs, pairs)
            };
            if use_mi {
                // estimator ascent on this batch's (shared, specific) pairs
                for (est, (zsh, zsp)) in estimators.iter_mut().zip(&mi_pairs) {
                    est.fit_step(zsh, zsp);
                }
            }
            opt.step(&mut stack.store, &grads);
            if !stack.store.all_finite() {
                return Err(Error::NonFinite { stage: "dmrq", step });
            }
            out.steps.push(comps);
            last_inputs = inputs;
            step += 1;
        }
        for (b, counts) in usage.iter().enumerate() {
            let dead: Vec<usize> = (0..counts.len()).filter(|&v| counts[v] == 0).collect();
            if dead.is_empty() {
                continue;
            }
            out.warnings.push(format!(
                "epoch {epoch}: codebook {b} has {} unused entries{}",
                dead.len(),
                if cfg.reseed_dead { ", reseeded" } else { "" }
            ));
            if cfg.reseed_dead && !last_inputs.is_empty() {
                let src = &last_inputs[b];
                let book = stack.store.get_mut(stack.book_id(b));
                for v in dead {
                    let r = rng.random_range(0..src.rows());
                    book.row_mut(v).copy_from_slice(src.row(r));
                }
            }
        }
        out.usage.push(usage);
        out.epoch_reconstruction.push(corpus_reconstruction(sets, &stack));
    }
    out.stack = stack;
    out.estimators = estimators;
    Ok(out)
}

pub fn write_item_tokens(path: &Path, codes: &[ItemCodes]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for c in codes {
        let list: Vec<String> = c.codes().iter().map(usize::to_string).collect();
        writeln!(f, "{}\t{}", c.item_id, list.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads `id<TAB>c1,c2,...` lines into `(id, codes)` pairs.
pub fn read_item_tokens(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, list) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `id<TAB>codes`"))?;
        let codes = list
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(path, i + 1, "bad code list"))?;
        out.push((id.to_string(), codes));
    }
    Ok(out)
}
