//! Cross-modal geometric alignment: per-modality linear heads onto a shared
//! unit hypersphere, trained so that an item's modality vectors span a small
//! Gram volume while mismatched combinations span a large one.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::ingest::Corpus;
use crate::optim::Adam;
use crate::rng::stage_rng;
use crate::tensor::{determinant, dot, norm, Matrix};

const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub d: usize,
    pub tau: f64,
    pub anchor_modality: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub bias: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            d: 256,
            tau: 0.07,
            anchor_modality: 0,
            batch_size: 64,
            lr: 5e-3,
            steps: 300,
            bias: false,
        }
    }
}

impl AlignConfig {
    pub fn violations(&self, n_modalities: Option<usize>) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.tau > 0.0) {
            v.push(format!("align.tau must be > 0 (got {})", self.tau));
        }
        if self.d < 2 {
            v.push("align.d must be at least 2".into());
        }
        if self.batch_size == 0 {
            v.push("align.batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) {
            v.push("align.lr must be >= 0".into());
        }
        if let Some(n) = n_modalities {
            if self.anchor_modality >= n {
                v.push(format!(
                    "align.anchor_modality {} out of range for {n} modalities",
                    self.anchor_modality
                ));
            }
        }
        v
    }
}

/// An item's projected vectors, one unit vector in `R^d` per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalEmbeddingSet {
    pub item_id: String,
    pub z: Vec<Vec<f64>>,
}

/// Linear maps `W_j: R^{d_j} -> R^d` (row-vector convention, `y = x W + b`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    store: ParamStore,
    weights: Vec<ParamId>,
    biases: Vec<Option<ParamId>>,
    d: usize,
}

impl ProjectionHeads {
    pub fn init(in_dims: &[usize], d: usize, bias: bool, seed: u64) -> Self {
        let mut rng = stage_rng(seed, "align.init");
        let mut store = ParamStore::new();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (j, &dj) in in_dims.iter().enumerate() {
            let s = 1.0 / (dj as f64).sqrt();
            weights.push(store.add(format!("align.w.{j}"), Matrix::random_uniform(dj, d, s, &mut rng)));
            biases.push(bias.then(|| store.add(format!("align.b.{j}"), Matrix::zeros(1, d))));
        }
        ProjectionHeads {
            store,
            weights,
            biases,
            d,
        }
    }

    /// Rebuilds heads from a parameter store laid out by [`ProjectionHeads::init`].
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        while let Some(w) = store.find(&format!("align.w.{}", weights.len())) {
            biases.push(store.find(&format!("align.b.{}", weights.len())));
            weights.push(w);
        }
        if weights.len() < 2 {
            return Err(Error::invalid("checkpoint holds fewer than two projection heads"));
        }
        let d = store.get(weights[0]).cols();
        for (w, b) in weights.iter().zip(&biases) {
            if store.get(*w).cols() != d || b.is_some_and(|b| store.get(b).shape() != (1, d)) {
                return Err(Error::invalid("projection heads disagree on the output dimension"));
            }
        }
        Ok(ProjectionHeads {
            store,
            weights,
            biases,
            d,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_modalities(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self, j: usize) -> usize {
        self.store.get(self.weights[j]).rows()
    }

    pub fn weight(&self, j: usize) -> &Matrix {
        self.store.get(self.weights[j])
    }

    /// `W_j x / ||W_j x||`.
    pub fn project(&self, j: usize, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.in_dim(j) {
            return Err(Error::invalid(format!(
                "modality {j} expects {} values, got {}",
                self.in_dim(j),
                raw.len()
            )));
        }
        let mut y = Matrix::row_vector(raw.to_vec()).matmul(self.weight(j)).into_vec();
        if let Some(b) = self.biases[j] {
            for (a, c) in y.iter_mut().zip(self.store.get(b).data()) {
                *a += c;
            }
        }
        let n = norm(&y);
        if !(n >= DEGENERATE_NORM) {
            return Err(Error::DegenerateProjection { norm: n });
        }
        Ok(y.into_iter().map(|x| x / n).collect())
    }

    pub fn project_corpus(&self, corpus: &Corpus) -> Result<Vec<ModalEmbeddingSet>> {
        self.check_corpus(corpus)?;
        corpus
            .records()
            .iter()
            .map(|r| {
                let z = r
                    .vectors
                    .iter()
                    .enumerate()
                    .map(|(j, v)| self.project(j, v))
                    .collect::<Result<_>>()
                    .map_err(|e| Error::invalid(format!("item {}: {e}", r.item_id)))?;
                Ok(ModalEmbeddingSet {
                    item_id: r.item_id.clone(),
                    z,
                })
            })
            .collect()
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let dims: Vec<usize> = (0..self.n_modalities()).map(|j| self.in_dim(j)).collect();
        if corpus.dims() != dims.as_slice() {
            return Err(Error::invalid(format!(
                "corpus dims {:?} do not match projection heads {:?}",
                corpus.dims(),
                dims
            )));
        }
        Ok(())
    }

    /// Projects a batch of raw rows for every modality on the tape; returns
    /// one `B x d` unit-row variable per modality.
    fn project_on_tape(&self, g: &mut Graph<'_>, raw: &[Matrix], step: usize) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(raw.len());
        for (j, x) in raw.iter().enumerate() {
            let xv = g.constant(x.clone());
            let w = g.param(self.weights[j]);
            let mut y = g.matmul(xv, w);
            if let Some(b) = self.biases[j] {
                let bv = g.param(b);
                y = g.add_row(y, bv);
            }
            if let Some(n) = g.value(y).iter_rows().map(norm).find(|n| !(*n >= DEGENERATE_NORM)) {
                if n.is_finite() {
                    return Err(Error::DegenerateProjection { norm: n });
                }
                return Err(Error::NonFinite { stage: "align", step });
            }
            out.push(g.l2_normalize_rows(y));
        }
        Ok(out)
    }
}

/// `sqrt(max(det G, 0))` with `G_jk = <z_j, z_k>`.
pub fn gram_volume(vectors: &[&[f64]]) -> f64 {
    let k = vectors.len();
    let mut g = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            g[(i, j)] = dot(vectors[i], vectors[j]);
        }
    }
    determinant(&g).max(0.0).sqrt()
}

/// Symmetric in-batch contrastive loss over anchor-vs-rest volumes. The
/// anchor of item `k` is combined with the remaining modalities of item `i`
/// for every pair, so each batch costs `B^2` determinants.
pub fn alignment_loss(batch: &[ModalEmbeddingSet], tau: f64, anchor: usize) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be > 0, got {tau}")));
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty alignment batch"));
    }
    let n_mod = batch[0].z.len();
    if anchor >= n_mod || batch.iter().any(|s| s.z.len() != n_mod) {
        return Err(Error::invalid("inconsistent modality count or anchor out of range"));
    }
    let mut g = Graph::new();
    let zs: Vec<Var> = (0..n_mod)
        .map(|j| g.constant(Matrix::from_rows(&batch.iter().map(|s| s.z[j].clone()).collect::<Vec<_>>())))
        .collect();
    let loss = alignment_loss_on_tape(&mut g, &zs, tau, anchor);
    Ok(g.scalar(loss))
}

/// Tape version of [`alignment_loss`]; `zs[j]` is the `B x d` batch of
/// modality `j`.
pub fn alignment_loss_on_tape(g: &mut Graph<'_>, zs: &[Var], tau: f64, anchor: usize) -> Var {
    let others: Vec<Var> = zs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != anchor)
        .map(|(_, &v)| v)
        .collect();
    let vols = g.pair_volumes(zs[anchor], &others);
    let b = g.value(vols).rows();
    let logits = g.scale(vols, -1.0 / tau);
    let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
    let a2d = g.cross_entropy(logits, &diag);
    let by_data = g.transpose(logits);
    let d2a = g.cross_entropy(by_data, &diag);
    let sum = g.add(a2d, d2a);
    g.scale(sum, 0.5)
}

#[derive(Clone, Debug)]
pub struct AlignOutcome {
    pub heads: ProjectionHeads,
    pub aligned: Vec<ModalEmbeddingSet>,
    /// Training loss after each step.
    pub curve: Vec<f64>,
}

pub fn train_alignment(corpus: &Corpus, cfg: &AlignConfig, seed: u64) -> Result<AlignOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot align an empty corpus"));
    }
    let problems = cfg.violations(Some(corpus.n_modalities()));
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    let mut heads = ProjectionHeads::init(corpus.dims(), cfg.d, cfg.bias, seed);
    let mut opt = Adam::new(heads.store(), cfg.lr);
    let mut rng = stage_rng(seed, "align.batches");
    let n = corpus.len();
    let bsz = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + bsz > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bsz];
        cursor += bsz;
        let raw: Vec<Matrix> = (0..corpus.n_modalities())
            .map(|j| {
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| corpus.records()[i].vectors[j].clone()).collect();
                Matrix::from_rows(&rows)
            })
            .collect();
        let (value, grads) = alignment_loss_with_grads(&heads, &raw, cfg.tau, cfg.anchor_modality, step)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { stage: "align", step });
        }
        curve.push(value);
        opt.step(heads.store_mut(), &grads);
        if !heads.store().all_finite() {
            return Err(Error::NonFinite { stage: "align", step });
        }
    }
    let aligned = heads.project_corpus(corpus)?;
    Ok(AlignOutcome {
        heads,
        aligned,
        curve,
    })
}

/// Loss of one raw batch (`raw[j]` holds modality `j`, one row per item)
/// and its gradient with respect to the head parameters.
pub fn alignment_loss_with_grads(
    heads: &ProjectionHeads,
    raw: &[Matrix],
    tau: f64,
    anchor: usize,
    step: usize,
) -> Result<(f64, ParamGrads)> {
    if raw.len() != heads.n_modalities() || anchor >= raw.len() {
        return Err(Error::invalid("batch modalities do not match the heads"));
    }
    let mut grads = ParamGrads::zeros_like(heads.store());
    let mut g = Graph::with_params(heads.store());
    let zs = heads.project_on_tape(&mut g, raw, step)?;
    let loss = alignment_loss_on_tape(&mut g, &zs, tau, anchor);
    let value = g.scalar(loss);
    if value.is_finite() {
        g.backward(loss).accumulate(&g, &mut grads, 1.0);
    }
    Ok((value, grads))
}

/// Mean volume over matched items and over mismatched (anchor of one item,
/// rest of the next) combinations.
pub fn volume_gap(sets: &[ModalEmbeddingSet], anchor: usize) -> (f64, f64) {
    let n = sets.len();
    let vol = |a: &ModalEmbeddingSet, r: &ModalEmbeddingSet| {
        let mut v: Vec<&[f64]> = vec![&a.z[anchor]];
        v.extend(r.z.iter().enumerate().filter(|&(j, _)| j != anchor).map(|(_, z)| z.as_slice()));
        gram_volume(&v)
    };
    let matched = sets.iter().map(|s| vol(s, s)).sum::<f64>() / n as f64;
    let mismatched = (0..n).map(|i| vol(&sets[i], &sets[(i + 1) % n])).sum::<f64>() / n as f64;
    (matched, mismatched)
}
