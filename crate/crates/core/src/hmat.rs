//! Decoder over semantic token streams: two-level rotary encoding of the
//! (m, n) coordinates, memory-anchor attention masking, and pre-norm
//! blocks with grouped-query attention and a gated FFN.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnShape, Graph, KeySets, ParamId, ParamStore, RopeAngles, Var};
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::seqstream::{Coord, SemanticToken, TokenKind, TokenStream, Vocab};
use crate::tensor::{dot, Matrix};

pub const RMS_EPS: f64 = 1e-6;

/// Rotation frequencies. The first half of a head rotates with the item
/// order `m`, the second half with the in-segment position `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct HRopeTables {
    pub head_dim: usize,
    pub theta_inter: Vec<f64>,
    pub theta_intra: Vec<f64>,
}

impl HRopeTables {
    pub fn new(head_dim: usize, base_inter: f64, base_intra: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::config(format!("head dim must be divisible by 4, got {head_dim}")));
        }
        if !(base_inter > 1.0 && base_intra > 1.0) {
            return Err(Error::config("rotary bases must exceed 1"));
        }
        let half = (head_dim / 2) as f64;
        let thetas = |base: f64| (0..head_dim / 4).map(|j| base.powf(-2.0 * j as f64 / half)).collect();
        Ok(HRopeTables {
            head_dim,
            theta_inter: thetas(base_inter),
            theta_intra: thetas(base_intra),
        })
    }

    /// Angle of every rotation pair for a token at `c`.
    pub fn angles(&self, c: Coord) -> Vec<f64> {
        let m = c.m as f64;
        let n = c.n as f64;
        self.theta_inter.iter().map(|t| m * t).chain(self.theta_intra.iter().map(|t| n * t)).collect()
    }

    pub fn rope_angles(&self, coords: &[Coord]) -> RopeAngles {
        let p = self.head_dim / 2;
        let mut cos = Matrix::zeros(coords.len(), p);
        let mut sin = Matrix::zeros(coords.len(), p);
        for (t, &c) in coords.iter().enumerate() {
            for (j, a) in self.angles(c).into_iter().enumerate() {
                cos[(t, j)] = a.cos();
                sin[(t, j)] = a.sin();
            }
        }
        RopeAngles { cos, sin }
    }
}

pub fn hrope_apply(x: &[f64], c: Coord, tables: &HRopeTables) -> Result<Vec<f64>> {
    if x.len() != tables.head_dim {
        return Err(Error::invalid(format!("vector of {} for head dim {}", x.len(), tables.head_dim)));
    }
    let mut out = x.to_vec();
    for (pair, a) in out.chunks_exact_mut(2).zip(tables.angles(c)) {
        let (s, co) = a.sin_cos();
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = x0 * co - x1 * s;
        pair[1] = x0 * s + x1 * co;
    }
    Ok(out)
}

pub fn hrope_score(q: &[f64], k: &[f64], cq: Coord, ck: Coord, tables: &HRopeTables) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::invalid("query and key lengths differ"));
    }
    Ok(dot(&hrope_apply(q, cq, tables)?, &hrope_apply(k, ck, tables)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Profile, own segment, and anchors of earlier items.
    MemoryAnchor,
    /// Plain causal attention.
    Causal,
}

/// Whether key `k` is visible to query `q` (causality checked by the caller).
pub fn anchor_rule(q: &SemanticToken, k: &SemanticToken) -> bool {
    k.coord.m == 0 || k.coord.m == q.coord.m || (k.coord.m < q.coord.m && k.kind == TokenKind::Anchor)
}

/// Sparse attention mask: for every query, the sorted list of visible keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    keys: KeySets,
}

impl AttnMask {
    pub fn build(tokens: &[SemanticToken], kind: MaskKind) -> Self {
        let keys = (0..tokens.len())
            .map(|q| {
                (0..=q)
                    .filter(|&k| kind == MaskKind::Causal || anchor_rule(&tokens[q], &tokens[k]))
                    .map(|k| k as u32)
                    .collect()
            })
            .collect();
        AttnMask { keys: Arc::new(keys) }
    }

    pub fn from_key_sets(keys: Vec<Vec<u32>>) -> Self {
        AttnMask { keys: Arc::new(keys) }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn visible(&self, q: usize) -> &[u32] {
        &self.keys[q]
    }

    pub fn is_visible(&self, q: usize, k: usize) -> bool {
        self.keys[q].binary_search(&(k as u32)).is_ok()
    }

    pub fn key_sets(&self) -> KeySets {
        Arc::clone(&self.keys)
    }

    /// Total number of (query, key) pairs scored.
    pub fn pair_count(&self) -> usize {
        self.keys.iter().map(Vec::len).sum()
    }

    /// Additive form: 0 where visible, negative infinity elsewhere.
    pub fn to_dense(&self) -> Matrix {
        let t = self.keys.len();
        let mut m = Matrix::filled(t, t, f64::NEG_INFINITY);
        for (q, ks) in self.keys.iter().enumerate() {
            for &k in ks {
                m[(q, k as usize)] = 0.0;
            }
        }
        m
    }
}

pub fn build_mask(stream: &TokenStream) -> AttnMask {
    AttnMask::build(stream.tokens(), MaskKind::MemoryAnchor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub n_q: usize,
    pub n_kv: usize,
    /// FFN inner width as a multiple of `width`.
    pub ffn_mult: usize,
    pub base_inter: f64,
    pub base_intra: f64,
    /// Longest token sequence a forward pass accepts.
    pub max_len: usize,
    pub init_std: f64,
    /// History items kept per user stream, most recent first.
    pub max_items: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 512,
            layers: 4,
            n_q: 8,
            n_kv: 2,
            ffn_mult: 5,
            base_inter: 1e4,
            base_intra: 100.0,
            max_len: 1024,
            init_std: 0.02,
            max_items: 100,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.n_q.max(1)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.layers == 0 {
            v.push("model needs at least one layer".to_string());
        }
        if self.n_q == 0 || self.n_kv == 0 {
            v.push("head counts must be positive".to_string());
        } else {
            if self.width % self.n_q != 0 {
                v.push(format!("width {} not divisible by {} query heads", self.width, self.n_q));
            } else if self.head_dim() % 4 != 0 {
                v.push(format!("head dim must be divisible by 4, got {}", self.head_dim()));
            }
            if self.n_q % self.n_kv != 0 {
                v.push(format!("query heads {} not divisible by kv heads {}", self.n_q, self.n_kv));
            }
        }
        if self.ffn_mult == 0 {
            v.push("ffn_mult must be positive".to_string());
        }
        if !(self.base_inter > 1.0 && self.base_intra > 1.0) {
            v.push("rotary bases must exceed 1".to_string());
        }
        if self.max_len == 0 {
            v.push("max_len must be positive".to_string());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            v.push("init_std must be positive".to_string());
        }
        if self.max_items == 0 {
            v.push("max_items must be positive".to_string());
        }
        v
    }

    fn attn_shape(&self) -> AttnShape {
        AttnShape {
            n_q: self.n_q,
            n_kv: self.n_kv,
            head_dim: self.head_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    vocab: Vocab,
    store: ParamStore,
    embed: ParamId,
    layers: Vec<LayerParams>,
    final_norm: ParamId,
    head: ParamId,
    tables: HRopeTables,
}

/// Layer input projections of a block of tokens, `q` and `k` rotated.
#[derive(Clone, Debug)]
pub struct Qkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl Model {
    /// Random init. The output head starts at zero so an untrained model
    /// predicts the uniform distribution.
    pub fn new(cfg: &ModelConfig, vocab: &Vocab, seed: u64) -> Result<Self> {
        let problems = cfg.violations();
        if !problems.is_empty() {
            return Err(Error::config(problems.join("; ")));
        }
        let mut rng = stage_rng(seed, "model.init");
        let w = cfg.width;
        let kv = cfg.n_kv * cfg.head_dim();
        let f = cfg.ffn_mult * w;
        let std = cfg.init_std;
        let out_std = std / (2.0 * cfg.layers as f64).sqrt();
        let mut store = ParamStore::new();
        store.add("embed", Matrix::random_normal(vocab.len(), w, std, &mut rng));
        for l in 0..cfg.layers {
            let mut add = |name: &str, m: Matrix| store.add(format!("layer.{l}.{name}"), m);
            add("attn_norm", Matrix::filled(1, w, 1.0));
            add("wq", Matrix::random_normal(w, w, std, &mut rng));
            add("wk", Matrix::random_normal(w, kv, std, &mut rng));
            add("wv", Matrix::random_normal(w, kv, std, &mut rng));
            add("wo", Matrix::random_normal(w, w, out_std, &mut rng));
            add("ffn_norm", Matrix::filled(1, w, 1.0));
            add("w_gate", Matrix::random_normal(w, f, std, &mut rng));
            add("w_up", Matrix::random_normal(w, f, std, &mut rng));
            add("w_down", Matrix::random_normal(f, w, out_std, &mut rng));
        }
        store.add("final_norm", Matrix::filled(1, w, 1.0));
        store.add("head", Matrix::zeros(w, vocab.len()));
        Self::assemble(cfg.clone(), vocab.clone(), store)
    }

    fn assemble(cfg: ModelConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        let find = |name: String, shape: (usize, usize)| -> Result<ParamId> {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::invalid(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let w = cfg.width;
        let kv = cfg.n_kv * cfg.head_dim();
        let f = cfg.ffn_mult * w;
        let embed = find("embed".into(), (vocab.len(), w))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let n = |s: &str| format!("layer.{l}.{s}");
            layers.push(LayerParams {
                attn_norm: find(n("attn_norm"), (1, w))?,
                wq: find(n("wq"), (w, w))?,
                wk: find(n("wk"), (w, kv))?,
                wv: find(n("wv"), (w, kv))?,
                wo: find(n("wo"), (w, w))?,
                ffn_norm: find(n("ffn_norm"), (1, w))?,
                w_gate: find(n("w_gate"), (w, f))?,
                w_up: find(n("w_up"), (w, f))?,
                w_down: find(n("w_down"), (f, w))?,
            });
        }
        let final_norm = find("final_norm".into(), (1, w))?;
        let head = find("head".into(), (w, vocab.len()))?;
        if store.len() != 3 + 9 * cfg.layers {
            return Err(Error::invalid("checkpoint carries unexpected tensors"));
        }
        let tables = HRopeTables::new(cfg.head_dim(), cfg.base_inter, cfg.base_intra)?;
        Ok(Model {
            cfg,
            vocab,
            store,
            embed,
            layers,
            final_norm,
            head,
            tables,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn tables(&self) -> &HRopeTables {
        &self.tables
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn head_id(&self) -> ParamId {
        self.head
    }

    fn check_input(&self, ids: &[u32], coords: &[Coord], mask: &AttnMask) -> Result<()> {
        if ids.len() > self.cfg.max_len {
            return Err(Error::TooLong {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        if coords.len() != ids.len() || mask.len() != ids.len() {
            return Err(Error::invalid("ids, coords and mask lengths differ"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab.len()) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.vocab.len())));
        }
        Ok(())
    }

    /// Final hidden states (after the last norm) on a tape.
    pub fn hidden_on_tape(&self, g: &mut Graph<'_>, ids: &[u32], coords: &[Coord], mask: &AttnMask) -> Result<Var> {
        self.check_input(ids, coords, mask)?;
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let angles = Arc::new(self.tables.rope_angles(coords));
        let shape = self.cfg.attn_shape();
        let table = g.param(self.embed);
        let mut h = g.gather(table, &rows);
        for lp in &self.layers {
            let gain = g.param(lp.attn_norm);
            let x = g.rms_norm(h, gain, RMS_EPS);
            let (wq, wk, wv, wo) = (g.param(lp.wq), g.param(lp.wk), g.param(lp.wv), g.param(lp.wo));
            let q = g.matmul(x, wq);
            let k = g.matmul(x, wk);
            let v = g.matmul(x, wv);
            let q = g.rope(q, Arc::clone(&angles), shape.head_dim);
            let k = g.rope(k, Arc::clone(&angles), shape.head_dim);
            let a = g.attention(q, k, v, mask.key_sets(), shape);
            let a = g.matmul(a, wo);
            h = g.add(h, a);
            let gain = g.param(lp.ffn_norm);
            let x = g.rms_norm(h, gain, RMS_EPS);
            let (wg, wu, wd) = (g.param(lp.w_gate), g.param(lp.w_up), g.param(lp.w_down));
            let gate = g.matmul(x, wg);
            let gate = g.silu(gate);
            let up = g.matmul(x, wu);
            let f = g.mul(gate, up);
            let f = g.matmul(f, wd);
            h = g.add(h, f);
        }
        let gain = g.param(self.final_norm);
        Ok(g.rms_norm(h, gain, RMS_EPS))
    }

    /// Next-token logits over the whole vocabulary at every position.
    pub fn forward(&self, ids: &[u32], coords: &[Coord], mask: &AttnMask) -> Result<Matrix> {
        let mut g = Graph::with_params(&self.store);
        let h = self.hidden_on_tape(&mut g, ids, coords, mask)?;
        let head = g.param(self.head);
        let logits = g.matmul(h, head);
        Ok(g.value(logits).clone())
    }

    pub fn forward_stream(&self, stream: &TokenStream, kind: MaskKind) -> Result<Matrix> {
        let mask = AttnMask::build(stream.tokens(), kind);
        self.forward(&stream.ids(), &stream.coords(), &mask)
    }

    // Tape-free pieces used by incremental decoding.

    /// Normed input projections for a block of token rows; `q` and `k`
    /// rotated at each row's coordinate.
    pub fn qkv(&self, layer: usize, h: &Matrix, coords: &[Coord]) -> Qkv {
        let lp = &self.layers[layer];
        let x = rms_norm_rows(h, self.store.get(lp.attn_norm));
        let angles = self.tables.rope_angles(coords);
        let hd = self.cfg.head_dim();
        let rot = |w: ParamId| crate::autograd::rotate_heads(&x.matmul(self.store.get(w)), &angles, hd, false);
        Qkv {
            q: rot(lp.wq),
            k: rot(lp.wk),
            v: x.matmul(self.store.get(lp.wv)),
        }
    }

    /// Grouped-query attention of one query row over explicit key/value rows.
    pub fn attend(&self, q: &[f64], keys: &[&[f64]], values: &[&[f64]]) -> Vec<f64> {
        let hd = self.cfg.head_dim();
        let group = self.cfg.n_q / self.cfg.n_kv;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; self.cfg.width];
        if keys.is_empty() {
            return out;
        }
        let mut p = vec![0.0; keys.len()];
        for h in 0..self.cfg.n_q {
            let g = h / group;
            let qh = &q[h * hd..(h + 1) * hd];
            for (s, k) in p.iter_mut().zip(keys) {
                *s = dot(qh, &k[g * hd..(g + 1) * hd]) * scale;
            }
            crate::autograd::softmax_in_place(&mut p);
            let o = &mut out[h * hd..(h + 1) * hd];
            for (&w, v) in p.iter().zip(values) {
                for (a, b) in o.iter_mut().zip(&v[g * hd..(g + 1) * hd]) {
                    *a += w * b;
                }
            }
        }
        out
    }

    /// Residual update after attention: output projection, then the gated
    /// FFN. Rows are independent.
    pub fn finish_layer(&self, layer: usize, h: &Matrix, attn: &Matrix) -> Matrix {
        let lp = &self.layers[layer];
        let mut h1 = h.clone();
        h1.add_assign(&attn.matmul(self.store.get(lp.wo)));
        let x = rms_norm_rows(&h1, self.store.get(lp.ffn_norm));
        let gate = x.matmul(self.store.get(lp.w_gate));
        let up = x.matmul(self.store.get(lp.w_up));
        let f: Vec<f64> = gate
            .data()
            .iter()
            .zip(up.data())
            .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
            .collect();
        let f = Matrix::from_vec(gate.rows(), gate.cols(), f);
        h1.add_assign(&f.matmul(self.store.get(lp.w_down)));
        h1
    }

    pub fn embed_rows(&self, ids: &[u32]) -> Result<Matrix> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab.len()) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.vocab.len())));
        }
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(self.store.get(self.embed).select_rows(&rows))
    }

    pub fn logits_rows(&self, h: &Matrix) -> Matrix {
        rms_norm_rows(h, self.store.get(self.final_norm)).matmul(self.store.get(self.head))
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.encode_checkpoint())?;
        f.flush()?;
        Ok(())
    }

    /// `HISAM-CKPT v1 <tensors> <meta bytes>` line, TOML metadata (model
    /// config and vocabulary), then per tensor a `name rows cols` line and
    /// row-major little-endian f32 data.
    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let meta = toml::to_string(&CheckpointMeta {
            model: self.cfg.clone(),
            vocab: self.vocab.clone(),
        })
        .expect("model config serializes");
        let mut out = format!("HISAM-CKPT v1 {} {}\n", self.store.len(), meta.len()).into_bytes();
        out.extend_from_slice(meta.as_bytes());
        for (name, m) in self.store.iter() {
            out.extend_from_slice(format!("{name} {} {}\n", m.rows(), m.cols()).as_bytes());
            for &x in m.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::decode_checkpoint(&std::fs::read(path)?, path)
    }

    pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |line: usize, m: String| Error::parse(path, line, m);
        let mut pos = 0;
        let next_line = |pos: &mut usize, line: usize| -> Result<String> {
            let end = bytes[*pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|p| *pos + p)
                .ok_or_else(|| bad(line, "unexpected end of file".into()))?;
            let s = std::str::from_utf8(&bytes[*pos..end])
                .map_err(|_| bad(line, "header is not UTF-8".into()))?
                .to_string();
            *pos = end + 1;
            Ok(s)
        };
        let header = next_line(&mut pos, 1)?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 4 || f[0] != "HISAM-CKPT" || f[1] != "v1" {
            return Err(bad(1, "expected `HISAM-CKPT v1 <tensors> <meta bytes>` header".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(1, format!("bad integer `{s}`")));
        let (n_tensors, meta_len) = (num(f[2])?, num(f[3])?);
        let meta = bytes
            .get(pos..pos + meta_len)
            .ok_or_else(|| bad(2, "metadata truncated".into()))?;
        let meta: CheckpointMeta = std::str::from_utf8(meta)
            .ok()
            .and_then(|s| toml::from_str(s).ok())
            .ok_or_else(|| bad(2, "unreadable metadata".into()))?;
        pos += meta_len;
        let mut store = ParamStore::new();
        for t in 0..n_tensors {
            let line = next_line(&mut pos, t + 3)?;
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.len() != 3 {
                return Err(bad(t + 3, format!("bad tensor line `{line}`")));
            }
            let (r, c) = (num(p[1])?, num(p[2])?);
            let end = pos + 4 * r * c;
            if end > bytes.len() {
                return Err(bad(t + 3, format!("tensor {} truncated", p[0])));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|ch| f32::from_le_bytes(ch.try_into().expect("4 bytes")) as f64)
                .collect();
            pos = end;
            store.add(p[0], Matrix::from_vec(r, c, data));
        }
        if pos != bytes.len() {
            return Err(bad(n_tensors + 3, "trailing bytes after last tensor".into()));
        }
        let problems = meta.model.violations();
        if !problems.is_empty() {
            return Err(bad(2, problems.join("; ")));
        }
        Self::assemble(meta.model, meta.vocab, store).map_err(|e| bad(0, e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    vocab: Vocab,
}

fn rms_norm_rows(x: &Matrix, gain: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|a| a * a).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (a, g) in row.iter_mut().zip(gain.data()) {
            *a *= inv * g;
        }
    }
    out
}

/// Random stream over `vocab` with `k` items, with or without a profile.
pub fn random_stream(vocab: &Vocab, profile: bool, k: usize, rng: &mut impl Rng) -> Result<TokenStream> {
    let draw = |rng: &mut dyn rand::RngCore| -> Vec<usize> {
        vocab.code_sizes().iter().map(|&s| rng.random_range(0..s)).collect()
    };
    let profile = if profile { draw(rng) } else { Vec::new() };
    let history: Vec<_> = (0..k)
        .map(|_| crate::seqstream::Interaction {
            codes: draw(rng),
            action: rng.random_range(0..vocab.n_actions()),
        })
        .collect();
    crate::seqstream::build_stream(&profile, &history, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqstream::{build_stream, Interaction};
    use proptest::{prop_assert, proptest};
    use std::f64::consts::FRAC_PI_2;

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Score written out pair by pair as a sum of cosine and sine terms of
    /// the coordinate differences.
    fn expansion(q: &[f64], k: &[f64], cq: Coord, ck: Coord, t: &HRopeTables) -> f64 {
        let d = q.len();
        let dm = cq.m as f64 - ck.m as f64;
        let dn = cq.n as f64 - ck.n as f64;
        let mut s = 0.0;
        for j in 0..d / 2 {
            let phi = if j < d / 4 { dm * t.theta_inter[j] } else { dn * t.theta_intra[j - d / 4] };
            let (a0, a1, b0, b1) = (q[2 * j], q[2 * j + 1], k[2 * j], k[2 * j + 1]);
            s += (a0 * b0 + a1 * b1) * phi.cos() + (a0 * b1 - a1 * b0) * phi.sin();
        }
        s
    }

    #[test]
    fn tables_follow_the_frequency_rule() {
        let t = HRopeTables::new(8, 1e4, 100.0).unwrap();
        assert_eq!(t.theta_inter, vec![1.0, 1e-2]);
        assert_eq!(t.theta_intra, vec![1.0, 0.1]);
        assert!(HRopeTables::new(6, 1e4, 100.0).is_err());
        let t = HRopeTables::new(64, 1e4, 100.0).unwrap();
        assert!(t.theta_intra.windows(2).all(|w| w[1] < w[0]));
        assert!(t.theta_inter.iter().zip(&t.theta_intra).skip(1).all(|(a, b)| a < b));
    }

    #[test]
    fn rotation_examples() {
        let mut rng = stage_rng(0, "t");
        let t = HRopeTables::new(8, 1e4, 100.0).unwrap();
        let x = rand_vec(8, &mut rng);
        assert_eq!(hrope_apply(&x, Coord::new(0, 0), &t).unwrap(), x);
        let y = hrope_apply(&x, Coord::new(17, 5), &t).unwrap();
        assert!((dot(&y, &y).sqrt() - dot(&x, &x).sqrt()).abs() < 1e-12);

        let quarter = HRopeTables {
            head_dim: 4,
            theta_inter: vec![FRAC_PI_2],
            theta_intra: vec![1.0],
        };
        let y = hrope_apply(&[1.0, 0.0, 1.0, 0.0], Coord::new(1, 0), &quarter).unwrap();
        let want = [0.0, 1.0, 1.0, 0.0];
        assert!(y.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15), "{y:?}");
    }

    proptest! {
        #[test]
        fn score_matches_expansion_and_shifts(seed in 0u64..1000, di in 0usize..3, s in -50i64..50) {
            let d = [4, 8, 64][di];
            let t = HRopeTables::new(d, 1e4, 100.0).unwrap();
            let mut rng = stage_rng(seed, "score");
            let (q, k) = (rand_vec(d, &mut rng), rand_vec(d, &mut rng));
            let cq = Coord::new(rng.random_range(50..500), rng.random_range(50..100));
            let ck = Coord::new(rng.random_range(50..500), rng.random_range(50..100));
            let got = hrope_score(&q, &k, cq, ck, &t).unwrap();
            prop_assert!((got - expansion(&q, &k, cq, ck, &t)).abs() < 1e-9);
            let sh = |c: Coord, dm: i64, dn: i64| Coord::new((c.m as i64 + dm) as u32, (c.n as i64 + dn) as u32);
            let by_m = hrope_score(&q, &k, sh(cq, s, 0), sh(ck, s, 0), &t).unwrap();
            let by_n = hrope_score(&q, &k, sh(cq, 0, s), sh(ck, 0, s), &t).unwrap();
            prop_assert!((by_m - got).abs() < 1e-9 && (by_n - got).abs() < 1e-9);
        }
    }

    #[test]
    fn halves_do_not_interfere() {
        let t = HRopeTables::new(16, 1e4, 100.0).unwrap();
        let mut rng = stage_rng(3, "t");
        let (mut q, mut k) = (rand_vec(16, &mut rng), rand_vec(16, &mut rng));
        q[8..].fill(0.0);
        k[8..].fill(0.0);
        let base = hrope_score(&q, &k, Coord::new(9, 1), Coord::new(4, 1), &t).unwrap();
        for n in 0..=16 {
            let s = hrope_score(&q, &k, Coord::new(9, n), Coord::new(4, 16 - n), &t).unwrap();
            assert!((s - base).abs() <= 1e-12);
        }
    }

    fn vocab() -> Vocab {
        Vocab::new(vec![5; 6], 2).unwrap()
    }

    fn item(c: usize, a: usize) -> Interaction {
        Interaction { codes: vec![c % 5; 6], action: a }
    }

    #[test]
    fn mask_cases() {
        let s = build_stream(&[1; 6], &[item(1, 0), item(2, 1), item(3, 1)], &vocab()).unwrap();
        let mask = build_mask(&s);
        let q = s.segment(3).start + 2;
        assert!(mask.is_visible(q, 0), "profile visible");
        assert!(!mask.is_visible(q, s.segment(1).start + 1), "old item code hidden");
        assert!(!mask.is_visible(q, s.action_positions()[0]), "old action hidden");
        assert!(mask.is_visible(q, s.anchor_positions()[0]), "old anchor visible");
        assert!(!mask.is_visible(q, q + 1), "causal");
        for q in 0..s.len() {
            let m = s.tokens()[q].coord.m as usize;
            let own = if m == 0 { 0 } else { q - s.segment(m).start + 1 };
            let profile = if m == 0 { q + 1 } else { 6 };
            let anchors = m.saturating_sub(1);
            assert_eq!(mask.visible(q).len(), profile + own + anchors, "query {q}");
        }
        let dense = mask.to_dense();
        assert_eq!(dense[(q, 0)], 0.0);
        assert_eq!(dense[(q, 7)], f64::NEG_INFINITY);
    }

    fn small_cfg(width: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            width,
            layers,
            n_q: 4,
            n_kv: 2,
            max_len: 256,
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    fn model(width: usize, layers: usize, seed: u64) -> Model {
        let mut m = Model::new(&small_cfg(width, layers), &vocab(), seed).unwrap();
        let mut rng = stage_rng(seed, "head");
        let head = m.head_id();
        *m.store_mut().get_mut(head) = Matrix::random_normal(width, vocab().len(), 0.3, &mut rng);
        m
    }

    /// Straight-line forward with a dense additive mask.
    fn naive_forward(m: &Model, ids: &[u32], coords: &[Coord], mask: &Matrix) -> Matrix {
        let cfg = m.config();
        let st = m.store();
        let (hd, t) = (cfg.head_dim(), ids.len());
        let norm = |x: &[f64], g: &Matrix| -> Vec<f64> {
            let r = (x.iter().map(|a| a * a).sum::<f64>() / x.len() as f64 + 1e-6).sqrt();
            x.iter().zip(g.data()).map(|(a, b)| a / r * b).collect()
        };
        let vecmat = |x: &[f64], w: &Matrix| -> Vec<f64> {
            (0..w.cols()).map(|c| (0..w.rows()).map(|r| x[r] * w[(r, c)]).sum()).collect()
        };
        let find = |n: &str| st.get(st.find(n).unwrap());
        let mut h: Vec<Vec<f64>> = ids.iter().map(|&i| find("embed").row(i as usize).to_vec()).collect();
        for l in 0..cfg.layers {
            let p = |n: &str| find(&format!("layer.{l}.{n}"));
            let x: Vec<Vec<f64>> = h.iter().map(|r| norm(r, p("attn_norm"))).collect();
            let rot = |v: Vec<f64>, c: Coord| -> Vec<f64> {
                v.chunks(hd).flat_map(|hh| hrope_apply(hh, c, m.tables()).unwrap()).collect()
            };
            let q: Vec<_> = x.iter().zip(coords).map(|(r, &c)| rot(vecmat(r, p("wq")), c)).collect();
            let k: Vec<_> = x.iter().zip(coords).map(|(r, &c)| rot(vecmat(r, p("wk")), c)).collect();
            let v: Vec<_> = x.iter().map(|r| vecmat(r, p("wv"))).collect();
            for i in 0..t {
                let mut att = vec![0.0; cfg.width];
                for head in 0..cfg.n_q {
                    let g = head / (cfg.n_q / cfg.n_kv);
                    let scores: Vec<f64> = (0..t)
                        .map(|j| dot(&q[i][head * hd..][..hd], &k[j][g * hd..][..hd]) / (hd as f64).sqrt() + mask[(i, j)])
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..t {
                        for c in 0..hd {
                            att[head * hd + c] += e[j] / z * v[j][g * hd + c];
                        }
                    }
                }
                let o = vecmat(&att, p("wo"));
                for c in 0..cfg.width {
                    h[i][c] += o[c];
                }
                let x = norm(&h[i], p("ffn_norm"));
                let (ga, up) = (vecmat(&x, p("w_gate")), vecmat(&x, p("w_up")));
                let f: Vec<f64> = ga.iter().zip(&up).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect();
                let dn = vecmat(&f, p("w_down"));
                for c in 0..cfg.width {
                    h[i][c] += dn[c];
                }
            }
        }
        let rows: Vec<Vec<f64>> = h.iter().map(|r| vecmat(&norm(r, find("final_norm")), find("head"))).collect();
        Matrix::from_rows(&rows)
    }

    #[test]
    fn forward_matches_dense_reference() {
        let m = model(16, 2, 1);
        let s = build_stream(&[2; 6], &[item(1, 0), item(4, 1), item(3, 0)], &vocab()).unwrap();
        for kind in [MaskKind::MemoryAnchor, MaskKind::Causal] {
            let mask = AttnMask::build(s.tokens(), kind);
            let got = m.forward(&s.ids(), &s.coords(), &mask).unwrap();
            let want = naive_forward(&m, &s.ids(), &s.coords(), &mask.to_dense());
            assert!(got.max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn self_only_rows_match_single_tokens() {
        let m = model(16, 1, 2);
        let s = build_stream(&[], &[item(1, 0)], &vocab()).unwrap();
        let only_self = AttnMask::from_key_sets((0..s.len() as u32).map(|i| vec![i]).collect());
        let all = m.forward(&s.ids(), &s.coords(), &only_self).unwrap();
        for i in 0..s.len() {
            let one = AttnMask::from_key_sets(vec![vec![0]]);
            let single = m.forward(&s.ids()[i..=i], &s.coords()[i..=i], &one).unwrap();
            assert!(single.row(0).iter().zip(all.row(i)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn causality_and_mask_effects() {
        let m = model(16, 2, 3);
        let s = build_stream(&[0; 6], &[item(1, 0), item(2, 1), item(3, 1)], &vocab()).unwrap();
        let a = m.forward_stream(&s, MaskKind::MemoryAnchor).unwrap();
        assert_eq!(a, m.forward_stream(&s, MaskKind::MemoryAnchor).unwrap());

        let mut ids = s.ids();
        let cut = s.segment(2).start + 3;
        ids[cut..].reverse();
        let b = m.forward(&ids, &s.coords(), &build_mask(&s)).unwrap();
        for r in 0..cut {
            assert_eq!(a.row(r), b.row(r));
        }

        let c = m.forward_stream(&s, MaskKind::Causal).unwrap();
        let (ma, causal) = (build_mask(&s), AttnMask::build(s.tokens(), MaskKind::Causal));
        for r in 0..s.len() {
            if ma.visible(r) == causal.visible(r) {
                assert_eq!(a.row(r), c.row(r), "row {r}");
            } else {
                assert!(a.row(r) != c.row(r), "row {r}");
            }
        }
        assert!(s.segment(1).all(|r| ma.visible(r) == causal.visible(r)));
    }

    #[test]
    fn input_errors() {
        let m = model(16, 1, 4);
        let s = build_stream(&[], &[item(1, 0)], &vocab()).unwrap();
        let mask = build_mask(&s);
        let mut ids = s.ids();
        ids[0] = vocab().len() as u32;
        assert!(m.forward(&ids, &s.coords(), &mask).is_err());
        let mut cfg = small_cfg(16, 1);
        cfg.max_len = 4;
        let short = Model::new(&cfg, &vocab(), 0).unwrap();
        assert!(matches!(
            short.forward_stream(&s, MaskKind::Causal),
            Err(Error::TooLong { len: 8, max: 4 })
        ));
        assert!(Model::new(&ModelConfig { width: 30, ..small_cfg(16, 1) }, &vocab(), 0).is_err());
    }

    #[test]
    fn untrained_head_is_uniform() {
        let m = Model::new(&small_cfg(16, 2), &vocab(), 5).unwrap();
        let s = build_stream(&[0; 6], &[item(1, 0)], &vocab()).unwrap();
        assert!(m.forward_stream(&s, MaskKind::MemoryAnchor).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(16, 2, 6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.write_checkpoint(&p).unwrap();
        let back = Model::load_checkpoint(&p).unwrap();
        let mut rounded = m.clone();
        rounded.store_mut().round_to_f32();
        assert_eq!(back, rounded);
        assert_eq!(back.encode_checkpoint(), std::fs::read(&p).unwrap());
        let bytes = std::fs::read(&p).unwrap();
        assert!(Model::decode_checkpoint(&bytes[..bytes.len() - 3], &p).is_err());
        assert!(Model::decode_checkpoint(b"HISAM-CB v1\n", &p).is_err());
    }
}
