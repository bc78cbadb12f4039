//! Inference: token-by-token decoding against a key/value cache that drops
//! item detail once the item's anchor is in place, and one-pass scoring of
//! many candidate items against a shared history.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmat::{anchor_rule, MaskKind, Model, ModelConfig};
use crate::rng::stage_rng;
use crate::seqstream::{segment_tokens, Coord, SemanticToken, TokenKind, TokenStream, Vocab};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct KvCacheEntry {
    pub layer: usize,
    pub slot: usize,
    /// Already rotated at `coord`, which is the token's original stream
    /// coordinate and survives compaction.
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub coord: Coord,
    pub kind: TokenKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CachePolicy {
    pub mask: MaskKind,
    /// Drop an item's non-anchor entries once its action is consumed.
    pub evict: bool,
}

impl CachePolicy {
    pub const ANCHOR: CachePolicy = CachePolicy {
        mask: MaskKind::MemoryAnchor,
        evict: true,
    };
    pub const FULL: CachePolicy = CachePolicy {
        mask: MaskKind::Causal,
        evict: false,
    };
}

#[derive(Clone, Debug)]
pub struct AnchorCache {
    layers: Vec<Vec<KvCacheEntry>>,
    policy: CachePolicy,
    last: Option<SemanticToken>,
    completed: usize,
    key_visits: u64,
}

impl AnchorCache {
    pub fn new(n_layers: usize, policy: CachePolicy) -> Result<Self> {
        if policy.evict && policy.mask != MaskKind::MemoryAnchor {
            return Err(Error::config("eviction is only lossless under the anchor mask"));
        }
        Ok(AnchorCache {
            layers: vec![Vec::new(); n_layers],
            policy,
            last: None,
            completed: 0,
            key_visits: 0,
        })
    }

    pub fn for_model(model: &Model, policy: CachePolicy) -> Result<Self> {
        Self::new(model.config().layers, policy)
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn entries(&self, layer: usize) -> &[KvCacheEntry] {
        &self.layers[layer]
    }

    /// Entries per layer (every layer holds the same tokens).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Items whose action has been consumed.
    pub fn completed_items(&self) -> usize {
        self.completed
    }

    /// Query-key scores computed so far, summed over layers.
    pub fn key_visits(&self) -> u64 {
        self.key_visits
    }

    /// Bytes held by keys and values at f64.
    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|e| 8 * (e.key.len() + e.value.len()))
            .sum()
    }

    /// True when no item segment is half consumed.
    pub fn at_boundary(&self) -> bool {
        self.last.is_none_or(|t| matches!(t.kind, TokenKind::Action | TokenKind::ProfileCode))
    }

    fn evict_segment(&mut self, m: u32) {
        for layer in &mut self.layers {
            layer.retain(|e| e.coord.m != m || e.kind == TokenKind::Anchor);
            for (slot, e) in layer.iter_mut().enumerate() {
                e.slot = slot;
            }
        }
    }
}

/// Feeds `tokens` one at a time, returning next-token logits for each.
pub fn incremental_decode(model: &Model, cache: &mut AnchorCache, tokens: &[SemanticToken]) -> Result<Matrix> {
    if cache.layers.len() != model.config().layers {
        return Err(Error::invalid("cache depth does not match the model"));
    }
    let vocab_len = model.vocab().len();
    let mut out = Matrix::zeros(tokens.len(), vocab_len);
    for (i, tok) in tokens.iter().enumerate() {
        if let Some(last) = cache.last {
            if tok.coord.m < last.coord.m {
                return Err(Error::CoordRegression {
                    last: last.coord.m,
                    got: tok.coord.m,
                });
            }
        }
        let mut h = model.embed_rows(&[tok.vocab_id])?;
        for l in 0..cache.layers.len() {
            let qkv = model.qkv(l, &h, &[tok.coord]);
            let layer = &mut cache.layers[l];
            layer.push(KvCacheEntry {
                layer: l,
                slot: layer.len(),
                key: qkv.k.row(0).to_vec(),
                value: qkv.v.row(0).to_vec(),
                coord: tok.coord,
                kind: tok.kind,
            });
            let visible: Vec<&KvCacheEntry> = layer
                .iter()
                .filter(|e| cache.policy.mask == MaskKind::Causal || anchor_rule(tok, &entry_token(e)))
                .collect();
            cache.key_visits += visible.len() as u64;
            let keys: Vec<&[f64]> = visible.iter().map(|e| e.key.as_slice()).collect();
            let values: Vec<&[f64]> = visible.iter().map(|e| e.value.as_slice()).collect();
            let attn = Matrix::row_vector(model.attend(qkv.q.row(0), &keys, &values));
            h = model.finish_layer(l, &h, &attn);
        }
        out.row_mut(i).copy_from_slice(model.logits_rows(&h).row(0));
        cache.last = Some(*tok);
        if tok.kind == TokenKind::Action {
            cache.completed += 1;
            if cache.policy.evict {
                cache.evict_segment(tok.coord.m);
            }
        }
    }
    Ok(out)
}

fn entry_token(e: &KvCacheEntry) -> SemanticToken {
    SemanticToken {
        vocab_id: 0,
        kind: e.kind,
        coord: e.coord,
    }
}

/// Decodes a whole stream into a fresh cache.
pub fn decode_stream(model: &Model, stream: &TokenStream, policy: CachePolicy) -> Result<(AnchorCache, Matrix)> {
    let mut cache = AnchorCache::for_model(model, policy)?;
    let logits = incremental_decode(model, &mut cache, stream.tokens())?;
    Ok((cache, logits))
}

/// Builds the cache for a whole stream with one batched pass per layer.
/// Same result as feeding the tokens one by one.
pub fn prefill(model: &Model, tokens: &[SemanticToken], policy: CachePolicy) -> Result<(AnchorCache, Matrix)> {
    let mut cache = AnchorCache::for_model(model, policy)?;
    for w in tokens.windows(2) {
        if w[1].coord.m < w[0].coord.m {
            return Err(Error::CoordRegression {
                last: w[0].coord.m,
                got: w[1].coord.m,
            });
        }
    }
    let ids: Vec<u32> = tokens.iter().map(|t| t.vocab_id).collect();
    let coords: Vec<Coord> = tokens.iter().map(|t| t.coord).collect();
    let mut h = model.embed_rows(&ids)?;
    for l in 0..cache.layers.len() {
        let qkv = model.qkv(l, &h, &coords);
        let mut attn = Matrix::zeros(tokens.len(), model.config().width);
        let mut keys: Vec<&[f64]> = Vec::new();
        let mut values: Vec<&[f64]> = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            keys.clear();
            values.clear();
            for j in 0..=i {
                if policy.mask == MaskKind::Causal || anchor_rule(tok, &tokens[j]) {
                    keys.push(qkv.k.row(j));
                    values.push(qkv.v.row(j));
                }
            }
            cache.key_visits += keys.len() as u64;
            attn.row_mut(i).copy_from_slice(&model.attend(qkv.q.row(i), &keys, &values));
        }
        cache.layers[l] = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| KvCacheEntry {
                layer: l,
                slot: i,
                key: qkv.k.row(i).to_vec(),
                value: qkv.v.row(i).to_vec(),
                coord: t.coord,
                kind: t.kind,
            })
            .collect();
        h = model.finish_layer(l, &h, &attn);
    }
    let logits = model.logits_rows(&h);
    for t in tokens.iter().filter(|t| t.kind == TokenKind::Action) {
        cache.completed += 1;
        if policy.evict {
            cache.evict_segment(t.coord.m);
        }
    }
    cache.last = tokens.last().copied();
    Ok((cache, logits))
}

/// Probability of `action` after the anchor of each candidate. Every
/// candidate sits at item order `completed + 1`, sees the cached history
/// under the anchor mask, and sees only its own tokens otherwise.
pub fn rank_one_pass(model: &Model, cache: &AnchorCache, candidates: &[Vec<usize>], action: usize) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to rank"));
    }
    if cache.policy.mask != MaskKind::MemoryAnchor {
        return Err(Error::invalid("ranking needs an anchor-mask history cache"));
    }
    if !cache.at_boundary() {
        return Err(Error::invalid("history cache stops inside an item segment"));
    }
    let vocab = model.vocab();
    let actions = vocab.action_range();
    if action >= vocab.n_actions() {
        return Err(Error::invalid(format!("action {action} outside 0..{}", vocab.n_actions())));
    }
    let m = cache.completed as u32 + 1;
    let mut tokens = Vec::new();
    let mut block_start = Vec::with_capacity(candidates.len());
    for c in candidates {
        block_start.push(tokens.len());
        tokens.extend(segment_tokens(c, m, None, vocab)?);
    }
    let len = cache.len() + tokens.len();
    if len > model.config().max_len {
        return Err(Error::TooLong {
            len,
            max: model.config().max_len,
        });
    }
    let block_of: Vec<usize> = (0..tokens.len())
        .map(|i| block_start.partition_point(|&s| s <= i) - 1)
        .collect();
    let ids: Vec<u32> = tokens.iter().map(|t| t.vocab_id).collect();
    let coords: Vec<Coord> = tokens.iter().map(|t| t.coord).collect();
    let mut h = model.embed_rows(&ids)?;
    for l in 0..cache.layers.len() {
        let qkv = model.qkv(l, &h, &coords);
        let history = &cache.layers[l];
        let mut attn = Matrix::zeros(tokens.len(), model.config().width);
        for (i, tok) in tokens.iter().enumerate() {
            let mut keys: Vec<&[f64]> = Vec::new();
            let mut values: Vec<&[f64]> = Vec::new();
            for e in history.iter().filter(|e| anchor_rule(tok, &entry_token(e))) {
                keys.push(&e.key);
                values.push(&e.value);
            }
            for j in block_start[block_of[i]]..=i {
                keys.push(qkv.k.row(j));
                values.push(qkv.v.row(j));
            }
            attn.row_mut(i).copy_from_slice(&model.attend(qkv.q.row(i), &keys, &values));
        }
        h = model.finish_layer(l, &h, &attn);
    }
    let anchors: Vec<usize> = (0..candidates.len())
        .map(|b| block_start.get(b + 1).copied().unwrap_or(tokens.len()) - 1)
        .collect();
    let logits = model.logits_rows(&h.select_rows(&anchors));
    Ok((0..anchors.len())
        .map(|r| action_probs(&logits.row(r)[actions.start as usize..actions.end as usize])[action])
        .collect())
}

/// [`rank_one_pass`] over chunks of at most `chunk` candidates.
pub fn rank_chunked(
    model: &Model,
    cache: &AnchorCache,
    candidates: &[Vec<usize>],
    action: usize,
    chunk: usize,
) -> Result<Vec<f64>> {
    if chunk == 0 {
        return Err(Error::config("chunk size must be positive"));
    }
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates.chunks(chunk) {
        out.extend(rank_one_pass(model, cache, c, action)?);
    }
    Ok(out)
}

/// Softmax over action logits.
pub fn action_probs(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    crate::autograd::softmax_in_place(&mut p);
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    /// History length in items.
    pub k: usize,
    /// Codes per item.
    pub l_i: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub k: usize,
    pub l_i: usize,
    pub l_u: usize,
    pub candidates: usize,
    /// Query-key scores per layer while decoding the history, anchor cache.
    pub anchor_keys: u64,
    pub anchor_keys_formula: u64,
    /// Same stream under plain causal attention without eviction.
    pub full_keys: u64,
    pub full_keys_formula: u64,
    /// Codes-only stream (no anchor or action tokens), plain causal.
    pub plain_keys: u64,
    pub plain_keys_formula: u64,
    pub anchor_cache_entries: usize,
    pub full_cache_entries: usize,
    pub anchor_cache_bytes: usize,
    pub full_cache_bytes: usize,
    /// Historical keys in front of the last item, codes-only over anchor.
    pub history_ratio: f64,
    pub anchor_attn_flops: u64,
    pub full_attn_flops: u64,
    pub decode_p50_us: f64,
    pub decode_p99_us: f64,
    pub rank_p50_us: f64,
    pub rank_p99_us: f64,
}

/// Closed-form query-key score count per layer for a stream of `k` items
/// under the anchor mask.
pub fn anchor_key_formula(l_u: usize, l_i: usize, k: usize) -> u64 {
    let (l_u, seg, k) = (l_u as u64, l_i as u64 + 2, k as u64);
    l_u * (l_u + 1) / 2 + k * seg * l_u + seg * k * k.saturating_sub(1) / 2 + k * seg * (seg + 1) / 2
}

/// Causal score count for `t` tokens.
pub fn causal_key_formula(t: usize) -> u64 {
    let t = t as u64;
    t * (t + 1) / 2
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Runs each workload on a random model of the given shape and reports
/// counted work against the closed forms plus wall-clock percentiles.
pub fn bench_serving(cfg: &ModelConfig, workloads: &[Workload], seed: u64, reps: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(workloads.len());
    for w in workloads {
        if w.l_i == 0 {
            return Err(Error::config("items need at least one code"));
        }
        let vocab = Vocab::new(vec![16; w.l_i], 2)?;
        let model_cfg = ModelConfig {
            max_len: cfg.max_len.max(w.l_i + (w.l_i + 1) * w.candidates.max(1) + w.k + 1),
            ..cfg.clone()
        };
        let model = Model::new(&model_cfg, &vocab, seed)?;
        let mut rng = stage_rng(seed, "bench");
        let stream = crate::hmat::random_stream(&vocab, true, w.k, &mut rng)?;
        let l_u = stream.profile_len();
        let layers = model_cfg.layers as u64;

        let mut decode_us = Vec::new();
        let mut anchor = AnchorCache::for_model(&model, CachePolicy::ANCHOR)?;
        let mut entries_before_last = l_u;
        for rep in 0..reps.max(1) {
            let mut cache = AnchorCache::for_model(&model, CachePolicy::ANCHOR)?;
            for (i, tok) in stream.tokens().iter().enumerate() {
                if w.k > 0 && i == stream.segment(w.k).start {
                    entries_before_last = cache.len();
                }
                let t0 = Instant::now();
                incremental_decode(&model, &mut cache, std::slice::from_ref(tok))?;
                decode_us.push(t0.elapsed().as_secs_f64() * 1e6);
            }
            if rep == 0 {
                anchor = cache;
            }
        }
        let (full, _) = decode_stream(&model, &stream, CachePolicy::FULL)?;
        let plain: Vec<SemanticToken> = stream
            .tokens()
            .iter()
            .filter(|t| matches!(t.kind, TokenKind::ProfileCode | TokenKind::ItemCode))
            .copied()
            .collect();
        let mut plain_cache = AnchorCache::for_model(&model, CachePolicy::FULL)?;
        incremental_decode(&model, &mut plain_cache, &plain)?;
        let plain_before_last = l_u + w.k.saturating_sub(1) * w.l_i;

        let mut rank_us = Vec::new();
        if w.candidates > 0 {
            let cands: Vec<Vec<usize>> = (0..w.candidates)
                .map(|_| vocab.code_sizes().iter().map(|&s| rng.random_range(0..s)).collect())
                .collect();
            for _ in 0..reps.max(1) {
                let t0 = Instant::now();
                rank_one_pass(&model, &anchor, &cands, 1)?;
                rank_us.push(t0.elapsed().as_secs_f64() * 1e6);
            }
        }
        decode_us.sort_by(f64::total_cmp);
        rank_us.sort_by(f64::total_cmp);
        let flops = |visits: u64| 2 * visits * (model_cfg.n_q * model_cfg.head_dim()) as u64;
        rows.push(BenchRow {
            k: w.k,
            l_i: w.l_i,
            l_u,
            candidates: w.candidates,
            anchor_keys: anchor.key_visits() / layers,
            anchor_keys_formula: anchor_key_formula(l_u, w.l_i, w.k),
            full_keys: full.key_visits() / layers,
            full_keys_formula: causal_key_formula(stream.len()),
            plain_keys: plain_cache.key_visits() / layers,
            plain_keys_formula: causal_key_formula(plain.len()),
            anchor_cache_entries: anchor.len(),
            full_cache_entries: full.len(),
            anchor_cache_bytes: anchor.bytes(),
            full_cache_bytes: full.bytes(),
            history_ratio: plain_before_last as f64 / entries_before_last as f64,
            anchor_attn_flops: flops(anchor.key_visits()),
            full_attn_flops: flops(full.key_visits()),
            decode_p50_us: percentile(&decode_us, 0.5),
            decode_p99_us: percentile(&decode_us, 0.99),
            rank_p50_us: percentile(&rank_us, 0.5),
            rank_p99_us: percentile(&rank_us, 0.99),
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "k,l_i,l_u,candidates,anchor_keys,anchor_keys_formula,full_keys,full_keys_formula,plain_keys,plain_keys_formula,\
         anchor_cache_entries,full_cache_entries,anchor_cache_bytes,full_cache_bytes,history_ratio,\
         anchor_attn_flops,full_attn_flops,decode_p50_us,decode_p99_us,rank_p50_us,rank_p99_us"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.4},{},{},{:.1},{:.1},{:.1},{:.1}",
            r.k,
            r.l_i,
            r.l_u,
            r.candidates,
            r.anchor_keys,
            r.anchor_keys_formula,
            r.full_keys,
            r.full_keys_formula,
            r.plain_keys,
            r.plain_keys_formula,
            r.anchor_cache_entries,
            r.full_cache_entries,
            r.anchor_cache_bytes,
            r.full_cache_bytes,
            r.history_ratio,
            r.anchor_attn_flops,
            r.full_attn_flops,
            r.decode_p50_us,
            r.decode_p99_us,
            r.rank_p50_us,
            r.rank_p99_us
        )?;
    }
    f.flush()?;
    Ok(())
}
