//! Item/user embedding corpora, interaction logs, action vocabularies, and
//! the planted-rule synthetic generator.
//!
//! Embedding files start with a text header
//! `HISAM-EMB v1 <n_items> <n_modalities> <d_0> ... <d_{Nm-1}>`. Each record
//! is an id followed either by a newline and the concatenated little-endian
//! `f32` components (binary), or by whitespace-separated decimals on the same
//! line (text). Both forms may be read; the writer picks one.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::tensor::norm;

const EMB_MAGIC: &str = "HISAM-EMB";
const EMB_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct RawItemRecord {
    pub item_id: String,
    /// One vector per modality, in modality order.
    pub vectors: Vec<Vec<f64>>,
}

/// An immutable set of records sharing the same per-modality dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    dims: Vec<usize>,
    records: Vec<RawItemRecord>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(dims: Vec<usize>, records: Vec<RawItemRecord>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least two modalities, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("modality dimension must be positive"));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            validate_record(r, &dims).map_err(|m| Error::invalid(format!("{}: {m}", r.item_id)))?;
            if index.insert(r.item_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate id {}", r.item_id)));
            }
        }
        Ok(Corpus {
            dims,
            records,
            index,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RawItemRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&RawItemRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> HashSet<String> {
        self.index.keys().cloned().collect()
    }
}

fn validate_record(r: &RawItemRecord, dims: &[usize]) -> std::result::Result<(), String> {
    if r.item_id.is_empty() || r.item_id.chars().any(char::is_whitespace) {
        return Err("ids must be non-empty and contain no whitespace".into());
    }
    if r.vectors.len() != dims.len() {
        return Err(format!(
            "expected {} modality vectors, got {}",
            dims.len(),
            r.vectors.len()
        ));
    }
    for (j, (v, &d)) in r.vectors.iter().zip(dims).enumerate() {
        if v.len() != d {
            return Err(format!("modality {j}: expected {d} values, got {}", v.len()));
        }
        if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
            return Err(format!("modality {j}: non-finite value {bad}"));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Text,
}

pub fn encode_embeddings(corpus: &Corpus, format: EmbeddingFormat) -> Vec<u8> {
    let mut out = Vec::new();
    let dims: Vec<String> = corpus.dims.iter().map(usize::to_string).collect();
    out.extend_from_slice(
        format!(
            "{EMB_MAGIC} {EMB_VERSION} {} {} {}\n",
            corpus.len(),
            corpus.n_modalities(),
            dims.join(" ")
        )
        .as_bytes(),
    );
    for r in &corpus.records {
        out.extend_from_slice(r.item_id.as_bytes());
        match format {
            EmbeddingFormat::Binary => {
                out.push(b'\n');
                for x in r.vectors.iter().flatten() {
                    out.extend_from_slice(&(*x as f32).to_le_bytes());
                }
            }
            EmbeddingFormat::Text => {
                for x in r.vectors.iter().flatten() {
                    out.extend_from_slice(format!(" {}", *x as f32).as_bytes());
                }
                out.push(b'\n');
            }
        }
    }
    out
}

pub fn write_embeddings(path: &Path, corpus: &Corpus, format: EmbeddingFormat) -> Result<()> {
    fs::write(path, encode_embeddings(corpus, format))?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path)?;
    decode_embeddings(&bytes, path)
}

/// Parses an embeddings buffer. Records are numbered like lines: the header
/// is line 1 and record `i` is line `i + 2`.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<Corpus> {
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path, 1, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::parse(path, 1, "header is not UTF-8"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 4 || fields[0] != EMB_MAGIC || fields[1] != EMB_VERSION {
        return Err(Error::parse(
            path,
            1,
            format!("expected `{EMB_MAGIC} {EMB_VERSION} <n_items> <n_modalities> <dims...>`"),
        ));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::parse(path, 1, format!("bad {what} `{s}`")))
    };
    let n_items = num(fields[2], "item count")?;
    let n_mod = num(fields[3], "modality count")?;
    if fields.len() != 4 + n_mod {
        return Err(Error::parse(
            path,
            1,
            format!("header declares {n_mod} modalities but lists {} dims", fields.len() - 4),
        ));
    }
    let dims = fields[4..]
        .iter()
        .map(|s| num(s, "dimension"))
        .collect::<Result<Vec<_>>>()?;
    if n_mod < 2 || dims.contains(&0) {
        return Err(Error::parse(path, 1, "need >= 2 modalities with positive dims"));
    }
    let total: usize = dims.iter().sum();

    let mut records = Vec::with_capacity(n_items);
    let mut pos = header_end + 1;
    let mut seen = HashSet::new();
    while pos < bytes.len() {
        let line = records.len() + 2;
        let id_end = bytes[pos..]
            .iter()
            .position(|b| b.is_ascii_whitespace())
            .map(|p| pos + p)
            .ok_or_else(|| Error::parse(path, line, "truncated record id"))?;
        let id = std::str::from_utf8(&bytes[pos..id_end])
            .map_err(|_| Error::parse(path, line, "id is not UTF-8"))?
            .to_string();
        if id.is_empty() {
            return Err(Error::parse(path, line, "empty id"));
        }
        let flat: Vec<f64> = if bytes[id_end] == b'\n' {
            let start = id_end + 1;
            let end = start + 4 * total;
            if end > bytes.len() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("expected {} bytes of f32 data, file ends early", 4 * total),
                ));
            }
            pos = end;
            bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect()
        } else {
            let eol = bytes[id_end..]
                .iter()
                .position(|&b| b == b'\n')
                .map_or(bytes.len(), |p| id_end + p);
            let text = std::str::from_utf8(&bytes[id_end..eol])
                .map_err(|_| Error::parse(path, line, "row is not UTF-8"))?;
            pos = (eol + 1).min(bytes.len());
            text.split_whitespace()
                .map(|t| {
                    t.parse::<f32>()
                        .map(f64::from)
                        .map_err(|_| Error::parse(path, line, format!("bad float `{t}`")))
                })
                .collect::<Result<_>>()?
        };
        if flat.len() != total {
            return Err(Error::parse(
                path,
                line,
                format!("expected {total} values, found {}", flat.len()),
            ));
        }
        if let Some(bad) = flat.iter().find(|x| !x.is_finite()) {
            return Err(Error::parse(path, line, format!("non-finite value {bad}")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::parse(path, line, format!("duplicate id {id}")));
        }
        let mut vectors = Vec::with_capacity(n_mod);
        let mut off = 0;
        for &d in &dims {
            vectors.push(flat[off..off + d].to_vec());
            off += d;
        }
        records.push(RawItemRecord {
            item_id: id,
            vectors,
        });
    }
    if records.len() != n_items {
        return Err(Error::parse(
            path,
            records.len() + 2,
            format!("header declares {n_items} items, found {}", records.len()),
        ));
    }
    Corpus::new(dims, records).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// Finite action vocabulary; line index in the vocabulary file is the id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionVocab {
    names: Vec<String>,
}

impl ActionVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("action vocabulary is empty"));
        }
        let unique: HashSet<_> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::invalid("duplicate action names"));
        }
        Ok(ActionVocab { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        ActionVocab::new(names).map_err(|e| Error::parse(path, 1, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.names.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub item_id: String,
    pub action: usize,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionLog {
    pub user_id: String,
    /// Chronological, timestamps non-decreasing.
    pub events: Vec<Event>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Stable-sort each user's events by timestamp instead of rejecting
    /// out-of-order input.
    pub sort: bool,
    /// Keep events whose item is missing from the known-item set.
    pub permissive: bool,
}

/// Reads `user_id<TAB>item_id<TAB>action<TAB>timestamp` lines. Users appear
/// in first-seen order.
pub fn load_interactions(
    path: &Path,
    known_items: &HashSet<String>,
    actions: &ActionVocab,
    opts: LoadOptions,
) -> Result<Vec<InteractionLog>> {
    let text = fs::read_to_string(path)?;
    let mut logs: Vec<InteractionLog> = Vec::new();
    let mut by_user: HashMap<String, usize> = HashMap::new();
    let mut unknown = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(path, ln, format!("expected 4 tab-separated fields, got {}", f.len())));
        }
        let action = actions
            .id(f[2])
            .ok_or_else(|| Error::parse(path, ln, format!("unknown action `{}`", f[2])))?;
        let timestamp: i64 = f[3]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, ln, format!("bad timestamp `{}`", f[3])))?;
        if !known_items.contains(f[1]) {
            if opts.permissive {
                // kept as-is
            } else {
                unknown.push(f[1].to_string());
                continue;
            }
        }
        let slot = *by_user.entry(f[0].to_string()).or_insert_with(|| {
            logs.push(InteractionLog {
                user_id: f[0].to_string(),
                events: Vec::new(),
            });
            logs.len() - 1
        });
        let events = &mut logs[slot].events;
        if !opts.sort {
            if let Some(last) = events.last() {
                if timestamp < last.timestamp {
                    return Err(Error::parse(
                        path,
                        ln,
                        format!(
                            "timestamp {timestamp} for user {} precedes {}; pass the sort option",
                            f[0], last.timestamp
                        ),
                    ));
                }
            }
        }
        events.push(Event {
            item_id: f[1].to_string(),
            action,
            timestamp,
        });
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::invalid(format!(
            "{}: events reference unknown items: {}",
            path.display(),
            unknown.join(", ")
        )));
    }
    if opts.sort {
        for log in &mut logs {
            log.events.sort_by_key(|e| e.timestamp);
        }
    }
    Ok(logs)
}

pub fn write_interactions(path: &Path, logs: &[InteractionLog], actions: &ActionVocab) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for log in logs {
        for e in &log.events {
            writeln!(
                f,
                "{}\t{}\t{}\t{}",
                log.user_id,
                e.item_id,
                actions.name(e.action),
                e.timestamp
            )?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Positive-action probability for each (user group, item cluster) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRule {
    pub probs: Vec<Vec<f64>>,
}

impl ActionRule {
    /// Same probability table for every user group: `per_cluster[c]` for
    /// items of cluster `c`.
    pub fn by_cluster(per_cluster: &[f64]) -> Self {
        ActionRule {
            probs: vec![per_cluster.to_vec(); per_cluster.len()],
        }
    }

    /// Group `g` favours clusters `g .. g+span` (cyclic) with probability
    /// `high`; everything else gets `low`.
    pub fn banded(clusters: usize, span: usize, high: f64, low: f64) -> Self {
        let probs = (0..clusters)
            .map(|g| {
                (0..clusters)
                    .map(|c| {
                        if (c + clusters - g) % clusters < span {
                            high
                        } else {
                            low
                        }
                    })
                    .collect()
            })
            .collect();
        ActionRule { probs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub dims: Vec<usize>,
    pub cluster_count: usize,
    pub noise_scale: f64,
    /// Inclusive range of events per user.
    pub min_events: usize,
    pub max_events: usize,
    pub action_rule: ActionRule,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_items: 500,
            n_users: 2000,
            dims: vec![16, 24, 32],
            cluster_count: 4,
            noise_scale: 0.3,
            min_events: 6,
            max_events: 16,
            action_rule: ActionRule::by_cluster(&[0.95, 0.8, 0.2, 0.05]),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn n_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_count < 2 {
            return Err(Error::config("cluster_count must be at least 2"));
        }
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::config("need >= 2 modalities with positive dims"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale must be finite and >= 0"));
        }
        if self.min_events > self.max_events {
            return Err(Error::config("min_events exceeds max_events"));
        }
        if self.max_events > self.n_items {
            return Err(Error::config("max_events exceeds n_items"));
        }
        let rule = &self.action_rule.probs;
        if rule.len() != self.cluster_count || rule.iter().any(|r| r.len() != self.cluster_count) {
            return Err(Error::config("action_rule must be cluster_count x cluster_count"));
        }
        if rule.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("action_rule probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedLabels {
    pub item_cluster: Vec<usize>,
    pub user_group: Vec<usize>,
    /// `centroids[cluster][modality]`, unit norm.
    pub centroids: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub items: Corpus,
    pub users: Corpus,
    pub logs: Vec<InteractionLog>,
    pub actions: ActionVocab,
    pub labels: PlantedLabels,
}

/// Action names of the synthetic vocabulary; index 1 is the positive action.
pub const SYNTH_ACTIONS: [&str; 2] = ["skip", "click"];
pub const SYNTH_POSITIVE_ACTION: usize = 1;

/// Items come from `cluster_count` latent clusters with one random centroid
/// per (cluster, modality). A user belongs to a group `g` and carries the
/// centroids of cluster `g` as profile vectors; each event's action is
/// positive with probability `action_rule[g][cluster(item)]`.
pub fn synth_corpus(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stage_rng(spec.seed, "synth");
    let n_mod = spec.n_modalities();

    let centroids: Vec<Vec<Vec<f64>>> = (0..spec.cluster_count)
        .map(|_| spec.dims.iter().map(|&d| unit_gaussian(d, &mut rng)).collect())
        .collect();

    let noisy = |c: &[f64], rng: &mut crate::rng::StageRng| -> Vec<f64> {
        let mut v: Vec<f64> = c
            .iter()
            .map(|x| {
                let e: f64 = StandardNormal.sample(rng);
                x + spec.noise_scale * e
            })
            .collect();
        let n = norm(&v);
        for x in &mut v {
            *x /= n;
        }
        v
    };

    let mut item_cluster = Vec::with_capacity(spec.n_items);
    let mut items = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let c = rng.random_range(0..spec.cluster_count);
        item_cluster.push(c);
        let vectors = (0..n_mod).map(|j| noisy(&centroids[c][j], &mut rng)).collect();
        items.push(RawItemRecord {
            item_id: format!("i{i}"),
            vectors,
        });
    }

    let mut user_group = Vec::with_capacity(spec.n_users);
    let mut users = Vec::with_capacity(spec.n_users);
    let mut logs = Vec::with_capacity(spec.n_users);
    let mut pool: Vec<usize> = (0..spec.n_items).collect();
    for u in 0..spec.n_users {
        let g = rng.random_range(0..spec.cluster_count);
        user_group.push(g);
        let vectors = (0..n_mod).map(|j| noisy(&centroids[g][j], &mut rng)).collect();
        let user_id = format!("u{u}");
        users.push(RawItemRecord {
            item_id: user_id.clone(),
            vectors,
        });
        let n_events = rng.random_range(spec.min_events..=spec.max_events);
        let (chosen, _) = pool.partial_shuffle(&mut rng, n_events);
        let mut ts: i64 = 1_700_000_000 + rng.random_range(0..86_400);
        let mut events = Vec::with_capacity(n_events);
        for &it in chosen.iter() {
            ts += rng.random_range(1..3_600);
            let p = spec.action_rule.probs[g][item_cluster[it]];
            let positive = rng.random_bool(p);
            events.push(Event {
                item_id: format!("i{it}"),
                action: if positive { SYNTH_POSITIVE_ACTION } else { 0 },
                timestamp: ts,
            });
        }
        logs.push(InteractionLog { user_id, events });
    }

    Ok(SyntheticData {
        items: Corpus::new(spec.dims.clone(), items)?,
        users: Corpus::new(spec.dims.clone(), users)?,
        logs,
        actions: ActionVocab::new(SYNTH_ACTIONS.iter().map(|s| s.to_string()).collect())?,
        labels: PlantedLabels {
            item_cluster,
            user_group,
            centroids,
        },
    })
}

fn unit_gaussian(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
