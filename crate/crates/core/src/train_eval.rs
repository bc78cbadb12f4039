//! Pre-training (next token, plain causal) and fine-tuning (action tokens,
//! anchor mask) of the decoder, plus ranking metrics.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads};
use crate::error::{Error, Result};
use crate::hmat::{AttnMask, MaskKind, Model};
use crate::optim::Adam;
use crate::rng::stage_rng;
use crate::seqstream::{build_stream, Coord, Interaction, SemanticToken, TokenKind, TokenStream, Vocab, PAD_ID};
use crate::serve::{prefill, rank_chunked, CachePolicy};

/// Users with fewer interactions than this count as cold-start.
pub const COLD_START_THRESHOLD: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    Pretrain,
    Finetune,
}

/// Right-padded batch. Position `j` is supervised when `loss_mask[r][j]`;
/// its prediction comes from position `j - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub mode: BatchMode,
    pub ids: Vec<Vec<u32>>,
    pub m: Vec<Vec<u32>>,
    pub n: Vec<Vec<u32>>,
    pub kinds: Vec<Vec<Option<TokenKind>>>,
    pub loss_mask: Vec<Vec<bool>>,
    pub valid: Vec<Vec<bool>>,
}

impl TrainBatch {
    pub fn new(streams: &[&TokenStream], mode: BatchMode) -> Self {
        let width = streams.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut b = TrainBatch {
            mode,
            ids: Vec::new(),
            m: Vec::new(),
            n: Vec::new(),
            kinds: Vec::new(),
            loss_mask: Vec::new(),
            valid: Vec::new(),
        };
        for s in streams {
            let pad = width - s.len();
            let t = s.tokens();
            b.ids.push(t.iter().map(|t| t.vocab_id).chain(std::iter::repeat_n(PAD_ID, pad)).collect());
            b.m.push(t.iter().map(|t| t.coord.m).chain(std::iter::repeat_n(0, pad)).collect());
            b.n.push(t.iter().map(|t| t.coord.n).chain(std::iter::repeat_n(0, pad)).collect());
            b.kinds.push(t.iter().map(|t| Some(t.kind)).chain(std::iter::repeat_n(None, pad)).collect());
            b.valid.push((0..width).map(|j| j < s.len()).collect());
            b.loss_mask.push(
                (0..width)
                    .map(|j| {
                        j < s.len()
                            && match mode {
                                BatchMode::Pretrain => j > 0,
                                BatchMode::Finetune => t[j].kind == TokenKind::Action,
                            }
                    })
                    .collect(),
            );
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().flatten().filter(|&&x| x).count()
    }

    fn tokens(&self, r: usize) -> Vec<SemanticToken> {
        (0..self.ids[r].len())
            .filter(|&j| self.valid[r][j])
            .map(|j| SemanticToken {
                vocab_id: self.ids[r][j],
                kind: self.kinds[r][j].expect("valid positions carry a kind"),
                coord: Coord::new(self.m[r][j], self.n[r][j]),
            })
            .collect()
    }
}

fn batch_loss(model: &Model, batch: &TrainBatch, want_grads: bool) -> Result<(f64, Option<ParamGrads>)> {
    let total = batch.supervised();
    if total == 0 {
        return Err(Error::invalid("batch has no supervised positions"));
    }
    let actions = model.vocab().action_range();
    let mask_kind = match batch.mode {
        BatchMode::Pretrain => MaskKind::Causal,
        BatchMode::Finetune => MaskKind::MemoryAnchor,
    };
    let mut grads = want_grads.then(|| ParamGrads::zeros_like(model.store()));
    let mut loss = 0.0;
    for r in 0..batch.rows() {
        let sup: Vec<usize> = (0..batch.ids[r].len()).filter(|&j| batch.loss_mask[r][j]).collect();
        if sup.is_empty() {
            continue;
        }
        let tokens = batch.tokens(r);
        let ids: Vec<u32> = tokens.iter().map(|t| t.vocab_id).collect();
        let coords: Vec<Coord> = tokens.iter().map(|t| t.coord).collect();
        let mask = AttnMask::build(&tokens, mask_kind);
        let mut g = Graph::with_params(model.store());
        let h = model.hidden_on_tape(&mut g, &ids, &coords, &mask)?;
        let prev: Vec<usize> = sup.iter().map(|&j| j - 1).collect();
        let h = g.select_rows(h, &prev);
        let head = g.param(model.head_id());
        let (logits, targets) = match batch.mode {
            BatchMode::Pretrain => {
                let l = g.matmul(h, head);
                (l, sup.iter().map(|&j| Some(ids[j] as usize)).collect::<Vec<_>>())
            }
            BatchMode::Finetune => {
                let head = g.slice_cols(head, actions.start as usize, actions.end as usize);
                let l = g.matmul(h, head);
                let t = sup.iter().map(|&j| Some((ids[j] - actions.start) as usize)).collect();
                (l, t)
            }
        };
        let ce = g.cross_entropy(logits, &targets);
        let w = sup.len() as f64 / total as f64;
        loss += w * g.scalar(ce);
        if let Some(grads) = grads.as_mut() {
            g.backward(ce).accumulate(&g, grads, w);
        }
    }
    Ok((loss, grads))
}

fn expect_mode(batch: &TrainBatch, mode: BatchMode) -> Result<()> {
    if batch.mode != mode {
        return Err(Error::invalid(format!("batch built for {:?}, expected {mode:?}", batch.mode)));
    }
    Ok(())
}

/// Mean next-token NLL over the whole vocabulary, causal attention.
pub fn pt_loss(model: &Model, batch: &TrainBatch) -> Result<f64> {
    expect_mode(batch, BatchMode::Pretrain)?;
    Ok(batch_loss(model, batch, false)?.0)
}

pub fn pt_loss_with_grads(model: &Model, batch: &TrainBatch) -> Result<(f64, ParamGrads)> {
    expect_mode(batch, BatchMode::Pretrain)?;
    let (l, g) = batch_loss(model, batch, true)?;
    Ok((l, g.expect("gradients requested")))
}

/// Mean NLL of the observed action over the action ids only, anchor mask.
pub fn sft_loss(model: &Model, batch: &TrainBatch) -> Result<f64> {
    expect_mode(batch, BatchMode::Finetune)?;
    Ok(batch_loss(model, batch, false)?.0)
}

pub fn sft_loss_with_grads(model: &Model, batch: &TrainBatch) -> Result<(f64, ParamGrads)> {
    expect_mode(batch, BatchMode::Finetune)?;
    let (l, g) = batch_loss(model, batch, true)?;
    Ok((l, g.expect("gradients requested")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pt_steps: usize,
    pub sft_steps: usize,
    pub pt_lr: f64,
    pub sft_lr: f64,
    pub batch_size: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Checkpoint interval in steps; 0 writes none.
    pub checkpoint_every: usize,
    /// Most recent events per user held out for evaluation.
    pub holdout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pt_steps: 0,
            sft_steps: 2000,
            pt_lr: 2e-4,
            sft_lr: 1e-4,
            batch_size: 16,
            clip_norm: 1.0,
            checkpoint_every: 0,
            holdout: 2,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.pt_lr >= 0.0 && self.sft_lr >= 0.0) {
            v.push("learning rates must be >= 0".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".to_string());
        }
        if !(self.clip_norm >= 0.0) {
            v.push("clip_norm must be >= 0".to_string());
        }
        if self.holdout == 0 {
            v.push("holdout must be at least 1".to_string());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub pt_curve: Vec<(usize, f64)>,
    pub sft_curve: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

struct Phase {
    name: &'static str,
    mode: BatchMode,
    steps: usize,
    lr: f64,
}

/// Pre-training steps, then fine-tuning steps, on `streams`. Checkpoints
/// and the divergence dump go to `out_dir` when given.
pub fn train(model: &Model, streams: &[TokenStream], cfg: &TrainConfig, seed: u64, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    let mut model = model.clone();
    let mut out = TrainOutcome {
        model: model.clone(),
        pt_curve: Vec::new(),
        sft_curve: Vec::new(),
        checkpoints: Vec::new(),
    };
    let phases = [
        Phase {
            name: "pretrain",
            mode: BatchMode::Pretrain,
            steps: cfg.pt_steps,
            lr: cfg.pt_lr,
        },
        Phase {
            name: "sft",
            mode: BatchMode::Finetune,
            steps: cfg.sft_steps,
            lr: cfg.sft_lr,
        },
    ];
    for phase in phases {
        if phase.steps == 0 {
            continue;
        }
        let pool: Vec<&TokenStream> = streams
            .iter()
            .filter(|s| match phase.mode {
                BatchMode::Pretrain => s.len() > 1,
                BatchMode::Finetune => !s.action_positions().is_empty(),
            })
            .collect();
        if pool.is_empty() {
            return Err(Error::invalid(format!("no usable streams for {}", phase.name)));
        }
        let mut rng = stage_rng(seed, phase.name);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut cursor = pool.len();
        let bsz = cfg.batch_size.min(pool.len());
        let mut opt = Adam::new(model.store(), phase.lr);
        for step in 1..=phase.steps {
            if cursor + bsz > pool.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let picked: Vec<&TokenStream> = order[cursor..cursor + bsz].iter().map(|&i| pool[i]).collect();
            cursor += bsz;
            let batch = TrainBatch::new(&picked, phase.mode);
            let (loss, mut grads) = batch_loss(&model, &batch, true)?;
            let mut grads = grads.take().expect("gradients requested");
            if !loss.is_finite() || !grads.global_norm().is_finite() {
                if let Some(dir) = out_dir {
                    model.write_checkpoint(&dir.join(format!("{}_diverged_step{step}.ckpt", phase.name)))?;
                }
                return Err(Error::NonFinite { stage: phase.name, step });
            }
            if cfg.clip_norm > 0.0 {
                grads.clip_global_norm(cfg.clip_norm);
            }
            opt.step(model.store_mut(), &grads);
            match phase.mode {
                BatchMode::Pretrain => out.pt_curve.push((step, loss)),
                BatchMode::Finetune => out.sft_curve.push((step, loss)),
            }
            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    let p = dir.join(format!("{}_step{step}.ckpt", phase.name));
                    model.write_checkpoint(&p)?;
                    out.checkpoints.push(p);
                }
            }
        }
    }
    out.model = model;
    Ok(out)
}

pub fn write_curve_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (s, l) in curve {
        writeln!(f, "{s},{l}")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub user_id: String,
    pub score: f64,
    pub label: u8,
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half, via average ranks.
pub fn auc(records: &[EvalRecord]) -> Result<f64> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score for user {}", r.user_id)));
    }
    let pos = records.iter().filter(|r| r.label == 1).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("auc needs both positive and negative records"));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && records[idx[j + 1]].score == records[idx[i]].score {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| records[k].label == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean of per-user AUC over users that have both classes, weighted by
/// record count unless `weighted` is false.
pub fn gauc(records: &[EvalRecord], weighted: bool) -> Result<f64> {
    let mut by_user: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(&r.user_id).or_default().push(r.clone());
    }
    let (mut num, mut den) = (0.0, 0.0);
    for recs in by_user.values() {
        if let Ok(a) = auc(recs) {
            let w = if weighted { recs.len() as f64 } else { 1.0 };
            num += w * a;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::invalid("no user has both positive and negative records"));
    }
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_id: String,
    pub profile: Vec<usize>,
    pub history: Vec<Interaction>,
}

/// Joins interaction logs with item and user codes.
pub fn build_histories(
    logs: &[crate::ingest::InteractionLog],
    item_codes: &HashMap<String, Vec<usize>>,
    user_codes: &HashMap<String, Vec<usize>>,
) -> Result<Vec<UserHistory>> {
    logs.iter()
        .map(|log| {
            let history = log
                .events
                .iter()
                .map(|e| {
                    let codes = item_codes
                        .get(&e.item_id)
                        .ok_or_else(|| Error::invalid(format!("no codes for item {}", e.item_id)))?;
                    Ok(Interaction {
                        codes: codes.clone(),
                        action: e.action,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(UserHistory {
                user_id: log.user_id.clone(),
                profile: user_codes.get(&log.user_id).cloned().unwrap_or_default(),
                history,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user_id: String,
    pub context: TokenStream,
    pub candidates: Vec<Vec<usize>>,
    pub labels: Vec<u8>,
    /// All interactions of the user, held-out ones included.
    pub interactions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<TokenStream>,
    pub eval: Vec<EvalCase>,
}

/// Holds out each user's last `holdout` events. Users with no event left
/// for training are skipped. Training history is cut into consecutive
/// windows of `max_items`; the eval context keeps the latest
/// `max_items - 1` items so candidates sit at a trained position.
pub fn split_holdout(users: &[UserHistory], holdout: usize, positive: usize, max_items: usize, vocab: &Vocab) -> Result<Split> {
    if max_items == 0 {
        return Err(Error::config("max_items must be positive"));
    }
    let mut split = Split {
        train: Vec::new(),
        eval: Vec::new(),
    };
    for u in users {
        if u.history.len() <= holdout {
            continue;
        }
        let cut = u.history.len() - holdout;
        let past = &u.history[..cut];
        let first = past.len() % max_items;
        if first > 0 {
            split.train.push(build_stream(&u.profile, &past[..first], vocab)?);
        }
        for w in past[first..].chunks(max_items) {
            split.train.push(build_stream(&u.profile, w, vocab)?);
        }
        split.eval.push(EvalCase {
            user_id: u.user_id.clone(),
            context: build_stream(&u.profile, &past[past.len().saturating_sub(max_items - 1)..], vocab)?,
            candidates: u.history[cut..].iter().map(|i| i.codes.clone()).collect(),
            labels: u.history[cut..].iter().map(|i| u8::from(i.action == positive)).collect(),
            interactions: u.history.len(),
        });
    }
    Ok(split)
}

/// Scores each held-out item with the probability of `positive`.
pub fn evaluate(model: &Model, cases: &[EvalCase], positive: usize, chunk: usize) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for c in cases {
        let (cache, _) = prefill(model, c.context.tokens(), CachePolicy::ANCHOR)?;
        let scores = rank_chunked(model, &cache, &c.candidates, positive, chunk)?;
        out.extend(scores.into_iter().zip(&c.labels).map(|(score, &label)| EvalRecord {
            user_id: c.user_id.clone(),
            score,
            label,
        }));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub auc: f64,
    pub gauc: f64,
    pub gauc_unweighted: f64,
    /// AUC over users below the cold-start threshold, when defined.
    pub cold_auc: Option<f64>,
    pub records: usize,
    pub users: usize,
}

pub fn report(cases: &[EvalCase], records: &[EvalRecord]) -> Result<EvalReport> {
    let cold: std::collections::HashSet<&str> = cases
        .iter()
        .filter(|c| c.interactions < COLD_START_THRESHOLD)
        .map(|c| c.user_id.as_str())
        .collect();
    let cold_recs: Vec<EvalRecord> = records.iter().filter(|r| cold.contains(r.user_id.as_str())).cloned().collect();
    Ok(EvalReport {
        auc: auc(records)?,
        gauc: gauc(records, true)?,
        gauc_unweighted: gauc(records, false)?,
        cold_auc: auc(&cold_recs).ok(),
        records: records.len(),
        users: cases.len(),
    })
}

pub fn write_report_csv(path: &Path, r: &EvalReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "metric,value")?;
    writeln!(f, "auc,{}", r.auc)?;
    writeln!(f, "gauc,{}", r.gauc)?;
    writeln!(f, "gauc_unweighted,{}", r.gauc_unweighted)?;
    if let Some(c) = r.cold_auc {
        writeln!(f, "cold_auc,{c}")?;
    }
    writeln!(f, "records,{}", r.records)?;
    writeln!(f, "users,{}", r.users)?;
    f.flush()?;
    Ok(())
}
