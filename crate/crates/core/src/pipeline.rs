//! Configuration, stage runners and the run manifest. Every stage reads the
//! artifacts of earlier stages from one run directory, so a stage can be
//! rerun on its own and a full run is just the stages in order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cga::{train_alignment, AlignConfig, ModalEmbeddingSet};
use crate::dmrq::{read_item_tokens, tokenize, train_dmrq, write_item_tokens, CodebookStack, DmrqConfig};
use crate::error::{Error, Result};
use crate::hmat::{Model, ModelConfig};
use crate::ingest::{
    load_embeddings, load_interactions, synth_corpus, write_embeddings, write_interactions, ActionVocab, Corpus,
    EmbeddingFormat, InteractionLog, LoadOptions, RawItemRecord, SyntheticSpec,
};
use crate::seqstream::{build_stream, Interaction, Vocab};
use crate::serve::{bench_serving, prefill, rank_chunked, write_bench_csv, BenchRow, CachePolicy, Workload};
use crate::train_eval::{
    build_histories, evaluate, report, split_holdout, train, write_curve_csv, write_report_csv, EvalReport, Split,
    TrainConfig,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const ITEMS: &str = "items.emb";
pub const USERS: &str = "users.emb";
pub const INTERACTIONS: &str = "interactions.tsv";
pub const ACTIONS: &str = "actions.txt";
pub const ALIGNED_ITEMS: &str = "aligned_items.emb";
pub const ALIGNED_USERS: &str = "aligned_users.emb";
pub const ALIGN_CURVE: &str = "align_curve.csv";
pub const CODEBOOKS: &str = "codebooks.bin";
pub const ITEM_TOKENS: &str = "item_tokens.tsv";
pub const USER_TOKENS: &str = "user_tokens.tsv";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PT_CURVE: &str = "pt_curve.csv";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const SFT_CURVE: &str = "sft_curve.csv";
pub const EVAL_REPORT: &str = "eval.csv";
pub const BENCH_REPORT: &str = "bench.csv";
pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG_COPY: &str = "config.toml";

/// Where raw inputs come from. Unset paths mean "use the run directory",
/// which the `synth` stage fills from `synthetic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub items: Option<PathBuf>,
    pub users: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub actions: Option<PathBuf>,
    /// Action whose probability is the ranking score.
    pub positive_action: String,
    /// Sort out-of-order events instead of rejecting them.
    pub sort_events: bool,
    /// Keep events on items without embeddings (they are dropped at tokenize time).
    pub permissive: bool,
    /// Used by `synth`; its seed is replaced by the root seed.
    pub synthetic: SyntheticSpec,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            items: None,
            users: None,
            interactions: None,
            actions: None,
            positive_action: "click".to_string(),
            sort_events: false,
            permissive: false,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    /// Candidates per one-pass call; longer lists are chunked.
    pub max_candidates: usize,
    pub bench_history: Vec<usize>,
    pub bench_item_len: Vec<usize>,
    pub bench_candidates: usize,
    pub bench_reps: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            max_candidates: 16,
            bench_history: vec![0, 10, 25, 50, 100],
            bench_item_len: vec![6],
            bench_candidates: 16,
            bench_reps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub ingest: IngestConfig,
    pub align: AlignConfig,
    pub dmrq: DmrqConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub serve: ServeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            ingest: IngestConfig::default(),
            align: AlignConfig::default(),
            dmrq: DmrqConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small profile that trains on one CPU core in a few minutes.
    pub fn desk() -> Self {
        PipelineConfig {
            align: AlignConfig {
                d: 32,
                steps: 200,
                ..AlignConfig::default()
            },
            dmrq: DmrqConfig {
                codebook_size: 64,
                epochs: 20,
                batch_size: 64,
                lr: 1e-2,
                ..DmrqConfig::default()
            },
            model: ModelConfig {
                width: 64,
                layers: 2,
                n_q: 4,
                n_kv: 2,
                max_len: 256,
                max_items: 4,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                sft_steps: 2000,
                pt_lr: 1e-3,
                sft_lr: 2e-3,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.span().map_or(0, |s| line_of(&text, s.start)), e.message()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.ingest.synthetic.clone()
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Every violated precondition, in section order. Empty means valid.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<String> {
    let mut v = Vec::new();
    let uses_synth = cfg.ingest.items.is_none();
    let n_mod = uses_synth.then(|| cfg.ingest.synthetic.dims.len());
    if uses_synth {
        if let Err(e) = cfg.ingest.synthetic.validate() {
            v.push(format!("ingest.synthetic: {e}"));
        }
    }
    if cfg.ingest.positive_action.is_empty() {
        v.push("ingest.positive_action must be set".to_string());
    }
    v.extend(cfg.align.violations(n_mod));
    v.extend(cfg.dmrq.violations(cfg.align.d));
    v.extend(cfg.model.violations().into_iter().map(|m| format!("model: {m}")));
    v.extend(cfg.train.violations().into_iter().map(|m| format!("train: {m}")));
    if cfg.serve.max_candidates == 0 {
        v.push("serve.max_candidates must be positive".to_string());
    }
    if let Some(n_mod) = n_mod {
        let l_i = cfg.dmrq.n_shared + n_mod;
        let context = l_i + cfg.model.max_items * (l_i + 2);
        if context > cfg.model.max_len {
            v.push(format!(
                "model.max_len {} cannot hold a profile plus {} items ({context} tokens)",
                cfg.model.max_len, cfg.model.max_items
            ));
        } else if context + cfg.serve.max_candidates * (l_i + 1) > cfg.model.max_len {
            v.push(format!(
                "model.max_len {} cannot hold the context plus {} candidates",
                cfg.model.max_len, cfg.serve.max_candidates
            ));
        }
    }
    v
}

fn input(dir: &Path, set: &Option<PathBuf>, default: &str) -> PathBuf {
    set.clone().unwrap_or_else(|| dir.join(default))
}

fn sets_from_corpus(c: &Corpus) -> Vec<ModalEmbeddingSet> {
    c.records()
        .iter()
        .map(|r| ModalEmbeddingSet {
            item_id: r.item_id.clone(),
            z: r.vectors.clone(),
        })
        .collect()
}

fn corpus_from_sets(sets: &[ModalEmbeddingSet], d: usize) -> Result<Corpus> {
    let n = sets.first().map_or(0, |s| s.z.len());
    let records = sets
        .iter()
        .map(|s| RawItemRecord {
            item_id: s.item_id.clone(),
            vectors: s.z.clone(),
        })
        .collect();
    Corpus::new(vec![d; n], records)
}

pub fn stage_synth(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = synth_corpus(&cfg.synthetic())?;
    let out = [ITEMS, USERS, INTERACTIONS, ACTIONS].map(|f| dir.join(f));
    write_embeddings(&out[0], &data.items, EmbeddingFormat::Binary)?;
    write_embeddings(&out[1], &data.users, EmbeddingFormat::Binary)?;
    write_interactions(&out[2], &data.logs, &data.actions)?;
    data.actions.write(&out[3])?;
    Ok(out.to_vec())
}

pub fn stage_align(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let items = load_embeddings(&input(dir, &cfg.ingest.items, ITEMS))?;
    let users = load_embeddings(&input(dir, &cfg.ingest.users, USERS))?;
    if users.dims() != items.dims() {
        return Err(Error::invalid("user and item embeddings have different modality dims"));
    }
    let out = train_alignment(&items, &cfg.align, cfg.seed)?;
    let users = out.heads.project_corpus(&users)?;
    let paths = [ALIGNED_ITEMS, ALIGNED_USERS, ALIGN_CURVE].map(|f| dir.join(f));
    write_embeddings(&paths[0], &corpus_from_sets(&out.aligned, cfg.align.d)?, EmbeddingFormat::Binary)?;
    write_embeddings(&paths[1], &corpus_from_sets(&users, cfg.align.d)?, EmbeddingFormat::Binary)?;
    let curve: Vec<(usize, f64)> = out.curve.iter().enumerate().map(|(i, &l)| (i + 1, l)).collect();
    write_curve_csv(&paths[2], &curve)?;
    Ok(paths.to_vec())
}

pub fn stage_tokenize(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let items = sets_from_corpus(&load_embeddings(&dir.join(ALIGNED_ITEMS))?);
    let users = sets_from_corpus(&load_embeddings(&dir.join(ALIGNED_USERS))?);
    let out = train_dmrq(&items, &cfg.dmrq, cfg.seed)?;
    let paths = [CODEBOOKS, ITEM_TOKENS, USER_TOKENS].map(|f| dir.join(f));
    out.stack.write(&paths[0])?;
    write_item_tokens(&paths[1], &tokenize(&items, &out.stack)?)?;
    write_item_tokens(&paths[2], &tokenize(&users, &out.stack)?)?;
    Ok(paths.to_vec())
}

/// Tokenized training data shared by the training and evaluation stages.
pub struct Prepared {
    pub vocab: Vocab,
    pub actions: ActionVocab,
    pub positive: usize,
    pub split: Split,
}

fn token_map(path: &Path) -> Result<HashMap<String, Vec<usize>>> {
    Ok(read_item_tokens(path)?.into_iter().collect())
}

fn load_logs(cfg: &PipelineConfig, dir: &Path, path: &Path, items: &HashMap<String, Vec<usize>>) -> Result<(Vec<InteractionLog>, ActionVocab)> {
    let actions = ActionVocab::load(&input(dir, &cfg.ingest.actions, ACTIONS))?;
    let known = items.keys().cloned().collect();
    let opts = LoadOptions {
        sort: cfg.ingest.sort_events,
        permissive: cfg.ingest.permissive,
    };
    let mut logs = load_interactions(path, &known, &actions, opts)?;
    for log in &mut logs {
        log.events.retain(|e| items.contains_key(&e.item_id));
    }
    Ok((logs, actions))
}

fn positive_id(cfg: &PipelineConfig, actions: &ActionVocab) -> Result<usize> {
    actions
        .id(&cfg.ingest.positive_action)
        .ok_or_else(|| Error::config(format!("positive action `{}` not in the action vocabulary", cfg.ingest.positive_action)))
}

pub fn prepare(cfg: &PipelineConfig, dir: &Path) -> Result<Prepared> {
    let stack = CodebookStack::load(&dir.join(CODEBOOKS))?;
    let items = token_map(&dir.join(ITEM_TOKENS))?;
    let users = token_map(&dir.join(USER_TOKENS))?;
    let (logs, actions) = load_logs(cfg, dir, &input(dir, &cfg.ingest.interactions, INTERACTIONS), &items)?;
    let positive = positive_id(cfg, &actions)?;
    let vocab = Vocab::new(stack.codebook_sizes(), actions.len())?;
    let histories = build_histories(&logs, &items, &users)?;
    let split = split_holdout(&histories, cfg.train.holdout, positive, cfg.model.max_items, &vocab)?;
    Ok(Prepared {
        vocab,
        actions,
        positive,
        split,
    })
}

fn ckpt_dir(dir: &Path) -> Result<PathBuf> {
    let d = dir.join("checkpoints");
    fs::create_dir_all(&d)?;
    Ok(d)
}

/// Next-token pre-training. Returns `None` when `pt_steps` is 0.
pub fn stage_pretrain(cfg: &PipelineConfig, dir: &Path) -> Result<Option<Vec<PathBuf>>> {
    if cfg.train.pt_steps == 0 {
        return Ok(None);
    }
    let data = prepare(cfg, dir)?;
    let model = Model::new(&cfg.model, &data.vocab, cfg.seed)?;
    let tc = TrainConfig {
        sft_steps: 0,
        ..cfg.train.clone()
    };
    let out = train(&model, &data.split.train, &tc, cfg.seed, Some(&ckpt_dir(dir)?))?;
    let paths = [PRETRAIN_CKPT, PT_CURVE].map(|f| dir.join(f));
    out.model.write_checkpoint(&paths[0])?;
    write_curve_csv(&paths[1], &out.pt_curve)?;
    let mut all = paths.to_vec();
    all.extend(out.checkpoints);
    Ok(Some(all))
}

/// Fine-tunes the pre-trained checkpoint when `pt_steps > 0`, otherwise a
/// fresh model. With 0 steps the written model is the initial one.
pub fn stage_sft(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let data = prepare(cfg, dir)?;
    let model = if cfg.train.pt_steps > 0 {
        let m = Model::load_checkpoint(&dir.join(PRETRAIN_CKPT))?;
        if m.vocab() != &data.vocab {
            return Err(Error::invalid("pre-trained checkpoint was built for another vocabulary"));
        }
        m
    } else {
        Model::new(&cfg.model, &data.vocab, cfg.seed)?
    };
    let tc = TrainConfig {
        pt_steps: 0,
        ..cfg.train.clone()
    };
    let out = train(&model, &data.split.train, &tc, cfg.seed, Some(&ckpt_dir(dir)?))?;
    let paths = [MODEL_CKPT, SFT_CURVE].map(|f| dir.join(f));
    out.model.write_checkpoint(&paths[0])?;
    write_curve_csv(&paths[1], &out.sft_curve)?;
    let mut all = paths.to_vec();
    all.extend(out.checkpoints);
    Ok(all)
}

pub fn stage_eval(cfg: &PipelineConfig, dir: &Path) -> Result<(EvalReport, Vec<PathBuf>)> {
    let data = prepare(cfg, dir)?;
    let model = Model::load_checkpoint(&dir.join(MODEL_CKPT))?;
    let records = evaluate(&model, &data.split.eval, data.positive, cfg.serve.max_candidates)?;
    let r = report(&data.split.eval, &records)?;
    let path = dir.join(EVAL_REPORT);
    write_report_csv(&path, &r)?;
    Ok((r, vec![path]))
}

pub fn stage_bench(cfg: &PipelineConfig, dir: &Path) -> Result<(Vec<BenchRow>, PathBuf)> {
    let workloads: Vec<Workload> = cfg
        .serve
        .bench_item_len
        .iter()
        .flat_map(|&l_i| {
            cfg.serve.bench_history.iter().map(move |&k| Workload {
                k,
                l_i,
                candidates: cfg.serve.bench_candidates,
            })
        })
        .collect();
    let rows = bench_serving(&cfg.model, &workloads, cfg.seed, cfg.serve.bench_reps)?;
    let path = dir.join(BENCH_REPORT);
    write_bench_csv(&path, &rows)?;
    Ok((rows, path))
}

/// Ranks `candidates` for one user with the trained model. `history` holds
/// that user's events; the profile comes from the user tokens if present.
pub fn score_candidates(cfg: &PipelineConfig, dir: &Path, history: &Path, candidates: &[String]) -> Result<Vec<(String, f64)>> {
    let model = Model::load_checkpoint(&dir.join(MODEL_CKPT))?;
    let items = token_map(&dir.join(ITEM_TOKENS))?;
    let users = token_map(&dir.join(USER_TOKENS))?;
    let (logs, _) = load_logs(cfg, dir, history, &items)?;
    if logs.len() > 1 {
        return Err(Error::invalid(format!("history file holds {} users, expected one", logs.len())));
    }
    let actions = ActionVocab::load(&input(dir, &cfg.ingest.actions, ACTIONS))?;
    let positive = positive_id(cfg, &actions)?;
    let (profile, past) = match logs.first() {
        Some(log) => (
            users.get(&log.user_id).cloned().unwrap_or_default(),
            log.events
                .iter()
                .map(|e| Interaction {
                    codes: items[&e.item_id].clone(),
                    action: e.action,
                })
                .collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    let cand_codes = candidates
        .iter()
        .map(|c| items.get(c).cloned().ok_or_else(|| Error::invalid(format!("candidate {c} has no tokens"))))
        .collect::<Result<Vec<_>>>()?;
    let stream = build_stream(&profile, &past, model.vocab())?.truncate(cfg.model.max_items - 1);
    let (cache, _) = prefill(&model, stream.tokens(), CachePolicy::ANCHOR)?;
    let scores = rank_chunked(&model, &cache, &cand_codes, positive, cfg.serve.max_candidates)?;
    let mut out: Vec<(String, f64)> = candidates.iter().cloned().zip(scores).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory when inside it.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: Artifact,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.span().map_or(0, |s| line_of(&text, s.start)), e.message()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, toml::to_string(self).expect("manifest serializes"))?;
        Ok(())
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &Artifact> {
        std::iter::once(&self.config).chain(self.stages.iter().flat_map(|s| &s.artifacts))
    }

    /// Artifacts whose current hash differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for a in self.artifacts() {
            let p = dir.join(&a.path);
            if !p.exists() || file_sha256(&p)? != a.sha256 {
                bad.push(a.path.clone());
            }
        }
        Ok(bad)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn artifact(dir: &Path, path: &Path) -> Result<Artifact> {
    let shown = path.strip_prefix(dir).unwrap_or(path);
    Ok(Artifact {
        path: shown.to_string_lossy().replace('\\', "/"),
        sha256: file_sha256(path)?,
    })
}

/// Runs synth (when inputs are not given), align, tokenize, pretrain, sft
/// and eval into `dir`, rewriting `manifest.toml` after every stage. On
/// failure the manifest records the failing stage and the error carries its
/// name.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path) -> Result<RunManifest> {
    let problems = validate_config(cfg);
    if !problems.is_empty() {
        return Err(Error::config(problems.join("; ")));
    }
    fs::create_dir_all(dir)?;
    let cfg_path = dir.join(CONFIG_COPY);
    fs::write(&cfg_path, cfg.to_toml())?;
    let mut manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config_sha256: cfg.sha256(),
        seed: cfg.seed,
        config: artifact(dir, &cfg_path)?,
        stages: Vec::new(),
    };
    type Stage = fn(&PipelineConfig, &Path) -> Result<Option<Vec<PathBuf>>>;
    let mut stages: Vec<(&'static str, Stage)> = Vec::new();
    if cfg.ingest.items.is_none() {
        stages.push(("synth", |c, d| stage_synth(c, d).map(Some)));
    }
    stages.push(("align", |c, d| stage_align(c, d).map(Some)));
    stages.push(("tokenize", |c, d| stage_tokenize(c, d).map(Some)));
    stages.push(("pretrain", stage_pretrain));
    stages.push(("sft", |c, d| stage_sft(c, d).map(Some)));
    stages.push(("eval", |c, d| stage_eval(c, d).map(|(_, p)| Some(p))));
    let manifest_path = dir.join(MANIFEST);
    for (name, run) in stages {
        let rec = match run(cfg, dir) {
            Ok(Some(paths)) => StageRecord {
                name: name.to_string(),
                status: StageStatus::Done,
                error: None,
                artifacts: paths.iter().map(|p| artifact(dir, p)).collect::<Result<_>>()?,
            },
            Ok(None) => StageRecord {
                name: name.to_string(),
                status: StageStatus::Skipped,
                error: None,
                artifacts: Vec::new(),
            },
            Err(e) => {
                manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    status: StageStatus::Failed,
                    error: Some(e.to_string()),
                    artifacts: Vec::new(),
                });
                manifest.write(&manifest_path)?;
                return Err(Error::Stage {
                    stage: name,
                    source: Box::new(e),
                });
            }
        };
        manifest.stages.push(rec);
        manifest.write(&manifest_path)?;
    }
    Ok(manifest)
}
