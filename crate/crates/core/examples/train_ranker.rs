//! Fine-tunes a tiny decoder on the synthetic corpus and evaluates ranking
//! quality on held-out events. Uses raw cluster ids as codes to stay fast.
use hisam::hmat::{Model, ModelConfig};
use hisam::ingest::{synth_corpus, SyntheticSpec, SYNTH_POSITIVE_ACTION};
use hisam::seqstream::{Interaction, Vocab};
use hisam::train_eval::{evaluate, report, split_holdout, train, TrainConfig, UserHistory};

fn main() -> hisam::Result<()> {
    let spec = SyntheticSpec {
        n_users: 400,
        ..SyntheticSpec::default()
    };
    let data = synth_corpus(&spec)?;
    let cluster = |id: &str| data.labels.item_cluster[id[1..].parse::<usize>().unwrap()];
    let users: Vec<UserHistory> = data
        .logs
        .iter()
        .enumerate()
        .map(|(u, log)| UserHistory {
            user_id: log.user_id.clone(),
            profile: vec![data.labels.user_group[u], 0],
            history: log
                .events
                .iter()
                .map(|e| Interaction {
                    codes: vec![cluster(&e.item_id), e.item_id[1..].parse::<usize>().unwrap() % 4],
                    action: e.action,
                })
                .collect(),
        })
        .collect();
    let vocab = Vocab::new(vec![4, 4], 2)?;
    let split = split_holdout(&users, 2, SYNTH_POSITIVE_ACTION, 4, &vocab)?;
    let cfg = ModelConfig {
        width: 32,
        layers: 1,
        n_q: 4,
        n_kv: 2,
        ..ModelConfig::default()
    };
    let model = Model::new(&cfg, &vocab, 0)?;
    let tc = TrainConfig {
        sft_steps: 300,
        sft_lr: 3e-3,
        ..TrainConfig::default()
    };
    let out = train(&model, &split.train, &tc, 0, None)?;
    let first = out.sft_curve.first().unwrap().1;
    let last = out.sft_curve.last().unwrap().1;
    println!("sft loss {first:.3} -> {last:.3}");
    let records = evaluate(&out.model, &split.eval, SYNTH_POSITIVE_ACTION, 16)?;
    let r = report(&split.eval, &records)?;
    println!("auc {:.3} gauc {:.3} over {} users", r.auc, r.gauc, r.users);
    Ok(())
}
