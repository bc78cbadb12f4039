//! Decodes a history with anchor eviction, then scores candidates in one
//! pass and prints the attention-cost comparison.
use hisam::hmat::{random_stream, Model, ModelConfig};
use hisam::rng::stage_rng;
use hisam::seqstream::Vocab;
use hisam::tensor::Matrix;
use hisam::serve::{bench_serving, decode_stream, rank_one_pass, CachePolicy, Workload};

fn main() -> hisam::Result<()> {
    let vocab = Vocab::new(vec![16; 6], 2)?;
    let cfg = ModelConfig {
        width: 32,
        layers: 2,
        n_q: 4,
        n_kv: 2,
        ..ModelConfig::default()
    };
    let mut model = Model::new(&cfg, &vocab, 3)?;
    // the head starts at zero; give it weights so the scores differ
    let head = model.head_id();
    let (rows, cols) = model.store().get(head).shape();
    *model.store_mut().get_mut(head) = Matrix::random_normal(rows, cols, 0.5, &mut stage_rng(3, "head"));
    let history = random_stream(&vocab, true, 20, &mut stage_rng(3, "history"))?;
    let (anchor, _) = decode_stream(&model, &history, CachePolicy::ANCHOR)?;
    let (full, _) = decode_stream(&model, &history, CachePolicy::FULL)?;
    println!("cache entries per layer: anchor {} vs full {}", anchor.len(), full.len());

    let candidates: Vec<Vec<usize>> = (0..4).map(|c| vec![c; 6]).collect();
    let scores = rank_one_pass(&model, &anchor, &candidates, 1)?;
    println!("scores {scores:?}");

    let rows = bench_serving(&cfg, &[Workload { k: 10, l_i: 6, candidates: 8 }, Workload { k: 100, l_i: 6, candidates: 8 }], 3, 1)?;
    for r in rows {
        println!("K={:>3}: anchor keys {} full keys {} history ratio {:.2}", r.k, r.anchor_keys, r.full_keys, r.history_ratio);
    }
    Ok(())
}
