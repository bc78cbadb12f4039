//! End-to-end acceptance checks. Each criterion runs on its own, prints one
//! PASS/FAIL line to stderr (visible without --nocapture) and the test
//! fails if any of them failed.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use hisam::cga::{ModalEmbeddingSet, ProjectionHeads, alignment_loss_with_grads};
use hisam::dmrq::{
    dmrq_loss, dmrq_loss_with_grads, layer_modality_similarity, new_estimators, nearest_entry,
    residual_quantize_shared, tokenize, train_dmrq, vclub_estimate, CodebookStack, DmrqConfig, FuseKind,
    LossMode, LossWeights, VariationalEstimator,
};
use hisam::hmat::{build_mask, hrope_score, random_stream, AttnMask, HRopeTables, MaskKind, Model, ModelConfig};
use hisam::ingest::{synth_corpus, SyntheticSpec};
use hisam::pipeline::{self, PipelineConfig};
use hisam::rng::stage_rng;
use hisam::serve::{action_probs, anchor_key_formula, bench_serving, decode_stream, prefill, rank_one_pass, CachePolicy, Workload};
use hisam::seqstream::{segment_tokens, Coord, SemanticToken, TokenKind, TokenStream, Vocab};
use hisam::tensor::Matrix;
use hisam::train_eval::{auc, evaluate, gauc, sft_loss, sft_loss_with_grads, BatchMode, EvalRecord, TrainBatch};

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn say(line: String) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

// 1 -------------------------------------------------------------------------

/// Pairwise cos/sin expansion with the frequencies recomputed from scratch:
/// the first quarter of the pairs turn with m (base 1e4), the rest with n
/// (base 100).
fn expansion(q: &[f64], k: &[f64], cq: Coord, ck: Coord) -> f64 {
    let d = q.len();
    let mut s = 0.0;
    for j in 0..d / 2 {
        let (theta, pq, pk) = if j < d / 4 {
            (1e4f64.powf(-4.0 * j as f64 / d as f64), cq.m, ck.m)
        } else {
            (100f64.powf(-4.0 * (j - d / 4) as f64 / d as f64), cq.n, ck.n)
        };
        let delta = (pk as f64 - pq as f64) * theta;
        let (qa, qb, ka, kb) = (q[2 * j], q[2 * j + 1], k[2 * j], k[2 * j + 1]);
        s += delta.cos() * (qa * ka + qb * kb) + delta.sin() * (qb * ka - qa * kb);
    }
    s
}

fn hrope_matches_expansion() -> Outcome {
    let t0 = Instant::now();
    let mut rng = stage_rng(1, "acc-rope");
    for d in [4, 8, 64] {
        let tables = HRopeTables::new(d, 1e4, 100.0).map_err(|e| e.to_string())?;
        let score = |q: &[f64], k: &[f64], a: Coord, b: Coord| hrope_score(q, k, a, b, &tables).unwrap();
        for _ in 0..1000 {
            let q = rand_vec(d, &mut rng);
            let k = rand_vec(d, &mut rng);
            let cq = Coord::new(rng.random_range(0..1000), rng.random_range(0..17));
            let ck = Coord::new(rng.random_range(0..1000), rng.random_range(0..17));
            let got = score(&q, &k, cq, ck);
            let want = expansion(&q, &k, cq, ck);
            ensure!((got - want).abs() <= 1e-6, "d {d}: {got} vs oracle {want} at {cq:?} {ck:?}");
            let sm = rng.random_range(0..500);
            let sn = rng.random_range(0..50);
            let moved_m = score(&q, &k, Coord::new(cq.m + sm, cq.n), Coord::new(ck.m + sm, ck.n));
            let moved_n = score(&q, &k, Coord::new(cq.m, cq.n + sn), Coord::new(ck.m, ck.n + sn));
            ensure!((moved_m - got).abs() <= 1e-5, "d {d}: shift m by {sm} moved the score by {}", moved_m - got);
            ensure!((moved_n - got).abs() <= 1e-5, "d {d}: shift n by {sn} moved the score by {}", moved_n - got);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2}s");
    Ok(())
}

// 2 -------------------------------------------------------------------------

fn hrope_halves_are_decoupled() -> Outcome {
    let mut rng = stage_rng(2, "acc-decouple");
    for d in [4, 8, 64] {
        let tables = HRopeTables::new(d, 1e4, 100.0).map_err(|e| e.to_string())?;
        for _ in 0..50 {
            let (mut q, mut k) = (rand_vec(d, &mut rng), rand_vec(d, &mut rng));
            q[d / 2..].fill(0.0);
            k[d / 2..].fill(0.0);
            let (mq, mk) = (rng.random_range(0..1000), rng.random_range(0..1000));
            let base = hrope_score(&q, &k, Coord::new(mq, 0), Coord::new(mk, 0), &tables).unwrap();
            for nq in 0..=16 {
                for nk in 0..=16 {
                    let s = hrope_score(&q, &k, Coord::new(mq, nq), Coord::new(mk, nk), &tables).unwrap();
                    ensure!((s - base).abs() <= 1e-7, "d {d}: n ({nq}, {nk}) moved an inter-only score by {}", s - base);
                }
            }

            let (mut q, mut k) = (rand_vec(d, &mut rng), rand_vec(d, &mut rng));
            q[..d / 2].fill(0.0);
            k[..d / 2].fill(0.0);
            let (nq, nk) = (rng.random_range(0..17), rng.random_range(0..17));
            let base = hrope_score(&q, &k, Coord::new(0, nq), Coord::new(0, nk), &tables).unwrap();
            for mq in (0..=1000).step_by(40) {
                for mk in (0..=1000).step_by(40) {
                    let s = hrope_score(&q, &k, Coord::new(mq, nq), Coord::new(mk, nk), &tables).unwrap();
                    ensure!((s - base).abs() <= 1e-7, "d {d}: m ({mq}, {mk}) moved an intra-only score by {}", s - base);
                }
            }
        }
    }
    Ok(())
}

// 3 -------------------------------------------------------------------------

fn predicted_keys(tokens: &[SemanticToken], q: usize) -> Vec<u32> {
    let mq = tokens[q].coord.m;
    (0..=q)
        .filter(|&k| {
            let t = &tokens[k];
            t.coord.m == 0 || t.coord.m == mq || (t.coord.m < mq && t.kind == TokenKind::Anchor)
        })
        .map(|k| k as u32)
        .collect()
}

fn anchor_mask_matches_closed_form() -> Outcome {
    let mut rng = stage_rng(3, "acc-mask");
    for s in 0..200 {
        let l_i = rng.random_range(1..=6);
        let vocab = Vocab::new(vec![7; l_i], 3).unwrap();
        let k = rng.random_range(0..=15);
        let stream = random_stream(&vocab, s % 3 != 0, k, &mut rng).unwrap();
        let mask = build_mask(&stream);
        ensure!(mask.len() == stream.len(), "stream {s}: mask has {} rows for {} tokens", mask.len(), stream.len());
        for q in 0..stream.len() {
            let want = predicted_keys(stream.tokens(), q);
            ensure!(mask.visible(q) == want.as_slice(), "stream {s} query {q}: {:?} vs {want:?}", mask.visible(q));
        }
    }
    Ok(())
}

// 4, 5 ----------------------------------------------------------------------

fn serving_model(l_i: usize, seed: u64) -> Model {
    let vocab = Vocab::new(vec![8; l_i], 2).unwrap();
    let cfg = ModelConfig {
        width: 64,
        layers: 2,
        n_q: 4,
        n_kv: 2,
        max_len: 512,
        init_std: 0.2,
        ..ModelConfig::default()
    };
    let mut m = Model::new(&cfg, &vocab, seed).unwrap();
    // the head starts at zero, which would make every logit equal
    let id = m.head_id();
    let (r, c) = m.store().get(id).shape();
    *m.store_mut().get_mut(id) = Matrix::random_normal(r, c, 0.5, &mut stage_rng(seed, "acc-head"));
    m
}

fn eviction_is_lossless() -> Outcome {
    let model = serving_model(6, 4);
    let vocab = model.vocab().clone();
    let mut rng = stage_rng(4, "acc-evict");
    let mut worst: f64 = 0.0;
    for s in 0..50 {
        let k = rng.random_range(1..=20);
        let stream = random_stream(&vocab, s % 5 != 0, k, &mut rng).unwrap();
        let dense = model.forward_stream(&stream, MaskKind::MemoryAnchor).unwrap();
        let (cache, logits) = decode_stream(&model, &stream, CachePolicy::ANCHOR).unwrap();
        for &p in stream.anchor_positions() {
            let diff = dense.row(p).iter().zip(logits.row(p)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
        }
        for l in 0..model.config().layers {
            let n = cache.entries(l).len();
            ensure!(n == stream.profile_len() + k, "stream {s} layer {l}: {n} entries, want {}", stream.profile_len() + k);
        }
    }
    ensure!(worst <= 1e-5, "largest logit gap at an action position {worst:e}");
    Ok(())
}

/// Dense pass over the history plus one pending candidate segment.
fn dense_candidate_score(model: &Model, history: &TokenStream, cand: &[usize], action: usize) -> f64 {
    let vocab = model.vocab();
    let mut tokens = history.tokens().to_vec();
    tokens.extend(segment_tokens(cand, history.item_count() as u32 + 1, None, vocab).unwrap());
    let mask = AttnMask::build(&tokens, MaskKind::MemoryAnchor);
    let ids: Vec<u32> = tokens.iter().map(|t| t.vocab_id).collect();
    let coords: Vec<Coord> = tokens.iter().map(|t| t.coord).collect();
    let logits = model.forward(&ids, &coords, &mask).unwrap();
    let r = vocab.action_range();
    action_probs(&logits.row(tokens.len() - 1)[r.start as usize..r.end as usize])[action]
}

fn one_pass_ranking_matches_sequential() -> Outcome {
    let model = serving_model(4, 5);
    let vocab = model.vocab().clone();
    let mut rng = stage_rng(5, "acc-rank");
    for trial in 0..12 {
        let k_hist = rng.random_range(0..=8);
        let history = random_stream(&vocab, trial % 4 != 0, k_hist, &mut rng).unwrap();
        let (cache, _) = prefill(&model, history.tokens(), CachePolicy::ANCHOR).unwrap();
        let n = rng.random_range(1..=16);
        let cands: Vec<Vec<usize>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(0..8)).collect()).collect();
        let action = trial % 2;
        let batch = rank_one_pass(&model, &cache, &cands, action).unwrap();
        for (i, c) in cands.iter().enumerate() {
            let single = rank_one_pass(&model, &cache, std::slice::from_ref(c), action).unwrap()[0];
            let dense = dense_candidate_score(&model, &history, c, action);
            ensure!((batch[i] - single).abs() <= 1e-5, "trial {trial} cand {i}: batch {} single {single}", batch[i]);
            ensure!((batch[i] - dense).abs() <= 1e-5, "trial {trial} cand {i}: batch {} dense {dense}", batch[i]);
        }
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let shuffled: Vec<Vec<usize>> = order.iter().map(|&i| cands[i].clone()).collect();
            let scores = rank_one_pass(&model, &cache, &shuffled, action).unwrap();
            for (pos, &i) in order.iter().enumerate() {
                let dev = (scores[pos] - batch[i]).abs();
                ensure!(dev <= 1e-6, "trial {trial}: reordering moved candidate {i} by {dev:e}");
            }
        }
    }
    Ok(())
}

// 6 -------------------------------------------------------------------------

fn quantizer_oracles() -> Outcome {
    let mut rng = stage_rng(6, "acc-quant");
    for trial in 0..300 {
        let v = rng.random_range(1..=64);
        let d = rng.random_range(1..=12);
        let book = Matrix::random_normal(v, d, 0.5, &mut rng);
        let x = rand_vec(d, &mut rng);
        let dist = |i: usize| (0..d).map(|c| (book[(i, c)] - x[c]).powi(2)).sum::<f64>();
        let mut brute = 0;
        for i in 1..v {
            if dist(i) < dist(brute) {
                brute = i;
            }
        }
        let (got, _) = nearest_entry(&book, &x);
        ensure!(got == brute, "trial {trial}: nearest {got}, exhaustive {brute}");
    }

    for trial in 0..200 {
        let d = 8;
        let layers = rng.random_range(1..=4);
        let v = rng.random_range(2..=32);
        // dyadic values keep every sum exact, so the identity holds bitwise
        let dyadic = |rng: &mut hisam::rng::StageRng| rng.random_range(-64i32..=64) as f64 / 64.0;
        let books: Vec<Matrix> = (0..layers)
            .map(|_| {
                let mut b = Matrix::from_vec(v, d, (0..v * d).map(|_| dyadic(&mut rng)).collect());
                b.row_mut(0).fill(0.0);
                b
            })
            .collect();
        let refs: Vec<&Matrix> = books.iter().collect();
        let f: Vec<f64> = (0..d).map(|_| dyadic(&mut rng)).collect();
        let q = residual_quantize_shared(&f, &refs);
        let sum: Vec<f64> = q.z_hat.iter().zip(q.residual()).map(|(a, b)| a + b).collect();
        ensure!(sum == f, "trial {trial}: z_hat + r = {sum:?} for f = {f:?}");

        // continuous values: replay the same summation order
        let books: Vec<Matrix> = (0..layers)
            .map(|_| {
                let mut b = Matrix::random_normal(v, d, 0.4, &mut rng);
                b.row_mut(v - 1).fill(0.0);
                b
            })
            .collect();
        let refs: Vec<&Matrix> = books.iter().collect();
        let f = rand_vec(d, &mut rng);
        let q = residual_quantize_shared(&f, &refs);
        let mut r = f.clone();
        let mut z = vec![0.0; d];
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        for (l, b) in books.iter().enumerate() {
            let before = sq(&r);
            let e = b.row(q.codes[l]);
            for c in 0..d {
                r[c] -= e[c];
                z[c] += e[c];
            }
            ensure!(r == q.residuals[l], "trial {trial} layer {l}: residual differs from f minus the chosen entries");
            ensure!(sq(&r) <= before, "trial {trial} layer {l}: residual norm grew from {before} to {}", sq(&r));
        }
        ensure!(z == q.z_hat, "trial {trial}: z_hat differs from the ordered sum of entries");
    }
    Ok(())
}

// 7 -------------------------------------------------------------------------

fn vclub_orders_independent_below_copied() -> Outcome {
    let mut rng = stage_rng(0, "acc-club-single");
    let est = VariationalEstimator::new(4, 4, 1e-3, &mut rng);
    let z = Matrix::random_normal(1, 4, 1.0, &mut rng);
    let x = Matrix::random_normal(1, 4, 1.0, &mut rng);
    let one = vclub_estimate(&z, &x, &est);
    ensure!(one == 0.0, "single pair estimate {one}");

    let (mut indep, mut copied) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let mut rng = stage_rng(seed, "acc-club");
        let z = Matrix::random_normal(512, 2, 1.0, &mut rng);
        let x = Matrix::random_normal(512, 2, 1.0, &mut rng);
        let mut a = VariationalEstimator::new(2, 8, 5e-3, &mut rng);
        let mut b = a.clone();
        for _ in 0..200 {
            a.fit_step(&z, &x);
            b.fit_step(&z, &z);
        }
        let z2 = Matrix::random_normal(512, 2, 1.0, &mut rng);
        let x2 = Matrix::random_normal(512, 2, 1.0, &mut rng);
        indep.push(vclub_estimate(&z2, &x2, &a));
        copied.push(vclub_estimate(&z2, &z2, &b));
    }
    let (i, c) = (median(indep.clone()), median(copied.clone()));
    ensure!(i.abs() <= 0.05, "independent median {i} ({indep:?})");
    ensure!(c > i, "copied median {c} not above independent {i}");
    Ok(())
}

// 8 -------------------------------------------------------------------------

fn rel_err(fd: f64, an: f64) -> f64 {
    let scale = fd.abs().max(an.abs());
    if scale < 1e-6 {
        0.0
    } else {
        (fd - an).abs() / scale
    }
}

fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v = rand_vec(d, rng);
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn gradients_match_finite_differences() -> Outcome {
    let t0 = Instant::now();
    let eps = 1e-5;

    let heads = ProjectionHeads::init(&[5, 6, 7], 8, true, 8);
    let mut rng = stage_rng(8, "acc-grad");
    let raw: Vec<Matrix> = [5, 6, 7].iter().map(|&d| Matrix::random_normal(6, d, 1.0, &mut rng)).collect();
    let (_, grads) = alignment_loss_with_grads(&heads, &raw, 0.2, 0, 0).unwrap();
    let mut worst: f64 = 0.0;
    for id in heads.store().ids().collect::<Vec<_>>() {
        for i in 0..heads.store().get(id).len() {
            let mut p = heads.clone();
            p.store_mut().get_mut(id).data_mut()[i] += eps;
            let mut m = heads.clone();
            m.store_mut().get_mut(id).data_mut()[i] -= eps;
            let fd = (alignment_loss_with_grads(&p, &raw, 0.2, 0, 0).unwrap().0
                - alignment_loss_with_grads(&m, &raw, 0.2, 0, 0).unwrap().0)
                / (2.0 * eps);
            worst = worst.max(rel_err(fd, grads.get(id).data()[i]));
        }
    }
    ensure!(worst <= 1e-3, "alignment loss: relative error {worst:e}");

    let (d, n_m) = (8, 2);
    let mut stack = CodebookStack::new(d, n_m, 2, 4, 2, FuseKind::Linear, 8);
    for id in stack.store().ids().collect::<Vec<_>>() {
        let (r, c) = stack.store().get(id).shape();
        let noise = Matrix::random_normal(r, c, 0.3, &mut rng);
        stack.store_mut().get_mut(id).add_assign(&noise);
    }
    let est = new_estimators(d, n_m, &DmrqConfig::default(), 8);
    let batch: Vec<ModalEmbeddingSet> = (0..4)
        .map(|i| ModalEmbeddingSet {
            item_id: format!("i{i}"),
            z: unit_rows(n_m, d, &mut rng),
        })
        .collect();
    let w = LossWeights {
        beta: 1.0,
        lambda: 0.5,
        gamma: 0.25,
    };
    let train_value = dmrq_loss(&batch, &stack, &est, w, LossMode::Training).unwrap();
    let (exact_value, grads) = dmrq_loss_with_grads(&batch, &stack, &est, w, LossMode::Exact).unwrap();
    ensure!(
        (train_value.total - exact_value.total).abs() <= 1e-12,
        "training and exact forms differ in value: {} vs {}",
        train_value.total,
        exact_value.total
    );
    let parts = exact_value.reconstruction + w.beta * (exact_value.vq_shared + exact_value.vq_specific) + w.lambda * exact_value.mi;
    ensure!((parts - exact_value.total).abs() <= 1e-12, "terms sum to {parts}, total {}", exact_value.total);
    let mut worst: f64 = 0.0;
    for id in stack.store().ids().collect::<Vec<_>>() {
        for i in 0..stack.store().get(id).len() {
            let mut p = stack.clone();
            p.store_mut().get_mut(id).data_mut()[i] += eps;
            let mut m = stack.clone();
            m.store_mut().get_mut(id).data_mut()[i] -= eps;
            let fd = (dmrq_loss(&batch, &p, &est, w, LossMode::Exact).unwrap().total
                - dmrq_loss(&batch, &m, &est, w, LossMode::Exact).unwrap().total)
                / (2.0 * eps);
            worst = worst.max(rel_err(fd, grads.get(id).data()[i]));
        }
    }
    ensure!(worst <= 1e-3, "quantizer loss: relative error {worst:e}");

    let vocab = Vocab::new(vec![5; 4], 2).unwrap();
    let cfg = ModelConfig {
        width: 16,
        layers: 2,
        n_q: 4,
        n_kv: 2,
        max_len: 128,
        init_std: 0.2,
        ..ModelConfig::default()
    };
    let mut model = Model::new(&cfg, &vocab, 8).unwrap();
    let head = model.head_id();
    let (r, c) = model.store().get(head).shape();
    *model.store_mut().get_mut(head) = Matrix::random_normal(r, c, 0.5, &mut rng);
    let streams: Vec<TokenStream> = (0..3).map(|i| random_stream(&vocab, i != 1, 1 + i, &mut rng).unwrap()).collect();
    let refs: Vec<&TokenStream> = streams.iter().collect();
    let tb = TrainBatch::new(&refs, BatchMode::Finetune);
    let (_, grads) = sft_loss_with_grads(&model, &tb).unwrap();
    let mut worst: f64 = 0.0;
    for id in model.store().ids().collect::<Vec<_>>() {
        let n = model.store().get(id).len();
        for _ in 0..6 {
            let i = rng.random_range(0..n);
            let mut p = model.clone();
            p.store_mut().get_mut(id).data_mut()[i] += eps;
            let mut m = model.clone();
            m.store_mut().get_mut(id).data_mut()[i] -= eps;
            let fd = (sft_loss(&p, &tb).unwrap() - sft_loss(&m, &tb).unwrap()) / (2.0 * eps);
            worst = worst.max(rel_err(fd, grads.get(id).data()[i]));
        }
    }
    ensure!(worst <= 1e-3, "action loss: relative error {worst:e}");

    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(())
}

// 9 -------------------------------------------------------------------------

/// Whether every specific layer peaks on its own modality.
fn diagonal_holds(seed: u64, lambda: f64) -> (bool, Vec<Vec<f64>>) {
    let spec = SyntheticSpec {
        n_items: 300,
        n_users: 1,
        dims: vec![16, 16, 16],
        min_events: 1,
        max_events: 1,
        seed,
        ..SyntheticSpec::default()
    };
    let sets: Vec<ModalEmbeddingSet> = synth_corpus(&spec)
        .unwrap()
        .items
        .records()
        .iter()
        .map(|r| ModalEmbeddingSet {
            item_id: r.item_id.clone(),
            z: r.vectors.clone(),
        })
        .collect();
    let cfg = DmrqConfig {
        codebook_size: 32,
        epochs: 20,
        batch_size: 64,
        lr: 1e-2,
        lambda,
        ..DmrqConfig::default()
    };
    let out = train_dmrq(&sets, &cfg, seed).unwrap();
    let codes = tokenize(&sets, &out.stack).unwrap();
    let sim = layer_modality_similarity(&sets, &codes, &out.stack);
    let rows: Vec<Vec<f64>> = (0..3).map(|j| sim.row(cfg.n_shared + j).to_vec()).collect();
    let ok = rows
        .iter()
        .enumerate()
        .all(|(j, row)| (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])) == Some(j));
    (ok, rows)
}

fn specific_layers_form_a_diagonal() -> Outcome {
    let mut wins = 0;
    let mut seen = Vec::new();
    for seed in 0..3 {
        let (ok, rows) = diagonal_holds(seed, 0.1);
        wins += ok as usize;
        if !ok {
            seen.push(format!("seed {seed}: {rows:.3?}"));
        }
    }
    let (plain, _) = diagonal_holds(0, 0.0);
    say(format!("     diagonal with the MI term off (seed 0): {plain}"));
    ensure!(wins >= 2, "diagonal held on {wins} of 3 seeds; {}", seen.join("; "));
    Ok(())
}

// 10 ------------------------------------------------------------------------

const SFT_STEPS: usize = 600;
const PT_STEPS: usize = 300;

fn pipeline_learns_the_planted_rule() -> Outcome {
    let (mut base, mut sft, mut both) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = dir.path();
        let mut cfg = PipelineConfig::desk();
        cfg.seed = seed;
        cfg.train.sft_steps = SFT_STEPS;
        let run = |cfg: &PipelineConfig| -> hisam::Result<f64> {
            pipeline::stage_sft(cfg, dir)?;
            Ok(pipeline::stage_eval(cfg, dir)?.0.auc)
        };
        let go = || -> hisam::Result<(f64, f64, f64)> {
            pipeline::stage_synth(&cfg, dir)?;
            pipeline::stage_align(&cfg, dir)?;
            pipeline::stage_tokenize(&cfg, dir)?;
            let data = pipeline::prepare(&cfg, dir)?;
            let fresh = Model::new(&cfg.model, &data.vocab, seed)?;
            let untrained = auc(&evaluate(&fresh, &data.split.eval, data.positive, cfg.serve.max_candidates)?)?;
            let only = run(&cfg)?;
            let mut pt = cfg.clone();
            pt.train.pt_steps = PT_STEPS;
            pipeline::stage_pretrain(&pt, dir)?;
            Ok((untrained, only, run(&pt)?))
        };
        let (u, s, b) = go().map_err(|e| format!("seed {seed}: {e}"))?;
        say(format!("     seed {seed}: untrained {u:.4} sft {s:.4} pt+sft {b:.4}"));
        base.push(u);
        sft.push(s);
        both.push(b);
    }
    for (seed, u) in base.iter().enumerate() {
        ensure!((u - 0.5).abs() <= 0.05, "seed {seed}: untrained AUC {u}");
    }
    for (seed, s) in sft.iter().enumerate() {
        ensure!(*s >= 0.85, "seed {seed}: AUC {s} after {SFT_STEPS} steps");
    }
    let (ms, mb) = (median(sft), median(both));
    ensure!(mb >= ms, "pre-training lowered the median AUC: {mb:.4} vs {ms:.4}");
    Ok(())
}

// 11 ------------------------------------------------------------------------

fn rec(user: &str, score: f64, label: u8) -> EvalRecord {
    EvalRecord {
        user_id: user.to_string(),
        score,
        label,
    }
}

fn pairwise_auc(r: &[EvalRecord]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in r.iter().filter(|r| r.label == 1) {
        for n in r.iter().filter(|r| r.label == 0) {
            den += 1.0;
            if p.score > n.score {
                num += 1.0;
            } else if p.score == n.score {
                num += 0.5;
            }
        }
    }
    num / den
}

fn gauc_fixtures() -> Vec<(Vec<EvalRecord>, Option<f64>)> {
    let f = |rows: &[(&str, f64, u8)]| rows.iter().map(|&(u, s, l)| rec(u, s, l)).collect::<Vec<_>>();
    vec![
        (f(&[("u1", 0.9, 1), ("u1", 0.1, 0), ("u2", 0.2, 1), ("u2", 0.8, 0), ("u2", 0.5, 0)]), Some(0.4)),
        (f(&[("u1", 0.9, 1), ("u1", 0.8, 1), ("u2", 0.7, 1), ("u2", 0.3, 0), ("u2", 0.9, 0)]), Some(0.5)),
        (f(&[("u1", 0.5, 1), ("u1", 0.5, 0), ("u2", 0.9, 1), ("u2", 0.1, 1), ("u2", 0.5, 0)]), Some(0.5)),
        (
            f(&[("u1", 0.9, 1), ("u1", 0.8, 1), ("u1", 0.7, 0), ("u1", 0.85, 0), ("u2", 0.1, 1), ("u2", 0.2, 0)]),
            Some(0.5),
        ),
        (
            f(&[("a", 0.6, 1), ("a", 0.5, 0), ("a", 0.7, 0), ("b", 0.3, 1), ("b", 0.9, 1), ("b", 0.4, 0), ("c", 0.8, 1), ("c", 0.1, 0)]),
            Some(0.625),
        ),
        (f(&[("u1", 0.9, 1), ("u2", 0.1, 0), ("u2", 0.3, 0)]), None),
        (f(&[("u1", 0.4, 1), ("u1", 0.6, 1), ("u1", 0.5, 0), ("u1", 0.5, 0), ("u1", 0.1, 0)]), Some(2.0 / 3.0)),
        (
            f(&[("u1", 0.5, 1), ("u2", 0.2, 1), ("u2", 0.1, 0), ("u3", 0.1, 1), ("u3", 0.2, 0), ("u3", 0.3, 0), ("u3", 0.4, 0)]),
            Some(1.0 / 3.0),
        ),
        (
            f(&[("u1", 0.5, 1), ("u1", 0.5, 0), ("u1", 0.5, 0), ("u2", 0.9, 1), ("u2", 0.8, 1), ("u2", 0.7, 1), ("u2", 0.6, 0)]),
            Some(5.5 / 7.0),
        ),
        (
            f(&[
                ("u1", 0.1, 1),
                ("u1", 0.2, 1),
                ("u1", 0.3, 0),
                ("u2", 0.3, 1),
                ("u2", 0.2, 0),
                ("u2", 0.1, 0),
                ("u2", 0.05, 0),
                ("u3", 0.5, 1),
                ("u3", 0.6, 1),
                ("u3", 0.55, 0),
                ("u3", 0.7, 0),
            ]),
            Some(5.0 / 11.0),
        ),
    ]
}

fn metrics_match_oracles() -> Outcome {
    let mut rng = stage_rng(11, "acc-auc");
    for trial in 0..2000 {
        let n = rng.random_range(2..=100);
        let levels = rng.random_range(1..=20);
        let mut recs: Vec<EvalRecord> = (0..n)
            .map(|_| rec("u", rng.random_range(0..levels) as f64 / levels as f64, rng.random_range(0..2)))
            .collect();
        recs[0].label = 1;
        recs[1].label = 0;
        let got = auc(&recs).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&recs);
        ensure!(got == want, "trial {trial}: auc {got}, pairwise {want}");
    }
    for (i, (recs, want)) in gauc_fixtures().into_iter().enumerate() {
        match want {
            Some(w) => {
                let g = gauc(&recs, true).map_err(|e| format!("fixture {i}: {e}"))?;
                ensure!((g - w).abs() < 1e-12, "fixture {i}: gauc {g}, want {w}");
            }
            None => ensure!(gauc(&recs, true).is_err(), "fixture {i}: no user has both labels but gauc returned a value"),
        }
    }
    Ok(())
}

// 12 ------------------------------------------------------------------------

fn serving_cost_matches_closed_form() -> Outcome {
    let cfg = ModelConfig {
        width: 16,
        layers: 1,
        n_q: 2,
        n_kv: 1,
        ..ModelConfig::default()
    };
    let mut grid = Vec::new();
    for l_i in [1, 2, 4, 6] {
        for k in [0, 1, 3, 10, 30, 100] {
            grid.push(Workload { k, l_i, candidates: 4 });
        }
    }
    let rows = bench_serving(&cfg, &grid, 12, 1).map_err(|e| e.to_string())?;
    let mut rng = stage_rng(12, "acc-bench");
    for r in &rows {
        let vocab = Vocab::new(vec![3; r.l_i], 2).unwrap();
        let stream = random_stream(&vocab, true, r.k, &mut rng).unwrap();
        let counted = build_mask(&stream).pair_count() as u64;
        ensure!(r.anchor_keys == counted, "K {} L_i {}: {} anchor keys, mask has {counted}", r.k, r.l_i, r.anchor_keys);
        ensure!(r.anchor_keys == anchor_key_formula(stream.profile_len(), r.l_i, r.k), "K {} L_i {}: anchor formula", r.k, r.l_i);
        let t = stream.len() as u64;
        ensure!(r.full_keys == t * (t + 1) / 2, "K {} L_i {}: {} full keys for {t} tokens", r.k, r.l_i, r.full_keys);
        ensure!(r.full_keys == r.full_keys_formula, "K {} L_i {}: full formula", r.k, r.l_i);
        ensure!(r.plain_keys == r.plain_keys_formula, "K {} L_i {}: plain formula", r.k, r.l_i);
    }
    let big = rows.iter().find(|r| r.k == 100 && r.l_i == 6).unwrap();
    let gap = (big.history_ratio - 6.0).abs() / 6.0;
    ensure!(gap <= 0.1, "history ratio {} at K 100, L_i 6", big.history_ratio);
    let small = rows.iter().find(|r| r.k == 10 && r.l_i == 6).unwrap();
    ensure!(big.history_ratio > small.history_ratio, "ratio does not grow with K");
    Ok(())
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("rotary score matches the cos/sin expansion", hrope_matches_expansion),
        ("item order and in-item position are decoupled", hrope_halves_are_decoupled),
        ("anchor mask equals the closed form", anchor_mask_matches_closed_form),
        ("anchor eviction is lossless", eviction_is_lossless),
        ("one-pass ranking matches sequential passes", one_pass_ranking_matches_sequential),
        ("quantizer oracles", quantizer_oracles),
        ("vCLUB separates independent and copied pairs", vclub_orders_independent_below_copied),
        ("gradients match finite differences", gradients_match_finite_differences),
        ("specific layers track their modality", specific_layers_form_a_diagonal),
        ("pipeline learns the planted rule", pipeline_learns_the_planted_rule),
        ("auc and gauc match oracles", metrics_match_oracles),
        ("serving cost matches the closed form", serving_cost_matches_closed_form),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match out {
            Ok(()) => say(format!("PASS {n:>2} {name} ({secs:.1}s)")),
            Err(why) => {
                say(format!("FAIL {n:>2} {name}: {why}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
