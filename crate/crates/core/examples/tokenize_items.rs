//! Learns shared and modality-specific codebooks and prints a few semantic
//! IDs plus the layer-by-modality similarity table.
use hisam::cga::{train_alignment, AlignConfig};
use hisam::dmrq::{layer_modality_similarity, tokenize, train_dmrq, DmrqConfig};
use hisam::ingest::{synth_corpus, SyntheticSpec};

fn main() -> hisam::Result<()> {
    let data = synth_corpus(&SyntheticSpec::default())?;
    let al = train_alignment(&data.items, &AlignConfig { d: 32, steps: 200, ..AlignConfig::default() }, 0)?;
    let cfg = DmrqConfig {
        codebook_size: 64,
        epochs: 20,
        batch_size: 64,
        lr: 1e-2,
        ..DmrqConfig::default()
    };
    let out = train_dmrq(&al.aligned, &cfg, 0)?;
    let codes = tokenize(&al.aligned, &out.stack)?;
    for c in codes.iter().take(5) {
        println!("{} -> {:?}", c.item_id, c.codes());
    }
    println!("reconstruction by epoch {:?}", out.epoch_reconstruction.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>());
    let sim = layer_modality_similarity(&al.aligned, &codes, &out.stack);
    for (l, row) in sim.iter_rows().enumerate() {
        println!("layer {l}: {:?}", row.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>());
    }
    Ok(())
}
