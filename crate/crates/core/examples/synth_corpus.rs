//! Generates the planted-cluster corpus and round-trips it through the
//! on-disk formats.
use hisam::ingest::{load_embeddings, load_interactions, synth_corpus, write_embeddings, write_interactions};
use hisam::ingest::{EmbeddingFormat, LoadOptions, SyntheticSpec};

fn main() -> hisam::Result<()> {
    let spec = SyntheticSpec {
        n_items: 100,
        n_users: 20,
        ..SyntheticSpec::default()
    };
    let data = synth_corpus(&spec)?;
    let dir = std::env::temp_dir().join("hisam_synth_example");
    std::fs::create_dir_all(&dir)?;
    let emb = dir.join("items.emb");
    let log = dir.join("interactions.tsv");
    write_embeddings(&emb, &data.items, EmbeddingFormat::Binary)?;
    write_interactions(&log, &data.logs, &data.actions)?;

    let items = load_embeddings(&emb)?;
    let logs = load_interactions(&log, &items.ids(), &data.actions, LoadOptions::default())?;
    let events: usize = logs.iter().map(|l| l.events.len()).sum();
    println!("{} items, dims {:?}", items.len(), items.dims());
    println!("{} users, {events} events", logs.len());
    println!("first user: {:?}", &logs[0].events[..3]);
    Ok(())
}
