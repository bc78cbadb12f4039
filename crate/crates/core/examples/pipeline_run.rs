//! Runs every stage on a shrunken config and prints the manifest.
use hisam::pipeline::{run_pipeline, PipelineConfig};

fn main() -> hisam::Result<()> {
    let mut cfg = PipelineConfig::desk();
    cfg.ingest.synthetic.n_users = 200;
    cfg.train.sft_steps = 100;
    let dir = std::env::temp_dir().join("hisam_pipeline_example");
    let manifest = run_pipeline(&cfg, &dir)?;
    print!("{}", std::fs::read_to_string(dir.join("manifest.toml"))?);
    println!("stages run: {}", manifest.stages.len());
    Ok(())
}
