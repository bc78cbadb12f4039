use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hisam::pipeline::{self, validate_config, PipelineConfig};
use hisam::Error;

#[derive(Parser)]
#[command(name = "hisam", version, about = "Semantic-ID tokenizer and memory-anchor ranking model")]
struct Cli {
    /// TOML config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective config as TOML.
    Config,
    /// Check the config and list every violation.
    Validate,
    /// Generate a synthetic corpus and interaction log.
    Synth,
    /// Train projection heads and write aligned embeddings.
    Align,
    /// Train the codebooks and write item and user tokens.
    Tokenize,
    /// Next-token pre-training.
    Pretrain,
    /// Action fine-tuning.
    Sft,
    /// AUC / GAUC on held-out events.
    Eval,
    /// Rank candidates for one user, best first.
    Score {
        /// Interactions file with a single user's events.
        #[arg(long)]
        history: PathBuf,
        /// One item id per line.
        #[arg(long)]
        candidates: PathBuf,
    },
    /// Attention-cost and latency report for the serving path.
    Bench,
    /// All stages in order, with a manifest.
    Run,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Invalid(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn load(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let cfg = match (&cli.config, cli.profile) {
        (Some(p), _) => PipelineConfig::load(p).map_err(|e| Failure::Invalid(e.to_string()))?,
        (None, Profile::Desk) => PipelineConfig::desk(),
        (None, Profile::Full) => PipelineConfig::default(),
    };
    Ok(cfg)
}

fn checked(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let cfg = load(cli)?;
    let v = validate_config(&cfg);
    if !v.is_empty() {
        return Err(Failure::Invalid(v.join("\n")));
    }
    fs::create_dir_all(&cli.dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(cfg)
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn read_ids(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let dir = cli.dir.as_path();
    match &cli.cmd {
        Cmd::Config => print!("{}", load(cli)?.to_toml()),
        Cmd::Validate => {
            checked(cli)?;
            println!("config ok");
        }
        Cmd::Synth => list(&pipeline::stage_synth(&checked(cli)?, dir)?),
        Cmd::Align => list(&pipeline::stage_align(&checked(cli)?, dir)?),
        Cmd::Tokenize => list(&pipeline::stage_tokenize(&checked(cli)?, dir)?),
        Cmd::Pretrain => match pipeline::stage_pretrain(&checked(cli)?, dir)? {
            Some(p) => list(&p),
            None => println!("pt_steps is 0, nothing to do"),
        },
        Cmd::Sft => list(&pipeline::stage_sft(&checked(cli)?, dir)?),
        Cmd::Eval => {
            let (r, p) = pipeline::stage_eval(&checked(cli)?, dir)?;
            list(&p);
            println!("auc {:.4} gauc {:.4} users {}", r.auc, r.gauc, r.users);
        }
        Cmd::Score { history, candidates } => {
            let cfg = checked(cli)?;
            let ids = read_ids(candidates)?;
            for (id, s) in pipeline::score_candidates(&cfg, dir, history, &ids)? {
                println!("{id}\t{s}");
            }
        }
        Cmd::Bench => {
            let (rows, p) = pipeline::stage_bench(&checked(cli)?, dir)?;
            list(&[p]);
            for r in rows {
                println!("k {} l_i {} anchor keys {} full keys {}", r.k, r.l_i, r.anchor_keys, r.full_keys);
            }
        }
        Cmd::Run => {
            let m = pipeline::run_pipeline(&checked(cli)?, dir)?;
            for s in &m.stages {
                println!("{:<9} {:?} {} artifacts", s.name, s.status, s.artifacts.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("invalid config:\n{m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
