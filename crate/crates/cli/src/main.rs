use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mango_core::config::{DialogueTask, EmbedderKind, ModeSelection, PipelineConfig};
use mango_core::pipeline::{run_stage, Stage, StageInputs};

#[derive(Parser)]
#[command(
    name = "mango",
    version,
    about = "Cultural commonsense knowledge pipeline"
)]
struct Cli {
    #[command(subcommand)]
    stage: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `work_dir`.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    embedder: Option<Embedder>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Embedder {
    Stub,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Utterance,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Vanilla,
    Ccsk,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Prompt from seed concepts and cultures.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Drop malformed assertions.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        blocklist: Option<PathBuf>,
    },
    /// Cluster assertions and generate representatives.
    Consolidate {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        render_template: Option<String>,
    },
    /// Embed the knowledge base for retrieval.
    Index {
        #[command(flatten)]
        common: Common,
    },
    /// Retrieve assertions for a narrative JSON file.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        narrative: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        min_sim: Option<f64>,
    },
    /// Run the dialogue tasks and export an evaluation bundle.
    Dialogue {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Option<Task>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        min_sim: Option<f64>,
    },
    /// Print per-step counts.
    Stats {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<PipelineConfig, String> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| e.to_string())?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = &common.work_dir {
        cfg.work_dir = w.clone();
    }
    if let Some(e) = common.embedder {
        cfg.embedding.provider = match e {
            Embedder::Stub => EmbedderKind::Stub,
            Embedder::Remote => EmbedderKind::Remote,
        };
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let mut inputs = StageInputs::default();
    let (stage, common) = match &cli.stage {
        Command::Generate { common } => (Stage::Generate, common),
        Command::Filter { common, .. } => (Stage::Filter, common),
        Command::Consolidate { common, .. } => (Stage::Consolidate, common),
        Command::Index { common } => (Stage::Index, common),
        Command::Retrieve { common, .. } => (Stage::Retrieve, common),
        Command::Dialogue { common, .. } => (Stage::Dialogue, common),
        Command::Stats { common } => (Stage::Stats, common),
    };
    let mut cfg = match load(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match &cli.stage {
        Command::Filter { blocklist, .. } => {
            if blocklist.is_some() {
                cfg.blocklist = blocklist.clone();
            }
        }
        Command::Consolidate {
            threshold,
            top,
            render_template,
            ..
        } => {
            if let Some(t) = threshold {
                cfg.consolidation.distance_threshold = *t;
            }
            if top.is_some() {
                cfg.consolidation.top_n = *top;
            }
            if let Some(r) = render_template {
                cfg.consolidation.render_template = r.clone();
            }
        }
        Command::Retrieve {
            narrative,
            k,
            min_sim,
            ..
        } => {
            inputs.narrative = Some(narrative.clone());
            apply_retrieval(&mut cfg, *k, *min_sim);
        }
        Command::Dialogue {
            task,
            mode,
            n,
            k,
            min_sim,
            ..
        } => {
            if let Some(t) = task {
                cfg.dialogue.task = match t {
                    Task::Utterance => DialogueTask::Utterance,
                    Task::Full => DialogueTask::Full,
                };
            }
            if let Some(m) = mode {
                cfg.dialogue.mode = match m {
                    Mode::Vanilla => ModeSelection::Vanilla,
                    Mode::Ccsk => ModeSelection::Ccsk,
                    Mode::Both => ModeSelection::Both,
                };
            }
            if let Some(n) = n {
                cfg.dialogue.n = *n;
            }
            apply_retrieval(&mut cfg, *k, *min_sim);
        }
        _ => {}
    }

    match run_stage(stage, &cfg, &inputs) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn apply_retrieval(cfg: &mut PipelineConfig, k: Option<usize>, min_sim: Option<f64>) {
    if let Some(k) = k {
        cfg.retrieval.k = k;
    }
    if let Some(m) = min_sim {
        cfg.retrieval.min_similarity = m;
    }
}
