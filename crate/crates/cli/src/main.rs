//! `hgn`: generate data, select paragraphs, inspect graphs, train, predict
//! and score.
//!
//! Exit status is 0 on success, 1 for usage or validation errors and 2 for
//! failures while running. Stage timings go to stderr as JSON lines.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] hgn::Error),
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "hgn", version, about = "Hierarchical graph network for multi-hop question answering")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-example stages (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Replace graph reasoning with the identity.
    #[arg(long, global = true)]
    no_graph: bool,
    /// Paragraph selection mode: top2, top4, threshold, first-hop or top<N>.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Second-hop threshold for `--mode threshold`.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Embedding file used to initialise the model before training.
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with train and dev question sets.
    Gen {
        /// Total examples, including the dev split.
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long)]
        dev: Option<usize>,
    },
    /// Select paragraphs for each question and print selection quality.
    Select {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Questions to select for (defaults to the dev set).
        #[arg(long)]
        qa: Option<PathBuf>,
        /// `{qid: {title: score}}` ranker scores.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Graph inspection.
    Graph {
        #[command(subcommand)]
        action: GraphCommand,
    },
    /// Train a model, keeping the checkpoint with the best dev joint F1.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict with a checkpoint and score the predictions.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Questions to evaluate (defaults to the dev set).
        #[arg(long)]
        qa: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Score a prediction file against gold questions.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Subcommand, Debug)]
enum GraphCommand {
    /// Print one example's graph as JSON.
    Dump {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        qa: Option<PathBuf>,
        /// Question id (defaults to the first question).
        #[arg(long)]
        id: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    /// Percentages to two decimals.
    Table,
}

fn resolve(cli: &mut Cli) -> Result<RunConfig, CliError> {
    let g = &cli.global;
    let mut c = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(j) = g.jobs {
        c.jobs = j;
    }
    if let Some(d) = &g.out_dir {
        c.out_dir = d.clone();
    }
    if g.no_graph {
        c.model.use_graph = false;
    }
    if let Some(m) = &g.mode {
        c.selection.mode = m.clone();
    }
    if let Some(t) = g.tau {
        c.selection.tau = t;
    }
    if let Some(e) = &g.embeddings {
        c.paths.embeddings = Some(e.clone());
    }
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            slot.clone_from(v);
        }
    };
    match &mut cli.command {
        Command::Gen { examples, dev } => {
            if let Some(n) = examples {
                c.synth.num_examples = *n;
            }
            if let Some(n) = dev {
                c.dev_examples = *n;
            }
        }
        Command::Select { corpus, scores, .. } => {
            set(&mut c.paths.corpus, corpus);
            set(&mut c.paths.ranker_scores, scores);
        }
        Command::Graph { action: GraphCommand::Dump { corpus, .. } } => set(&mut c.paths.corpus, corpus),
        Command::Train { corpus, train, dev, epochs } => {
            set(&mut c.paths.corpus, corpus);
            set(&mut c.paths.train, train);
            set(&mut c.paths.dev, dev);
            if let Some(e) = epochs {
                c.train.epochs = *e;
            }
        }
        Command::Eval { checkpoint, corpus, .. } => {
            set(&mut c.paths.checkpoint, checkpoint);
            set(&mut c.paths.corpus, corpus);
        }
        Command::Score { .. } => {}
    }
    c.resolve()
}

fn run(mut cli: Cli) -> Result<(), CliError> {
    let config = resolve(&mut cli)?;
    if cli.global.dump_config {
        println!("{}", serde_json::to_string_pretty(&config).expect("config serializes"));
        return Ok(());
    }
    let jobs = config.jobs;
    hgn::trainer::with_jobs(jobs, move || match cli.command {
        Command::Gen { .. } => commands::gen(&config),
        Command::Select { qa, .. } => commands::select(&config, qa),
        Command::Graph { action: GraphCommand::Dump { qa, id, .. } } => commands::graph_dump(&config, qa, id),
        Command::Train { .. } => commands::train(&config),
        Command::Eval { qa, format, .. } => commands::eval(&config, qa, format),
        Command::Score { pred, gold, format } => commands::score(&pred, &gold, format),
    })?
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
