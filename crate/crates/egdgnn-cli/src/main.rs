//! `egdgnn`: prepare interaction data, build the item graph, train the
//! recommender, evaluate rankings, run verification suites, and export
//! embeddings for plotting.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod verify;

use config::{resolve, Overrides};

/// Command failure carrying the subsystem tag for the one-line error
/// format `ERROR:<module>:<message>`.
#[derive(Debug)]
pub enum Fail {
    Lib(egdgnn::Error),
    Cli(String),
}

impl Fail {
    pub fn line(&self) -> String {
        let (module, message) = match self {
            Fail::Lib(e) => (e.module(), e.message()),
            Fail::Cli(m) => ("cli", m.clone()),
        };
        format!("ERROR:{module}:{}", message.replace('\n', " "))
    }
}

#[derive(Parser)]
#[command(
    name = "egdgnn",
    version,
    about = "Disentangled graph + sequence recommender toolchain",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Hyperparameter flags shared by the model-facing commands. All optional;
/// they override the config file, which overrides built-in defaults.
#[derive(Args, Debug, Default)]
struct HyperFlags {
    /// Number of disentangled channels K
    #[arg(long)]
    channels: Option<usize>,
    /// Input embedding width
    #[arg(long)]
    dim: Option<usize>,
    /// Width of each channel slice
    #[arg(long = "channel-dim")]
    channel_dim: Option<usize>,
    /// Sliding-window length L
    #[arg(long)]
    window: Option<usize>,
    /// Sequence window length T (longer prefixes are truncated)
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    /// KL weight in the training objective
    #[arg(long)]
    beta: Option<f64>,
    /// Dropout rate on the local path
    #[arg(long)]
    dropout: Option<f64>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Master seed for shuffling, noise, and sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Model variant: full, global-only, local-only, sa-vae-only, sliwin-only
    #[arg(long)]
    ablation: Option<String>,
    /// Flat key-value config file; flags given here override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

impl HyperFlags {
    fn into_overrides(self) -> (Option<PathBuf>, Overrides) {
        let ov = Overrides {
            channels: self.channels,
            dim: self.dim,
            channel_dim: self.channel_dim,
            window: self.window,
            max_len: self.max_len,
            beta: self.beta,
            dropout: self.dropout,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            ablation: self.ablation,
            ..Overrides::default()
        };
        (self.config, ov)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw interaction log into the preprocessed corpus layout
    Prepare {
        /// Raw interaction file
        input: Option<PathBuf>,
        /// Input format: movielens-dat, amazon-jsonl, or tsv
        #[arg(long)]
        format: Option<String>,
        /// Output directory for items.tsv, train/valid/test.tsv, stats.json
        #[arg(long)]
        out: Option<PathBuf>,
        /// k-core threshold override (0 or 1 disables filtering)
        #[arg(long = "min-count")]
        min_count: Option<usize>,
        /// Skip the first line of a tsv input
        #[arg(long = "tsv-header")]
        tsv_header: bool,
        /// Flat key-value config file
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build the consecutive-pair item graph from a prepared corpus
    BuildGraph {
        /// Prepared corpus directory
        data: Option<PathBuf>,
        /// Output directory for graph.tsv
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap each item's neighbor count by seeded subsampling
        #[arg(long = "max-degree")]
        max_degree: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a prepared corpus; writes checkpoints and train_log.jsonl
    Train {
        /// Prepared corpus directory
        data: Option<PathBuf>,
        /// Run directory for checkpoints, log, and config echo
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse a graph.tsv instead of rebuilding from the training split
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Validate every N epochs (0 disables periodic validation)
        #[arg(long = "eval-every")]
        eval_every: Option<usize>,
        /// Stop after this many validations without improvement
        #[arg(long)]
        patience: Option<usize>,
        /// Clip the global gradient norm
        #[arg(long = "grad-clip")]
        grad_clip: Option<f64>,
        /// Cap graph degrees (matches build-graph --max-degree)
        #[arg(long = "max-degree")]
        max_degree: Option<usize>,
        #[command(flatten)]
        hyper: HyperFlags,
    },
    /// Rank held-out items with a trained checkpoint or the pop baseline
    Eval {
        /// Checkpoint directory (or a run directory with best/ and last/)
        checkpoint: Option<PathBuf>,
        /// Prepared corpus directory
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for metrics.json and per_seed.json
        #[arg(long)]
        out: Option<PathBuf>,
        /// Which held-out target to score: valid or test
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated evaluation seeds, e.g. 1,2,3,4,5
        #[arg(long)]
        seeds: Option<String>,
        /// Score with a baseline instead of a checkpoint (pop)
        #[arg(long)]
        baseline: Option<String>,
        /// Reuse a graph.tsv instead of rebuilding from the training split
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Cap graph degrees (matches build-graph --max-degree)
        #[arg(long = "max-degree")]
        max_degree: Option<usize>,
        #[command(flatten)]
        hyper: HyperFlags,
    },
    /// Run the gradient and property verification suites
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write embeddings.tsv, channels.tsv, and pca2d.tsv from a checkpoint
    Export {
        /// Checkpoint directory (or a run directory with best/ and last/)
        checkpoint: Option<PathBuf>,
        /// Prepared corpus directory
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse a graph.tsv instead of rebuilding from the training split
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Cap graph degrees (matches build-graph --max-degree)
        #[arg(long = "max-degree")]
        max_degree: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Fail> {
    match cli.command {
        Command::Prepare { input, format, out, min_count, tsv_header, config } => {
            let ov = Overrides {
                input,
                out,
                format,
                min_count,
                tsv_header: if tsv_header { Some(true) } else { None },
                ..Overrides::default()
            };
            let (cfg, _) = resolve(config.as_deref(), ov)?;
            commands::cmd_prepare(&cfg)
        }
        Command::BuildGraph { data, out, max_degree, seed, config } => {
            let ov = Overrides { data, out, max_degree, seed, ..Overrides::default() };
            let (cfg, _) = resolve(config.as_deref(), ov)?;
            commands::cmd_build_graph(&cfg)
        }
        Command::Train { data, out, graph, eval_every, patience, grad_clip, max_degree, hyper } => {
            let (config, mut ov) = hyper.into_overrides();
            ov.data = data;
            ov.out = out;
            ov.graph = graph;
            ov.eval_every = eval_every;
            ov.patience = patience;
            ov.grad_clip = grad_clip;
            ov.max_degree = max_degree;
            let (cfg, _) = resolve(config.as_deref(), ov)?;
            commands::cmd_train(&cfg)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
            seeds,
            baseline,
            graph,
            max_degree,
            hyper,
        } => {
            let (config, mut ov) = hyper.into_overrides();
            ov.input = checkpoint;
            ov.data = data;
            ov.out = out;
            ov.split = split;
            ov.seeds = seeds;
            ov.baseline = baseline;
            ov.graph = graph;
            ov.max_degree = max_degree;
            let (cfg, shape) = resolve(config.as_deref(), ov)?;
            commands::cmd_eval(&cfg, shape)
        }
        Command::Verify { seed, config } => {
            let ov = Overrides { seed, ..Overrides::default() };
            let (cfg, _) = resolve(config.as_deref(), ov)?;
            verify::cmd_verify(cfg.seed)
        }
        Command::Export { checkpoint, data, out, graph, max_degree, seed, config } => {
            let ov = Overrides {
                input: checkpoint,
                data,
                out,
                graph,
                max_degree,
                seed,
                ..Overrides::default()
            };
            let (cfg, _) = resolve(config.as_deref(), ov)?;
            commands::cmd_export(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("ERROR:cli:{first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(fail) => {
            eprintln!("{}", fail.line());
            ExitCode::FAILURE
        }
    }
}
