//! The command bodies: each takes a resolved [`RunConfig`], does its work
//! through the library, and leaves a `config.toml` echo in its output
//! directory.

use std::path::{Path, PathBuf};

use egdgnn::corpus::{leave_one_out_split, load_interactions_with, load_prepared, write_prepared, LoadOptions};
use egdgnn::error::Error;
use egdgnn::eval::{mean_reports, pop_baseline, write_metrics, EvalSplit, MetricsReport};
use egdgnn::export::export_embeddings;
use egdgnn::graph::{build_global_graph, GlobalGraph};
use egdgnn::model::{load_checkpoint, Checkpoint};
use egdgnn::numerics::mix_seed;
use egdgnn::{evaluate, train, Scorer, TrainConfig};

use crate::config::{digest, write_echo, RunConfig, ShapeProvided};
use crate::Fail;

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, Fail> {
    path.as_deref().ok_or_else(|| Fail::Cli(format!("missing {what}")))
}

/// Salt for degree-cap sampling so it does not share a stream with
/// training shuffles or noise.
const CAP_SALT: u64 = 0x6361_7064; // "capd"

/// Build the item graph from the corpus's training split, or load the one
/// the user pointed at. The degree cap, when configured, applies to both
/// routes.
fn obtain_graph(cfg: &RunConfig, corpus: &egdgnn::InteractionCorpus) -> Result<GlobalGraph, Fail> {
    let graph = match &cfg.graph {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Fail::Lib(Error::io(path, e)))?;
            GlobalGraph::from_tsv(&text).map_err(Fail::Lib)?
        }
        None => {
            let split = leave_one_out_split(corpus);
            build_global_graph(split.train_sequences(), corpus.n_items()).map_err(Fail::Lib)?
        }
    };
    Ok(match cfg.max_degree {
        Some(cap) => graph.cap_degrees(cap, mix_seed(cfg.seed, CAP_SALT)),
        None => graph,
    })
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<(), Fail> {
    let input = required(&cfg.input, "input path")?;
    let out = required(&cfg.out, "--out directory")?;
    let options = LoadOptions { tsv_header: cfg.tsv_header, min_count: cfg.min_count };
    let corpus = load_interactions_with(input, cfg.format, &options).map_err(Fail::Lib)?;
    let stats = write_prepared(&corpus, out).map_err(Fail::Lib)?;
    write_echo(cfg, out)?;
    println!(
        "prepared {} users x {} items, {} interactions, mean train length {:.2} -> {}",
        stats.users,
        stats.items,
        stats.interactions,
        stats.mean_seq_len,
        out.display()
    );
    Ok(())
}

pub fn cmd_build_graph(cfg: &RunConfig) -> Result<(), Fail> {
    let data = required(&cfg.data, "prepared data directory")?;
    let out = required(&cfg.out, "--out directory")?;
    let corpus = load_prepared(data).map_err(Fail::Lib)?;
    let split = leave_one_out_split(&corpus);
    let graph =
        build_global_graph(split.train_sequences(), corpus.n_items()).map_err(Fail::Lib)?;
    let graph = match cfg.max_degree {
        Some(cap) => graph.cap_degrees(cap, mix_seed(cfg.seed, CAP_SALT)),
        None => graph,
    };
    std::fs::create_dir_all(out).map_err(|e| Fail::Lib(Error::io(out, e)))?;
    let path = out.join("graph.tsv");
    std::fs::write(&path, graph.to_tsv()).map_err(|e| Fail::Lib(Error::io(&path, e)))?;
    write_echo(cfg, out)?;
    println!("graph over {} items with {} edges -> {}", graph.n_items(), graph.edge_count(), path.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), Fail> {
    let data = required(&cfg.data, "prepared data directory")?;
    let out = required(&cfg.out, "--out directory")?;
    let corpus = load_prepared(data).map_err(Fail::Lib)?;
    let graph = if cfg.ablation.uses_global() {
        Some(obtain_graph(cfg, &corpus)?)
    } else {
        None
    };
    let mut config = TrainConfig::new(cfg.hyper(), cfg.ablation, out);
    config.eval_every = cfg.eval_every;
    config.patience = cfg.patience;
    config.grad_clip = cfg.grad_clip;
    let outcome = train(&corpus, graph.as_ref(), &config).map_err(Fail::Lib)?;
    write_echo(cfg, out)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs: loss {:.4} (recon {:.4}, kl {:.4})",
            outcome.log.len(),
            last.loss,
            last.recon,
            last.kl
        );
    } else {
        println!("epochs = 0: wrote the initialization checkpoint only");
    }
    match outcome.best {
        Some((epoch, score)) => {
            println!("best validation ndcg@10 {score:.4} at epoch {epoch} -> {}", out.join("best").display())
        }
        None => println!("checkpoint -> {}", out.join("last").display()),
    }
    Ok(())
}

/// A checkpoint argument may be the checkpoint directory itself or a
/// training run directory holding `best/` and `last/`.
fn find_checkpoint(dir: &Path) -> Result<Checkpoint, Fail> {
    for candidate in [dir.to_path_buf(), dir.join("best"), dir.join("last")] {
        if candidate.join("manifest.json").is_file() {
            return load_checkpoint(&candidate).map_err(Fail::Lib);
        }
    }
    Err(Fail::Lib(Error::Model(format!(
        "no checkpoint under {} (looked for manifest.json, best/, last/)",
        dir.display()
    ))))
}

fn check_shape_conflicts(cfg: &RunConfig, provided: ShapeProvided, ckpt: &Checkpoint) -> Result<(), Fail> {
    let pairs = [
        ("channels", provided.channels, cfg.channels, ckpt.hyper.k),
        ("dim", provided.dim, cfg.dim, ckpt.hyper.d_in),
        ("channel-dim", provided.channel_dim, cfg.channel_dim, ckpt.hyper.d_channel),
        ("window", provided.window, cfg.window, ckpt.hyper.l),
        ("max-len", provided.max_len, cfg.max_len, ckpt.hyper.t),
    ];
    for (name, was_set, configured, trained) in pairs {
        if was_set && configured != trained {
            return Err(Fail::Lib(Error::Model(format!(
                "--{name} {configured} conflicts with the checkpoint (trained with {trained})"
            ))));
        }
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, provided: ShapeProvided) -> Result<(), Fail> {
    let data = required(&cfg.data, "--data directory")?;
    let out = required(&cfg.out, "--out directory")?;
    let corpus = load_prepared(data).map_err(Fail::Lib)?;
    let split = leave_one_out_split(&corpus);
    let which = match cfg.split.as_str() {
        "valid" => EvalSplit::Valid,
        _ => EvalSplit::Test,
    };
    let seeds = cfg.eval_seeds();
    let tag = digest(cfg);

    let mut reports: Vec<MetricsReport> = Vec::new();
    match cfg.baseline.as_deref() {
        Some("pop") => {
            let scorer = pop_baseline(&corpus, &split);
            for &seed in &seeds {
                let report = evaluate(&scorer, &corpus, &split, which, seed).map_err(Fail::Lib)?;
                reports.push(report.with_digest(&tag));
            }
        }
        Some(other) => return Err(Fail::Cli(format!("unknown baseline '{other}' (expected pop)"))),
        None => {
            let ckpt_dir = required(&cfg.input, "checkpoint directory")?;
            let ckpt = find_checkpoint(ckpt_dir)?;
            check_shape_conflicts(cfg, provided, &ckpt)?;
            if ckpt.n_items != corpus.n_items() {
                return Err(Fail::Lib(Error::Eval(format!(
                    "checkpoint covers {} items but the prepared corpus has {}",
                    ckpt.n_items,
                    corpus.n_items()
                ))));
            }
            let graph = if cfg.ablation.uses_global() {
                Some(obtain_graph(cfg, &corpus)?)
            } else {
                None
            };
            let scorer = Scorer::new(&ckpt.params, &ckpt.hyper, cfg.ablation, graph.as_ref())
                .map_err(Fail::Lib)?;
            for &seed in &seeds {
                let report = evaluate(&scorer, &corpus, &split, which, seed).map_err(Fail::Lib)?;
                reports.push(report.with_digest(&tag));
            }
        }
    }

    for report in &reports {
        println!(
            "seed {:>6}: ndcg@5 {:.4}  recall@5 {:.4}  ndcg@10 {:.4}  recall@10 {:.4}  ({} users)",
            report.seeds[0],
            report.ndcg_at_5,
            report.recall_at_5,
            report.ndcg_at_10,
            report.recall_at_10,
            report.n_users
        );
    }
    let mean = mean_reports(&reports).map_err(Fail::Lib)?.with_digest(&tag);
    println!(
        "mean over {} seed(s): ndcg@5 {:.4}  recall@5 {:.4}  ndcg@10 {:.4}  recall@10 {:.4}",
        seeds.len(),
        mean.ndcg_at_5,
        mean.recall_at_5,
        mean.ndcg_at_10,
        mean.recall_at_10
    );

    std::fs::create_dir_all(out).map_err(|e| Fail::Lib(Error::io(out, e)))?;
    write_metrics(&mean, &out.join("metrics.json")).map_err(Fail::Lib)?;
    let per_seed = serde_json::to_string_pretty(&reports)
        .map_err(|e| Fail::Cli(format!("per-seed serialization failed: {e}")))?;
    let per_seed_path = out.join("per_seed.json");
    std::fs::write(&per_seed_path, per_seed + "\n")
        .map_err(|e| Fail::Lib(Error::io(&per_seed_path, e)))?;
    write_echo(cfg, out)?;
    println!("metrics -> {}", out.join("metrics.json").display());
    Ok(())
}

pub fn cmd_export(cfg: &RunConfig) -> Result<(), Fail> {
    let ckpt_dir = required(&cfg.input, "checkpoint directory")?;
    let data = required(&cfg.data, "--data directory")?;
    let out = required(&cfg.out, "--out directory")?;
    let ckpt = find_checkpoint(ckpt_dir)?;
    let corpus = load_prepared(data).map_err(Fail::Lib)?;
    if ckpt.n_items != corpus.n_items() {
        return Err(Fail::Lib(Error::Model(format!(
            "checkpoint covers {} items but the prepared corpus has {}",
            ckpt.n_items,
            corpus.n_items()
        ))));
    }
    let graph = obtain_graph(cfg, &corpus)?;
    export_embeddings(&ckpt.params, &graph, out).map_err(Fail::Lib)?;
    write_echo(cfg, out)?;
    println!(
        "wrote embeddings.tsv, channels.tsv, pca2d.tsv for {} items -> {}",
        graph.n_items(),
        out.display()
    );
    Ok(())
}
