//! End-to-end tests of the installed binary: every command runs against a
//! small deterministic corpus and the outputs are checked on disk.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_egdgnn")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// 40 users, 6 interactions each, item ids spread over a 220-item space so
/// the 101-candidate evaluation always has enough negatives.
fn write_corpus(path: &Path) {
    let mut state = 0x2545_f491_4f6c_dd1d_u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut lines = String::new();
    for u in 0..40 {
        for t in 0..6 {
            let item = (next() % 220) + 1;
            lines.push_str(&format!("u{u}\ti{item}\t{t}\n"));
        }
    }
    std::fs::write(path, lines).unwrap();
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    prep: PathBuf,
    run_dir: PathBuf,
}

fn train_pipeline(seed: &str) -> Pipeline {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log.tsv");
    write_corpus(&log);
    let prep = tmp.path().join("prep");
    run_ok(&["prepare", p(&log), "--format", "tsv", "--out", p(&prep)]);
    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        p(&prep),
        "--out",
        p(&run_dir),
        "--channels",
        "2",
        "--dim",
        "8",
        "--channel-dim",
        "4",
        "--max-len",
        "6",
        "--window",
        "3",
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--lr",
        "0.01",
        "--seed",
        seed,
        "--eval-every",
        "1",
    ]);
    Pipeline { _tmp: tmp, prep, run_dir }
}

#[test]
fn pipeline_runs_end_to_end() {
    let pl = train_pipeline("7");
    let tmp = pl._tmp.path();

    for name in ["config.toml", "train_log.jsonl"] {
        assert!(pl.run_dir.join(name).is_file(), "missing {name}");
    }
    assert!(pl.run_dir.join("best/manifest.json").is_file());
    assert!(pl.run_dir.join("last/manifest.json").is_file());

    let gdir = tmp.join("gdir");
    let out = run_ok(&["build-graph", p(&pl.prep), "--out", p(&gdir)]);
    assert!(out.contains("edges"), "{out}");
    assert!(gdir.join("graph.tsv").is_file());
    assert!(gdir.join("config.toml").is_file());

    let evout = tmp.join("evout");
    let out = run_ok(&[
        "eval",
        p(&pl.run_dir),
        "--data",
        p(&pl.prep),
        "--out",
        p(&evout),
        "--seeds",
        "1,2",
    ]);
    assert!(out.contains("mean over 2 seed(s)"), "{out}");
    let metrics = std::fs::read_to_string(evout.join("metrics.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    for key in ["split", "n_users", "ndcg@5", "recall@5", "ndcg@10", "recall@10", "seeds", "config_digest"] {
        assert!(parsed.get(key).is_some(), "metrics.json missing {key}");
    }
    assert_eq!(parsed["seeds"], serde_json::json!([1, 2]));
    assert_eq!(parsed["n_users"], serde_json::json!(40));
    let per_seed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(evout.join("per_seed.json")).unwrap())
            .unwrap();
    assert_eq!(per_seed.as_array().unwrap().len(), 2);
    assert!(evout.join("config.toml").is_file());

    let popout = tmp.join("popout");
    let out = run_ok(&[
        "eval",
        p(&pl.run_dir),
        "--data",
        p(&pl.prep),
        "--out",
        p(&popout),
        "--baseline",
        "pop",
        "--seeds",
        "1",
        "--split",
        "valid",
    ]);
    assert!(out.contains("mean over 1 seed(s)"), "{out}");
    let pop_metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(popout.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(pop_metrics["split"], serde_json::json!("valid"));

    let exout = tmp.join("exout");
    run_ok(&["export", p(&pl.run_dir), "--data", p(&pl.prep), "--out", p(&exout)]);
    for name in ["embeddings.tsv", "channels.tsv", "pca2d.tsv", "config.toml"] {
        assert!(exout.join(name).is_file(), "missing {name}");
    }
    let lines = std::fs::read_to_string(exout.join("channels.tsv")).unwrap();
    assert!(lines.starts_with("item\tchannel"));
}

#[test]
fn identical_runs_are_bit_identical() {
    let a = train_pipeline("13");
    let b = train_pipeline("13");
    for ckpt in ["best", "last"] {
        let read = |pl: &Pipeline, name: &str| std::fs::read(pl.run_dir.join(ckpt).join(name)).unwrap();
        for file in ["item_embed.f64", "channel_w0.f64", "attn_wq.f64", "combine_wl.f64"] {
            assert_eq!(read(&a, file), read(&b, file), "{ckpt}/{file} differs between runs");
        }
    }
    let eval = |pl: &Pipeline| {
        let out = pl._tmp.path().join("ev");
        run_ok(&[
            "eval",
            p(&pl.run_dir),
            "--data",
            p(&pl.prep),
            "--out",
            p(&out),
            "--seeds",
            "3,4",
        ]);
        std::fs::read(out.join("metrics.json")).unwrap()
    };
    assert_eq!(eval(&a), eval(&b), "metrics.json differs between identical runs");
}

#[test]
fn seed_changes_the_trained_model() {
    let a = train_pipeline("1");
    let b = train_pipeline("2");
    let read = |pl: &Pipeline| std::fs::read(pl.run_dir.join("last/item_embed.f64")).unwrap();
    assert_ne!(read(&a), read(&b));
}

#[test]
fn errors_are_single_prefixed_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["eval", "/nonexistent", "--data", "/nowhere", "--out", p(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
    assert!(stderr.starts_with("ERROR:"), "stderr: {stderr}");

    let out = run(&["train", "--epochs", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("ERROR:cli:"), "stderr: {stderr}");
    assert_eq!(stderr.lines().count(), 1);

    let bad_cfg = tmp.path().join("bad.toml");
    std::fs::write(&bad_cfg, "not_a_key = 1\n").unwrap();
    let out = run(&["verify", "--config", p(&bad_cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("ERROR:cli:"));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log.tsv");
    write_corpus(&log);
    let prep = tmp.path().join("prep");
    run_ok(&["prepare", p(&log), "--format", "tsv", "--out", p(&prep)]);

    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "channels = 2\ndim = 8\nchannel_dim = 4\nmax_len = 6\nwindow = 3\n\
         epochs = 1\nbatch_size = 16\nlr = 0.5\neval_every = 0\n",
    )
    .unwrap();
    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        p(&prep),
        "--out",
        p(&run_dir),
        "--config",
        p(&cfg),
        "--lr",
        "0.01",
    ]);
    let echoed = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(echoed.contains("lr = 0.01"), "flag must win: {echoed}");
    assert!(echoed.contains("channels = 2"), "file must fill the rest: {echoed}");
    assert!(echoed.contains(&format!("data = \"{}\"", prep.display())));
}

#[test]
fn eval_rejects_shape_conflicts_with_the_checkpoint() {
    let pl = train_pipeline("5");
    let out = run(&[
        "eval",
        p(&pl.run_dir),
        "--data",
        p(&pl.prep),
        "--out",
        p(&pl._tmp.path().join("ev")),
        "--dim",
        "16",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(
        stderr.starts_with("ERROR:model:") && stderr.contains("--dim 16"),
        "stderr: {stderr}"
    );
}

#[test]
fn prepare_matches_the_library_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log.tsv");
    write_corpus(&log);
    let cli_out = tmp.path().join("cli");
    run_ok(&["prepare", p(&log), "--format", "tsv", "--out", p(&cli_out)]);

    let lib_out = tmp.path().join("lib");
    let corpus =
        egdgnn::corpus::load_interactions(&log, egdgnn::corpus::InputFormat::Tsv).unwrap();
    egdgnn::corpus::write_prepared(&corpus, &lib_out).unwrap();
    for name in ["items.tsv", "users.tsv", "train.tsv", "valid.tsv", "test.tsv", "stats.json"] {
        assert_eq!(
            std::fs::read(cli_out.join(name)).unwrap(),
            std::fs::read(lib_out.join(name)).unwrap(),
            "{name} differs from the library pipeline"
        );
    }
}

#[test]
fn epochs_zero_saves_only_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log.tsv");
    write_corpus(&log);
    let prep = tmp.path().join("prep");
    run_ok(&["prepare", p(&log), "--format", "tsv", "--out", p(&prep)]);
    let run_dir = tmp.path().join("run");
    let out = run_ok(&[
        "train",
        p(&prep),
        "--out",
        p(&run_dir),
        "--channels",
        "2",
        "--dim",
        "8",
        "--channel-dim",
        "4",
        "--max-len",
        "6",
        "--window",
        "3",
        "--epochs",
        "0",
    ]);
    assert!(out.contains("initialization"), "{out}");
    assert!(run_dir.join("last/manifest.json").is_file());
    assert!(!run_dir.join("train_log.jsonl").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("last/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["epoch"], serde_json::json!(0));
}

#[test]
fn verify_reports_all_checks() {
    let out = run_ok(&["verify", "--seed", "5"]);
    assert!(out.contains("all verification checks passed"), "{out}");
    assert_eq!(out.matches(": PASS").count(), 8, "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}
