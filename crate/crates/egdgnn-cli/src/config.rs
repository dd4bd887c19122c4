//! Run configuration: defaults, optional flat config file, CLI flag
//! overrides, and the resolved echo written into every output directory.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use egdgnn::corpus::InputFormat;
use egdgnn::{Ablation, HyperParams};

use crate::Fail;

/// Everything a command might need, fully resolved. Commands read the
/// subset that concerns them; the whole thing is echoed into the output
/// directory so a run can be reproduced from its artifacts alone.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub channels: usize,
    pub dim: usize,
    pub channel_dim: usize,
    pub window: usize,
    pub max_len: usize,
    pub beta: f64,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub eval_every: usize,
    pub patience: Option<usize>,
    pub grad_clip: Option<f64>,
    pub format: InputFormat,
    pub min_count: Option<usize>,
    pub tsv_header: bool,
    pub max_degree: Option<usize>,
    pub split: String,
    pub seeds: Vec<u64>,
    pub baseline: Option<String>,
    pub input: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub graph: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = HyperParams::default();
        RunConfig {
            channels: h.k,
            dim: h.d_in,
            channel_dim: h.d_channel,
            window: h.l,
            max_len: h.t,
            beta: h.beta,
            dropout: h.dropout,
            lr: h.lr,
            batch_size: h.batch_size,
            epochs: h.epochs,
            seed: h.seed,
            ablation: Ablation::Full,
            eval_every: 1,
            patience: None,
            grad_clip: None,
            format: InputFormat::Tsv,
            min_count: None,
            tsv_header: false,
            max_degree: None,
            split: "test".to_string(),
            seeds: Vec::new(),
            baseline: None,
            input: None,
            data: None,
            out: None,
            graph: None,
        }
    }
}

impl RunConfig {
    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            k: self.channels,
            d_in: self.dim,
            d_channel: self.channel_dim,
            t: self.max_len,
            l: self.window,
            beta: self.beta,
            dropout: self.dropout,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    /// Evaluation seeds; falls back to the run seed when none were given.
    pub fn eval_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }
}

/// The flat key-value config file. Every key optional; unknown keys are
/// rejected so typos surface instead of silently using defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    channels: Option<usize>,
    dim: Option<usize>,
    channel_dim: Option<usize>,
    window: Option<usize>,
    max_len: Option<usize>,
    beta: Option<f64>,
    dropout: Option<f64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    ablation: Option<String>,
    eval_every: Option<usize>,
    patience: Option<usize>,
    grad_clip: Option<f64>,
    format: Option<String>,
    min_count: Option<usize>,
    tsv_header: Option<bool>,
    max_degree: Option<usize>,
    split: Option<String>,
    seeds: Option<String>,
    baseline: Option<String>,
    input: Option<String>,
    data: Option<String>,
    out: Option<String>,
    graph: Option<String>,
}

/// Values a subcommand's flags supplied explicitly. Anything `Some` beats
/// both the defaults and the config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub channels: Option<usize>,
    pub dim: Option<usize>,
    pub channel_dim: Option<usize>,
    pub window: Option<usize>,
    pub max_len: Option<usize>,
    pub beta: Option<f64>,
    pub dropout: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub ablation: Option<String>,
    pub eval_every: Option<usize>,
    pub patience: Option<usize>,
    pub grad_clip: Option<f64>,
    pub format: Option<String>,
    pub min_count: Option<usize>,
    pub tsv_header: Option<bool>,
    pub max_degree: Option<usize>,
    pub split: Option<String>,
    pub seeds: Option<String>,
    pub baseline: Option<String>,
    pub input: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub graph: Option<PathBuf>,
}

/// Which shape-defining keys were set explicitly (file or flag); used to
/// detect conflicts with a loaded checkpoint.
#[derive(Debug, Default, Clone, Copy)]
pub struct ShapeProvided {
    pub channels: bool,
    pub dim: bool,
    pub channel_dim: bool,
    pub window: bool,
    pub max_len: bool,
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, Fail> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<u64>()
                .map_err(|_| Fail::Cli(format!("bad seed '{}' in --seeds", part.trim())))
        })
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(Fail::Cli("--seeds must list at least one seed".into()));
    }
    Ok(seeds)
}

/// defaults, then config file, then explicit flags.
pub fn resolve(config_path: Option<&Path>, ov: Overrides) -> Result<(RunConfig, ShapeProvided), Fail> {
    let mut cfg = RunConfig::default();
    let mut shape = ShapeProvided::default();

    let file = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Fail::Cli(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| Fail::Cli(format!("{}: {}", path.display(), first_line(&e.to_string()))))?
        }
        None => FileConfig::default(),
    };

    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = file.$field {
                cfg.$field = v;
            }
            if let Some(v) = ov.$field {
                cfg.$field = v;
            }
        };
    }
    macro_rules! take_opt {
        ($field:ident) => {
            if file.$field.is_some() {
                cfg.$field = file.$field;
            }
            if ov.$field.is_some() {
                cfg.$field = ov.$field;
            }
        };
    }

    shape.channels = file.channels.is_some() || ov.channels.is_some();
    shape.dim = file.dim.is_some() || ov.dim.is_some();
    shape.channel_dim = file.channel_dim.is_some() || ov.channel_dim.is_some();
    shape.window = file.window.is_some() || ov.window.is_some();
    shape.max_len = file.max_len.is_some() || ov.max_len.is_some();

    take!(channels);
    take!(dim);
    take!(channel_dim);
    take!(window);
    take!(max_len);
    take!(beta);
    take!(dropout);
    take!(lr);
    take!(batch_size);
    take!(epochs);
    take!(seed);
    take!(eval_every);
    take!(split);
    take!(tsv_header);
    take_opt!(patience);
    take_opt!(grad_clip);
    take_opt!(min_count);
    take_opt!(max_degree);
    take_opt!(baseline);

    if let Some(name) = file.ablation.as_deref() {
        cfg.ablation = name.parse().map_err(Fail::Lib)?;
    }
    if let Some(name) = ov.ablation.as_deref() {
        cfg.ablation = name.parse().map_err(Fail::Lib)?;
    }
    if let Some(name) = file.format.as_deref() {
        cfg.format = name.parse().map_err(Fail::Lib)?;
    }
    if let Some(name) = ov.format.as_deref() {
        cfg.format = name.parse().map_err(Fail::Lib)?;
    }
    if let Some(s) = file.seeds.as_deref() {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(s) = ov.seeds.as_deref() {
        cfg.seeds = parse_seeds(s)?;
    }

    if let Some(p) = file.input {
        cfg.input = Some(PathBuf::from(p));
    }
    if let Some(p) = file.data {
        cfg.data = Some(PathBuf::from(p));
    }
    if let Some(p) = file.out {
        cfg.out = Some(PathBuf::from(p));
    }
    if let Some(p) = file.graph {
        cfg.graph = Some(PathBuf::from(p));
    }
    if ov.input.is_some() {
        cfg.input = ov.input;
    }
    if ov.data.is_some() {
        cfg.data = ov.data;
    }
    if ov.out.is_some() {
        cfg.out = ov.out;
    }
    if ov.graph.is_some() {
        cfg.graph = ov.graph;
    }

    match cfg.split.as_str() {
        "valid" | "test" => {}
        other => return Err(Fail::Cli(format!("bad split '{other}' (expected valid or test)"))),
    }
    Ok((cfg, shape))
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("invalid value").to_string()
}

fn toml_float(x: f64) -> String {
    let s = format!("{x}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("nan") {
        s
    } else {
        format!("{s}.0")
    }
}

/// Flat TOML rendering with sorted keys. `with_paths` controls whether the
/// filesystem keys appear; the digest leaves them out so the same
/// experiment hashes identically wherever it runs.
pub fn render(cfg: &RunConfig, with_paths: bool) -> String {
    let mut pairs: Vec<(&str, String)> = vec![
        ("ablation", format!("\"{}\"", cfg.ablation.name())),
        ("batch_size", cfg.batch_size.to_string()),
        ("beta", toml_float(cfg.beta)),
        ("channel_dim", cfg.channel_dim.to_string()),
        ("channels", cfg.channels.to_string()),
        ("dim", cfg.dim.to_string()),
        ("dropout", toml_float(cfg.dropout)),
        ("epochs", cfg.epochs.to_string()),
        ("eval_every", cfg.eval_every.to_string()),
        ("format", format!("\"{}\"", cfg.format.name())),
        ("lr", toml_float(cfg.lr)),
        ("max_len", cfg.max_len.to_string()),
        ("seed", cfg.seed.to_string()),
        ("split", format!("\"{}\"", cfg.split)),
        ("tsv_header", cfg.tsv_header.to_string()),
        ("window", cfg.window.to_string()),
    ];
    if let Some(p) = cfg.patience {
        pairs.push(("patience", p.to_string()));
    }
    if let Some(g) = cfg.grad_clip {
        pairs.push(("grad_clip", toml_float(g)));
    }
    if let Some(m) = cfg.min_count {
        pairs.push(("min_count", m.to_string()));
    }
    if let Some(m) = cfg.max_degree {
        pairs.push(("max_degree", m.to_string()));
    }
    if !cfg.seeds.is_empty() {
        let list: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
        pairs.push(("seeds", format!("\"{}\"", list.join(","))));
    }
    if let Some(b) = &cfg.baseline {
        pairs.push(("baseline", format!("\"{b}\"")));
    }
    if with_paths {
        for (key, path) in [
            ("input", &cfg.input),
            ("data", &cfg.data),
            ("out", &cfg.out),
            ("graph", &cfg.graph),
        ] {
            if let Some(p) = path {
                pairs.push((key, format!("\"{}\"", p.display())));
            }
        }
    }
    pairs.sort_by_key(|&(k, _)| k);
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// Hex SHA-256 of the path-free rendering; identifies the experiment.
pub fn digest(cfg: &RunConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(render(cfg, false).as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Drop the resolved config into an output directory.
pub fn write_echo(cfg: &RunConfig, dir: &Path) -> Result<(), Fail> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Fail::Cli(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, render(cfg, true))
        .map_err(|e| Fail::Cli(format!("cannot write {}: {e}", path.display())))
}
