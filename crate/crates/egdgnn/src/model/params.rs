//! Learnable parameters, hyperparameters, initialization, checkpoints.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::mix_seed;
use crate::tensor::Tensor;

const CHECKPOINT_VERSION: u32 = 1;
const INIT_SALT: u64 = 0x696e_6974; // "init"

/// Model and optimization knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Number of disentanglement channels K.
    pub k: usize,
    /// Item embedding width.
    pub d_in: usize,
    /// Per-channel width.
    pub d_channel: usize,
    /// Window length T (maximum sequence length fed to the model).
    pub t: usize,
    /// Sliding-window span L: each position aggregates from up to L-1
    /// predecessors.
    pub l: usize,
    /// KL weight in the loss.
    pub beta: f64,
    /// Dropout rate on the embedding sum and the attention output.
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            k: 5,
            d_in: 100,
            d_channel: 20,
            t: 200,
            l: 4,
            beta: 0.1,
            dropout: 0.5,
            lr: 0.002,
            batch_size: 128,
            epochs: 10,
            seed: 42,
        }
    }
}

impl HyperParams {
    /// Concatenated channel width K·d_channel.
    pub fn kd(&self) -> usize {
        self.k * self.d_channel
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Model(msg));
        if self.k == 0 {
            return fail("channel count must be at least 1".into());
        }
        if self.d_in < 2 {
            return fail("d_in must be at least 2 (layer norm needs 2 entries)".into());
        }
        if self.d_channel == 0 {
            return fail("d_channel must be at least 1".into());
        }
        if self.t == 0 {
            return fail("window length must be at least 1".into());
        }
        if self.l < 2 {
            return fail(format!("sliding-window length must be at least 2, got {}", self.l));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta {} must be finite and non-negative", self.beta));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        Ok(())
    }
}

/// Which parts of the model participate in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Global graph layer + full local path.
    Full,
    /// Graph layer only; no attention, VAE, or sliding window, no KL term.
    GlobalOnly,
    /// Local path only (attention VAE + sliding window).
    LocalOnly,
    /// Attention VAE without the sliding window; the latent code itself is
    /// the local representation. Requires K·d_channel = d_in.
    SaVaeOnly,
    /// Sliding-window channel aggregation applied directly to the
    /// embeddings; no attention or VAE, no KL term.
    SliwinOnly,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::GlobalOnly => "global-only",
            Ablation::LocalOnly => "local-only",
            Ablation::SaVaeOnly => "sa-vae-only",
            Ablation::SliwinOnly => "sliwin-only",
        }
    }

    /// Does the forward pass build the global graph representation?
    pub fn uses_global(self) -> bool {
        matches!(self, Ablation::Full | Ablation::GlobalOnly)
    }

    /// Does the forward pass run the local sequence path?
    pub fn uses_local(self) -> bool {
        !matches!(self, Ablation::GlobalOnly)
    }

    /// Does the loss carry a KL term (is the VAE part of the graph)?
    pub fn uses_vae(self) -> bool {
        matches!(self, Ablation::Full | Ablation::LocalOnly | Ablation::SaVaeOnly)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "global-only" => Ok(Ablation::GlobalOnly),
            "local-only" => Ok(Ablation::LocalOnly),
            "sa-vae-only" => Ok(Ablation::SaVaeOnly),
            "sliwin-only" => Ok(Ablation::SliwinOnly),
            other => Err(Error::Model(format!(
                "unknown ablation '{other}' (expected full, global-only, local-only, sa-vae-only, or sliwin-only)"
            ))),
        }
    }
}

/// Every learnable array. The same parameter set is allocated regardless of
/// ablation so checkpoints stay shape-compatible and untouched parameters
/// can be shown to remain bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// (N+1) × d_in; row 0 is the padding item and is pinned to zero.
    pub item_embed: Tensor,
    /// T × d_in learnable position embeddings.
    pub pos_embed: Tensor,
    /// K channel projections, each d_in × d_channel, shared between the
    /// global and local layers.
    pub channel_w: Vec<Tensor>,
    pub attn_wq: Tensor,
    pub attn_wk: Tensor,
    pub attn_wv: Tensor,
    pub vae_mu_w: Tensor,
    pub vae_mu_b: Tensor,
    pub vae_logvar_w: Tensor,
    pub vae_logvar_b: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// (K·d_channel) × d_in combination maps of the prediction layer.
    pub combine_wg: Tensor,
    pub combine_wl: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

fn small_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data =
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

impl ModelParams {
    /// Seeded initialization: weight matrices uniform in
    /// ±√(6/(fan_in+fan_out)), embeddings normal with std 0.01, the
    /// log-variance bias at −2 so early σ ≈ 0.37, layer-norm affine at
    /// identity, padding row zero.
    pub fn init(hyper: &HyperParams, n_items: usize) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(hyper.seed, INIT_SALT));
        let d = hyper.d_in;
        let mut item_embed = small_normal(&mut rng, n_items + 1, d, 0.01);
        item_embed.row_mut(0).fill(0.0);
        let pos_embed = small_normal(&mut rng, hyper.t, d, 0.01);
        let channel_w =
            (0..hyper.k).map(|_| xavier(&mut rng, d, hyper.d_channel)).collect();
        ModelParams {
            item_embed,
            pos_embed,
            channel_w,
            attn_wq: xavier(&mut rng, d, d),
            attn_wk: xavier(&mut rng, d, d),
            attn_wv: xavier(&mut rng, d, d),
            vae_mu_w: xavier(&mut rng, d, d),
            vae_mu_b: Tensor::zeros(&[d]),
            vae_logvar_w: xavier(&mut rng, d, d),
            vae_logvar_b: Tensor::full(&[d], -2.0),
            ln_gain: Tensor::full(&[d], 1.0),
            ln_bias: Tensor::zeros(&[d]),
            combine_wg: xavier(&mut rng, hyper.kd(), d),
            combine_wl: xavier(&mut rng, hyper.kd(), d),
        }
    }

    pub fn n_items(&self) -> usize {
        self.item_embed.rows() - 1
    }

    pub fn k(&self) -> usize {
        self.channel_w.len()
    }

    /// Parameters in their canonical order with their canonical names.
    pub fn visit(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::with_capacity(13 + self.channel_w.len());
        out.push(("item_embed".into(), &self.item_embed));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, w) in self.channel_w.iter().enumerate() {
            out.push((format!("channel_w{i}"), w));
        }
        out.push(("attn_wq".into(), &self.attn_wq));
        out.push(("attn_wk".into(), &self.attn_wk));
        out.push(("attn_wv".into(), &self.attn_wv));
        out.push(("vae_mu_w".into(), &self.vae_mu_w));
        out.push(("vae_mu_b".into(), &self.vae_mu_b));
        out.push(("vae_logvar_w".into(), &self.vae_logvar_w));
        out.push(("vae_logvar_b".into(), &self.vae_logvar_b));
        out.push(("ln_gain".into(), &self.ln_gain));
        out.push(("ln_bias".into(), &self.ln_bias));
        out.push(("combine_wg".into(), &self.combine_wg));
        out.push(("combine_wl".into(), &self.combine_wl));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("item_embed".into(), &mut self.item_embed));
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (i, w) in self.channel_w.iter_mut().enumerate() {
            out.push((format!("channel_w{i}"), w));
        }
        out.push(("attn_wq".into(), &mut self.attn_wq));
        out.push(("attn_wk".into(), &mut self.attn_wk));
        out.push(("attn_wv".into(), &mut self.attn_wv));
        out.push(("vae_mu_w".into(), &mut self.vae_mu_w));
        out.push(("vae_mu_b".into(), &mut self.vae_mu_b));
        out.push(("vae_logvar_w".into(), &mut self.vae_logvar_w));
        out.push(("vae_logvar_b".into(), &mut self.vae_logvar_b));
        out.push(("ln_gain".into(), &mut self.ln_gain));
        out.push(("ln_bias".into(), &mut self.ln_bias));
        out.push(("combine_wg".into(), &mut self.combine_wg));
        out.push(("combine_wl".into(), &mut self.combine_wl));
        out
    }

    /// Names of the parameters that only the local path touches.
    pub fn local_only_names() -> &'static [&'static str] {
        &[
            "pos_embed",
            "attn_wq",
            "attn_wk",
            "attn_wv",
            "vae_mu_w",
            "vae_mu_b",
            "vae_logvar_w",
            "vae_logvar_b",
            "ln_gain",
            "ln_bias",
            "combine_wl",
        ]
    }

    pub fn total_scalars(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.len()).sum()
    }

    /// Bitwise equality, distinguishing 0.0 from -0.0 and treating equal
    /// NaN payloads as equal.
    pub fn bits_equal(&self, other: &ModelParams) -> bool {
        let a = self.visit();
        let b = other.visit();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn expected_shapes(hyper: &HyperParams, n_items: usize) -> Vec<(String, Vec<usize>)> {
        let d = hyper.d_in;
        let kd = hyper.kd();
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        out.push(("item_embed".into(), vec![n_items + 1, d]));
        out.push(("pos_embed".into(), vec![hyper.t, d]));
        for i in 0..hyper.k {
            out.push((format!("channel_w{i}"), vec![d, hyper.d_channel]));
        }
        for name in ["attn_wq", "attn_wk", "attn_wv", "vae_mu_w"] {
            out.push((name.into(), vec![d, d]));
        }
        out.push(("vae_mu_b".into(), vec![d]));
        out.push(("vae_logvar_w".into(), vec![d, d]));
        out.push(("vae_logvar_b".into(), vec![d]));
        out.push(("ln_gain".into(), vec![d]));
        out.push(("ln_bias".into(), vec![d]));
        out.push(("combine_wg".into(), vec![kd, d]));
        out.push(("combine_wl".into(), vec![kd, d]));
        out
    }

    pub fn validate_shapes(&self, hyper: &HyperParams, n_items: usize) -> Result<()> {
        let expected = ModelParams::expected_shapes(hyper, n_items);
        let actual = self.visit();
        if expected.len() != actual.len() {
            return Err(Error::Model(format!(
                "expected {} parameters, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an {
                return Err(Error::Model(format!("parameter order mismatch: {en} vs {an}")));
            }
            if es != at.shape() {
                return Err(Error::Model(format!(
                    "parameter {en} has shape {:?}, expected {es:?}",
                    at.shape()
                )));
            }
        }
        Ok(())
    }
}

// ---- checkpoints ----

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    epoch: usize,
    n_items: usize,
    hyper: HyperParams,
    params: Vec<ManifestParam>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// A checkpoint as loaded back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub hyper: HyperParams,
    pub n_items: usize,
    pub epoch: usize,
}

/// Write `manifest.json` plus one raw little-endian f64 file per parameter
/// (row-major, named `<parameter>.f64`) into `dir`.
pub fn save_checkpoint(
    params: &ModelParams,
    hyper: &HyperParams,
    epoch: usize,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        epoch,
        n_items: params.n_items(),
        hyper: *hyper,
        params: Vec::new(),
    };
    for (name, tensor) in params.visit() {
        let file = format!("{name}.f64");
        let path = dir.join(&file);
        fs::write(&path, tensor.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        manifest.params.push(ManifestParam {
            name,
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Model(format!("manifest serialization failed: {e}")))?;
    let path = dir.join("manifest.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Model(format!("{}: invalid manifest: {e}", manifest_path.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Model(format!(
            "checkpoint format version {} unsupported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.hyper.validate()?;

    let mut by_name: std::collections::HashMap<&str, Tensor> = std::collections::HashMap::new();
    for p in &manifest.params {
        let path = dir.join(&p.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let tensor = Tensor::from_le_bytes(&p.shape, &bytes).map_err(|e| {
            Error::Model(format!("parameter {}: {}", p.name, e.message()))
        })?;
        if by_name.insert(p.name.as_str(), tensor).is_some() {
            return Err(Error::Model(format!("duplicate parameter {} in manifest", p.name)));
        }
    }
    let mut take = |name: &str| -> Result<Tensor> {
        by_name
            .remove(name)
            .ok_or_else(|| Error::Model(format!("checkpoint is missing parameter {name}")))
    };
    let params = ModelParams {
        item_embed: take("item_embed")?,
        pos_embed: take("pos_embed")?,
        channel_w: (0..manifest.hyper.k)
            .map(|i| take(&format!("channel_w{i}")))
            .collect::<Result<Vec<_>>>()?,
        attn_wq: take("attn_wq")?,
        attn_wk: take("attn_wk")?,
        attn_wv: take("attn_wv")?,
        vae_mu_w: take("vae_mu_w")?,
        vae_mu_b: take("vae_mu_b")?,
        vae_logvar_w: take("vae_logvar_w")?,
        vae_logvar_b: take("vae_logvar_b")?,
        ln_gain: take("ln_gain")?,
        ln_bias: take("ln_bias")?,
        combine_wg: take("combine_wg")?,
        combine_wl: take("combine_wl")?,
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Model(format!("checkpoint has unexpected parameter {extra}")));
    }
    params.validate_shapes(&manifest.hyper, manifest.n_items)?;
    Ok(Checkpoint { params, hyper: manifest.hyper, n_items: manifest.n_items, epoch: manifest.epoch })
}
