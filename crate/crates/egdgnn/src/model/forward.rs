//! The model forward pass, recorded on a [`Tape`] so one code path serves
//! training (with gradients), evaluation (values only), and the public
//! layer-level operations.
//!
//! Shape conventions: item embeddings are (N+1)×d_in with row 0 the zero
//! padding row; a window of length T turns into T×d_in activations; the
//! channel layers produce T×(K·d_channel) (locally) or (N+1)×(K·d_channel)
//! (globally); the combined representation is a 1×d_in row.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::PaddedWindow;
use crate::error::{Error, Result};
use crate::graph::GlobalGraph;
use crate::numerics::{mix_seed, softmax_slice, GaussianSample};
use crate::tape::{DeadRows, NodeId, Tape};
use crate::tensor::Tensor;

use super::params::{Ablation, HyperParams, ModelParams};

/// Channel blocks with l2 norm below this pass through normalization
/// unchanged (the zero-degenerate case, e.g. the padding item).
pub const CHANNEL_NORM_EPS: f64 = 1e-12;

// ---- staging parameters onto a tape ----

pub(crate) struct StagedParams {
    pub all: Vec<NodeId>,
    item_embed: NodeId,
    pos_embed: NodeId,
    channel_w: Vec<NodeId>,
    attn_wq: NodeId,
    attn_wk: NodeId,
    attn_wv: NodeId,
    vae_mu_w: NodeId,
    vae_mu_b: NodeId,
    vae_logvar_w: NodeId,
    vae_logvar_b: NodeId,
    ln_gain: NodeId,
    ln_bias: NodeId,
    combine_wg: NodeId,
    combine_wl: NodeId,
    d_in: usize,
    d_channel: usize,
    t: usize,
    n_items: usize,
}

pub(crate) fn stage_params(tape: &Tape, params: &ModelParams) -> StagedParams {
    let visited = params.visit();
    let all: Vec<NodeId> = visited.iter().map(|(_, t)| tape.leaf((*t).clone())).collect();
    let k = params.channel_w.len();
    StagedParams {
        item_embed: all[0],
        pos_embed: all[1],
        channel_w: all[2..2 + k].to_vec(),
        attn_wq: all[2 + k],
        attn_wk: all[3 + k],
        attn_wv: all[4 + k],
        vae_mu_w: all[5 + k],
        vae_mu_b: all[6 + k],
        vae_logvar_w: all[7 + k],
        vae_logvar_b: all[8 + k],
        ln_gain: all[9 + k],
        ln_bias: all[10 + k],
        combine_wg: all[11 + k],
        combine_wl: all[12 + k],
        d_in: params.item_embed.cols(),
        d_channel: params.channel_w[0].cols(),
        t: params.pos_embed.rows(),
        n_items: params.n_items(),
        all,
    }
}

// ---- channel-aware aggregation (shared by global and local layers) ----

struct ChannelAggregate {
    /// Concatenated, per-channel-normalized output (rows × K·d_channel).
    out: NodeId,
    /// Per-pair channel weights (pairs × K).
    alpha: NodeId,
    /// Channel blocks before normalization (rows × d_channel each).
    pre_norm: Vec<NodeId>,
}

/// The channel-aware mechanism over an explicit directed pair list:
/// project the input through every channel with tanh, softmax the per-pair
/// channel similarities, add the weighted source projections to each
/// destination's own projection, l2-normalize per channel, concatenate.
fn channel_aggregate(
    tape: &Tape,
    input: NodeId,
    channel_w: &[NodeId],
    src: Rc<Vec<usize>>,
    dst: Rc<Vec<usize>>,
) -> Result<ChannelAggregate> {
    let proj: Vec<NodeId> =
        channel_w.iter().map(|&w| tape.tanh(tape.matmul(input, w))).collect();
    let scores: Vec<NodeId> =
        proj.iter().map(|&p| tape.edge_dot(p, src.clone(), dst.clone())).collect();
    let stacked = tape.stack_cols(&scores);
    let alpha = tape.softmax_rows(stacked, None, DeadRows::Error)?;
    let mut pre_norm = Vec::with_capacity(proj.len());
    let mut blocks = Vec::with_capacity(proj.len());
    for (k, &p) in proj.iter().enumerate() {
        let agg = tape.weighted_seg_sum(p, alpha, k, src.clone(), dst.clone());
        let summed = tape.add(p, agg);
        pre_norm.push(summed);
        blocks.push(tape.l2norm_rows(summed, CHANNEL_NORM_EPS));
    }
    Ok(ChannelAggregate { out: tape.concat_cols(&blocks), alpha, pre_norm })
}

pub(crate) struct GlobalBuild {
    pub z_g: NodeId,
    pub alpha: NodeId,
    pub pre_norm: Vec<NodeId>,
}

/// Global layer: channel aggregation over the item-link graph's directed
/// edge list, producing one row per catalog item (row 0 = padding stays
/// zero through its degenerate normalization).
pub(crate) fn global_layer_nodes(
    tape: &Tape,
    item_embed: NodeId,
    channel_w: &[NodeId],
    graph: &GlobalGraph,
) -> Result<GlobalBuild> {
    let (src, dst) = graph.directed_edges();
    let agg =
        channel_aggregate(tape, item_embed, channel_w, Rc::new(src), Rc::new(dst))?;
    Ok(GlobalBuild { z_g: agg.out, alpha: agg.alpha, pre_norm: agg.pre_norm })
}

/// Directed (source, destination) position pairs of the sliding window:
/// position `i` receives from positions `max(first_non_pad, i-L+1) ≤ j < i`.
fn sliding_window_pairs(t: usize, l: usize, first_non_pad: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for i in 0..t {
        let lo = first_non_pad.max(i.saturating_sub(l - 1));
        for j in lo..i {
            src.push(j);
            dst.push(i);
        }
    }
    (src, dst)
}

// ---- local path ----

/// Per-window randomness. `None` everywhere means evaluation semantics:
/// the latent code collapses to its mean and dropout is off.
pub(crate) struct WindowNoise {
    pub eps: Option<Tensor>,
    pub mask_h: Option<Tensor>,
    pub mask_d: Option<Tensor>,
}

impl WindowNoise {
    pub fn eval() -> Self {
        WindowNoise { eps: None, mask_h: None, mask_d: None }
    }

    pub fn sampled(t: usize, d_in: usize, seed: u64, dropout: f64) -> Self {
        let eps = GaussianSample::draw(&[t, d_in], seed, 0).epsilon().clone();
        let (mask_h, mask_d) = if dropout > 0.0 {
            (
                Some(dropout_mask(t, d_in, dropout, mix_seed(seed, 1))),
                Some(dropout_mask(t, d_in, dropout, mix_seed(seed, 2))),
            )
        } else {
            (None, None)
        };
        WindowNoise { eps: Some(eps), mask_h, mask_d }
    }
}

/// Inverted-scaling dropout mask: 0 with probability `rate`, otherwise
/// 1/(1-rate), so the expectation is the identity and evaluation needs no
/// rescaling.
fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
        .collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

pub(crate) struct SaVaeBuild {
    pub attn: NodeId,
    pub h_s: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
    pub sigma: NodeId,
    pub z_v: NodeId,
}

/// Self-attention VAE over a window: embeddings + positions (with optional
/// dropout), single-head causal+padding-masked attention, residual layer
/// norm, Gaussian heads, reparameterized latent code.
fn sa_vae_nodes(
    tape: &Tape,
    sp: &StagedParams,
    window: &PaddedWindow,
    noise: &WindowNoise,
) -> Result<(NodeId, SaVaeBuild)> {
    let t = sp.t;
    let gathered = tape.gather_rows(sp.item_embed, window.indices.clone());
    let h0 = tape.add(gathered, sp.pos_embed);
    let h = match &noise.mask_h {
        Some(m) => tape.mul_const(h0, m.clone()),
        None => h0,
    };
    let q = tape.matmul(h, sp.attn_wq);
    let k = tape.matmul(h, sp.attn_wk);
    let v = tape.matmul(h, sp.attn_wv);
    let logits = tape.scale(tape.matmul_nt(q, k), 1.0 / (sp.d_in as f64).sqrt());
    // Disallow attention to future positions and to padding; padding
    // queries have no valid key and get an all-zero weight row.
    let mut mask = Tensor::zeros(&[t, t]);
    for qi in 0..t {
        for ki in 0..t {
            if ki > qi || window.indices[ki] == 0 {
                *mask.at_mut(qi, ki) = 1.0;
            }
        }
    }
    let attn = tape.softmax_rows(logits, Some(&mask), DeadRows::ZeroFill)?;
    let d0 = tape.matmul(attn, v);
    let d = match &noise.mask_d {
        Some(m) => tape.mul_const(d0, m.clone()),
        None => d0,
    };
    let res = tape.add(d, h);
    let h_s = tape.layer_norm(res, sp.ln_gain, sp.ln_bias);
    let mu = tape.add_bias(tape.matmul(h_s, sp.vae_mu_w), sp.vae_mu_b);
    let logvar = tape.add_bias(tape.matmul(h_s, sp.vae_logvar_w), sp.vae_logvar_b);
    let sigma = tape.exp(tape.scale(logvar, 0.5));
    let z_v = match &noise.eps {
        Some(eps) => tape.add(mu, tape.mul_const(sigma, eps.clone())),
        None => mu,
    };
    Ok((h, SaVaeBuild { attn, h_s, mu, logvar, sigma, z_v }))
}

pub(crate) struct LocalBuild {
    pub sa: Option<SaVaeBuild>,
    pub z_l: Option<NodeId>,
    /// The 1×width row entering the prediction combination.
    pub repr: NodeId,
}

fn local_layer_nodes(
    tape: &Tape,
    sp: &StagedParams,
    window: &PaddedWindow,
    l: usize,
    ablation: Ablation,
    noise: &WindowNoise,
) -> Result<LocalBuild> {
    let t = sp.t;
    if window.indices.len() != t {
        return Err(Error::Model(format!(
            "window length {} does not match the model's T={t}",
            window.indices.len()
        )));
    }
    let first_non_pad = window.first_non_pad();
    if first_non_pad == t {
        return Err(Error::Model("window is entirely padding".into()));
    }
    for &i in &window.indices {
        if i > sp.n_items {
            return Err(Error::Model(format!(
                "window item index {i} outside 0..={}",
                sp.n_items
            )));
        }
    }

    let (h, sa) = if ablation == Ablation::SliwinOnly {
        // No attention/VAE: the sliding window runs on the embeddings.
        let gathered = tape.gather_rows(sp.item_embed, window.indices.clone());
        let h0 = tape.add(gathered, sp.pos_embed);
        let h = match &noise.mask_h {
            Some(m) => tape.mul_const(h0, m.clone()),
            None => h0,
        };
        (h, None)
    } else {
        let (h, sa) = sa_vae_nodes(tape, sp, window, noise)?;
        (h, Some(sa))
    };

    if ablation == Ablation::SaVaeOnly {
        let sa = sa.expect("sa-vae-only builds the attention VAE");
        if sp.channel_w.len() * sp.d_channel != sp.d_in {
            return Err(Error::Model(format!(
                "sa-vae-only needs k*d_channel == d_in to reuse the combination map, got {}*{} vs {}",
                sp.channel_w.len(),
                sp.d_channel,
                sp.d_in
            )));
        }
        let repr = tape.select_row(sa.z_v, t - 1);
        return Ok(LocalBuild { sa: Some(sa), z_l: None, repr });
    }

    let z_base = match &sa {
        Some(s) => s.z_v,
        None => h,
    };
    let (src, dst) = sliding_window_pairs(t, l, first_non_pad);
    let agg =
        channel_aggregate(tape, z_base, &sp.channel_w, Rc::new(src), Rc::new(dst))?;
    let repr = tape.select_row(agg.out, t - 1);
    Ok(LocalBuild { sa, z_l: Some(agg.out), repr })
}

// ---- per-window objective ----

pub(crate) struct WindowBuild {
    pub local: Option<LocalBuild>,
    pub z: NodeId,
    pub scores: NodeId,
    pub recon: NodeId,
    pub kl: Option<NodeId>,
}

/// Combined representation of one window plus its loss terms. `z_g` is the
/// global layer output node when the ablation uses it (either live, with
/// gradients, or a frozen leaf for evaluation).
pub(crate) fn window_nodes(
    tape: &Tape,
    sp: &StagedParams,
    z_g: Option<NodeId>,
    window: &PaddedWindow,
    hyper: &HyperParams,
    ablation: Ablation,
    noise: &WindowNoise,
) -> Result<WindowBuild> {
    if window.target == 0 || window.target > sp.n_items {
        return Err(Error::Model(format!(
            "window target {} outside 1..={}",
            window.target,
            sp.n_items
        )));
    }
    let repr = window_representation(tape, sp, z_g, window, hyper, ablation, noise)?;
    let scores = tape.catalog_scores(repr.z, sp.item_embed);
    let recon = tape.softmax_bce(scores, window.target - 1);
    let kl = match (&repr.local, ablation.uses_vae()) {
        (Some(local), true) => {
            let sa = local.sa.as_ref().expect("vae ablations build the attention VAE");
            Some(tape.gauss_kl(sa.mu, sa.logvar))
        }
        _ => None,
    };
    Ok(WindowBuild { local: repr.local, z: repr.z, scores, recon, kl })
}

pub(crate) struct ReprBuild {
    pub local: Option<LocalBuild>,
    pub z: NodeId,
}

/// Just the combined 1×d_in representation (no catalog scores); the
/// evaluation scorer stops here.
pub(crate) fn window_representation(
    tape: &Tape,
    sp: &StagedParams,
    z_g: Option<NodeId>,
    window: &PaddedWindow,
    hyper: &HyperParams,
    ablation: Ablation,
    noise: &WindowNoise,
) -> Result<ReprBuild> {
    let global_term = if ablation.uses_global() {
        let z_g = z_g.ok_or_else(|| {
            Error::Model("this ablation needs the global layer output".into())
        })?;
        let last_item = *window.indices.last().expect("windows are non-empty");
        if last_item == 0 {
            return Err(Error::Model("window is entirely padding".into()));
        }
        let row = tape.select_row(z_g, last_item);
        Some(tape.matmul(row, sp.combine_wg))
    } else {
        None
    };
    let (local, local_term) = if ablation.uses_local() {
        let local = local_layer_nodes(tape, sp, window, hyper.l, ablation, noise)?;
        let term = tape.matmul(local.repr, sp.combine_wl);
        (Some(local), Some(term))
    } else {
        (None, None)
    };
    let z = match (global_term, local_term) {
        (Some(g), Some(l)) => tape.add(g, l),
        (Some(g), None) => g,
        (None, Some(l)) => l,
        (None, None) => unreachable!("every ablation uses at least one path"),
    };
    Ok(ReprBuild { local, z })
}

// ---- batch objective ----

/// Randomness policy for a whole batch.
#[derive(Debug, Clone, Copy)]
pub enum BatchNoise {
    /// Posterior mean, no dropout (evaluation and gradient-free probes).
    Eval,
    /// Fresh ε per window derived from `seed`; dropout masks when
    /// `dropout > 0`. Fully deterministic given the seed.
    Sampled { seed: u64, dropout: f64 },
}

impl BatchNoise {
    fn window_noise(&self, widx: usize, t: usize, d_in: usize) -> WindowNoise {
        match *self {
            BatchNoise::Eval => WindowNoise::eval(),
            BatchNoise::Sampled { seed, dropout } => {
                WindowNoise::sampled(t, d_in, mix_seed(seed, widx as u64), dropout)
            }
        }
    }
}

/// Loss terms of one batch; gradients in canonical parameter order when
/// requested.
#[derive(Debug)]
pub struct BatchOutcome {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub grads: Option<Vec<(String, Tensor)>>,
}

/// Mean loss over a batch of windows, optionally with gradients for every
/// parameter. The global layer is built once per batch from the current
/// embeddings, inside the tape, so its parameters train too.
///
/// The batch loss node is assembled as `mean(recon) + beta * mean(kl)` so
/// the logged components reproduce the optimized scalar exactly.
pub fn batch_objective(
    params: &ModelParams,
    hyper: &HyperParams,
    ablation: Ablation,
    graph: Option<&GlobalGraph>,
    windows: &[PaddedWindow],
    noise: BatchNoise,
    want_grads: bool,
) -> Result<BatchOutcome> {
    hyper.validate()?;
    params.validate_shapes(hyper, params.n_items())?;
    if windows.is_empty() {
        return Err(Error::Model("cannot take the objective of an empty batch".into()));
    }
    let tape = Tape::new();
    let sp = stage_params(&tape, params);
    let z_g = if ablation.uses_global() {
        let graph = graph.ok_or_else(|| {
            Error::Model(format!("ablation {} needs the global graph", ablation.name()))
        })?;
        if graph.n_items() != sp.n_items {
            return Err(Error::Model(format!(
                "graph has {} items but the embedding table has {}",
                graph.n_items(),
                sp.n_items
            )));
        }
        Some(global_layer_nodes(&tape, sp.item_embed, &sp.channel_w, graph)?.z_g)
    } else {
        None
    };

    let mut recons = Vec::with_capacity(windows.len());
    let mut kls = Vec::with_capacity(windows.len());
    for (widx, window) in windows.iter().enumerate() {
        let noise_w = noise.window_noise(widx, sp.t, sp.d_in);
        let built = window_nodes(&tape, &sp, z_g, window, hyper, ablation, &noise_w)?;
        recons.push(built.recon);
        if let Some(kl) = built.kl {
            kls.push(kl);
        }
    }
    let mean_recon = tape.mean_scalars(&recons)?;
    let recon = tape.value(mean_recon).data()[0];
    let (loss_node, kl) = if kls.is_empty() {
        (mean_recon, 0.0)
    } else {
        let mean_kl = tape.mean_scalars(&kls)?;
        let scaled = tape.scale(mean_kl, hyper.beta);
        (tape.add(mean_recon, scaled), tape.value(mean_kl).data()[0])
    };
    let loss = tape.value(loss_node).data()[0];
    if !loss.is_finite() {
        return Err(Error::Model(format!("batch loss is not finite ({loss})")));
    }
    let grads = if want_grads {
        let raw = tape.backward(loss_node, &sp.all)?;
        let names = params.visit().into_iter().map(|(n, _)| n);
        Some(names.zip(raw).collect())
    } else {
        None
    };
    Ok(BatchOutcome { loss, recon, kl, grads })
}

/// Parameters flattened to a tensor list in canonical order (for the
/// finite-difference checker).
pub fn params_to_vec(params: &ModelParams) -> Vec<Tensor> {
    params.visit().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Rebuild a parameter struct from tensors in canonical order.
pub fn params_from_vec(template: &ModelParams, values: &[Tensor]) -> ModelParams {
    let mut out = template.clone();
    {
        let slots = out.visit_mut();
        assert_eq!(slots.len(), values.len(), "parameter count mismatch");
        for ((_, slot), value) in slots.into_iter().zip(values) {
            assert_eq!(slot.shape(), value.shape(), "parameter shape mismatch");
            *slot = value.clone();
        }
    }
    out
}

// ---- evaluation scorer ----

/// Frozen-parameter scorer: computes the global representations once, then
/// scores candidate items per user prefix with evaluation semantics
/// (posterior mean, no dropout).
pub struct Scorer<'a> {
    params: &'a ModelParams,
    hyper: HyperParams,
    ablation: Ablation,
    z_g: Option<Tensor>,
}

impl<'a> Scorer<'a> {
    pub fn new(
        params: &'a ModelParams,
        hyper: &HyperParams,
        ablation: Ablation,
        graph: Option<&GlobalGraph>,
    ) -> Result<Self> {
        hyper.validate()?;
        params.validate_shapes(hyper, params.n_items())?;
        let z_g = if ablation.uses_global() {
            let graph = graph.ok_or_else(|| {
                Error::Model(format!("ablation {} needs the global graph", ablation.name()))
            })?;
            Some(global_aggregate(graph, &params.item_embed, &params.channel_w)?)
        } else {
            None
        };
        Ok(Scorer { params, hyper: *hyper, ablation, z_g })
    }

    /// The global representation table, when this ablation builds one.
    pub fn global_representations(&self) -> Option<&Tensor> {
        self.z_g.as_ref()
    }

    /// Combined 1×d_in representation of a user prefix. Errors if the
    /// prefix is empty (there is nothing to condition on).
    pub fn representation(&self, prefix: &[usize]) -> Result<Tensor> {
        if prefix.is_empty() {
            return Err(Error::Model("cannot score an empty history".into()));
        }
        let window = crate::corpus::window_from_prefix(prefix, self.hyper.t, 1);
        let tape = Tape::new();
        let sp = stage_params(&tape, self.params);
        let z_g = self.z_g.as_ref().map(|t| tape.leaf(t.clone()));
        let built = window_representation(
            &tape,
            &sp,
            z_g,
            &window,
            &self.hyper,
            self.ablation,
            &WindowNoise::eval(),
        )?;
        Ok(tape.value(built.z))
    }

    /// Dot-product scores of candidate items against the prefix
    /// representation, in candidate order.
    pub fn score_candidates(&self, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        let z = self.representation(prefix)?;
        let zr = z.data();
        let mut out = Vec::with_capacity(candidates.len());
        for &c in candidates {
            if c == 0 || c > self.params.n_items() {
                return Err(Error::Model(format!(
                    "candidate item {c} outside 1..={}",
                    self.params.n_items()
                )));
            }
            let row = self.params.item_embed.row(c);
            out.push(row.iter().zip(zr).map(|(&a, &b)| a * b).sum());
        }
        Ok(out)
    }
}

// ---- full-model trace ----

/// Every intermediate of a full-model forward pass on one window,
/// extracted as plain tensors.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// (N+1) × K·d_channel global representations.
    pub z_g: Tensor,
    /// T × T attention weights (rows = queries).
    pub attn_weights: Tensor,
    /// T × d_in attention output after residual + layer norm.
    pub h_s: Tensor,
    pub mu_v: Tensor,
    pub sigma_v: Tensor,
    pub z_v: Tensor,
    /// T × K·d_channel sliding-window representations.
    pub z_l: Tensor,
    /// 1 × d_in combined representation.
    pub z: Tensor,
    /// Catalog distribution over items 1..=N (length N, sums to 1).
    pub y_hat: Tensor,
}

/// Run the full model on one window and extract all intermediates.
/// `sample` carries the reparameterization noise; `None` uses the
/// posterior mean. Dropout is off (this is an inspection path).
pub fn forward_trace(
    params: &ModelParams,
    hyper: &HyperParams,
    graph: &GlobalGraph,
    window: &PaddedWindow,
    sample: Option<&GaussianSample>,
) -> Result<ForwardTrace> {
    hyper.validate()?;
    params.validate_shapes(hyper, params.n_items())?;
    let tape = Tape::new();
    let sp = stage_params(&tape, params);
    if graph.n_items() != sp.n_items {
        return Err(Error::Model(format!(
            "graph has {} items but the embedding table has {}",
            graph.n_items(),
            sp.n_items
        )));
    }
    let noise = match sample {
        Some(s) => {
            if s.epsilon().shape() != [sp.t, sp.d_in] {
                return Err(Error::Model(format!(
                    "noise sample shape {:?} does not match window activations {}x{}",
                    s.epsilon().shape(),
                    sp.t,
                    sp.d_in
                )));
            }
            WindowNoise { eps: Some(s.epsilon().clone()), mask_h: None, mask_d: None }
        }
        None => WindowNoise::eval(),
    };
    let z_g = global_layer_nodes(&tape, sp.item_embed, &sp.channel_w, graph)?.z_g;
    let built = window_nodes(&tape, &sp, Some(z_g), window, hyper, Ablation::Full, &noise)?;
    let local = built.local.as_ref().expect("full model has a local path");
    let sa = local.sa.as_ref().expect("full model has an attention VAE");
    let mut y_hat = tape.value(built.scores);
    softmax_slice(y_hat.data_mut());
    Ok(ForwardTrace {
        z_g: tape.value(z_g),
        attn_weights: tape.value(sa.attn),
        h_s: tape.value(sa.h_s),
        mu_v: tape.value(sa.mu),
        sigma_v: tape.value(sa.sigma),
        z_v: tape.value(sa.z_v),
        z_l: tape.value(local.z_l.expect("full model aggregates the window")),
        z: tape.value(built.z),
        y_hat,
    })
}

// ---- public layer-level operations ----

/// Per-edge channel probabilities: softmax over the K per-channel
/// similarities tanh(W_kᵀh_i)·tanh(W_kᵀh_j). Symmetric in (h_i, h_j) down
/// to the bit level, and always a point on the K-simplex.
pub fn edge_channel_probs(
    h_i: &Tensor,
    h_j: &Tensor,
    channel_w: &[Tensor],
) -> Result<Vec<f64>> {
    if channel_w.is_empty() {
        return Err(Error::Model("need at least one channel projection".into()));
    }
    let mut scores = Vec::with_capacity(channel_w.len());
    for w in channel_w {
        let pi = h_i.matmul(w)?.map(f64::tanh);
        let pj = h_j.matmul(w)?.map(f64::tanh);
        scores.push(pi.dot(&pj)?);
    }
    softmax_slice(&mut scores);
    Ok(scores)
}

/// Global channel-aware aggregation over the whole catalog; returns the
/// (N+1) × K·d_channel table (row 0 is the zero padding row).
pub fn global_aggregate(
    graph: &GlobalGraph,
    item_embed: &Tensor,
    channel_w: &[Tensor],
) -> Result<Tensor> {
    Ok(global_aggregate_with_channel_norms(graph, item_embed, channel_w)?.0)
}

/// Global aggregation plus each item's per-channel block norms *before*
/// normalization (the strengths the channel-assignment export uses; after
/// normalization every non-degenerate block has norm 1).
pub fn global_aggregate_with_channel_norms(
    graph: &GlobalGraph,
    item_embed: &Tensor,
    channel_w: &[Tensor],
) -> Result<(Tensor, Tensor)> {
    if item_embed.rows() != graph.n_items() + 1 {
        return Err(Error::Model(format!(
            "embedding table has {} rows, expected {} (catalog + padding row)",
            item_embed.rows(),
            graph.n_items() + 1
        )));
    }
    if channel_w.is_empty() {
        return Err(Error::Model("need at least one channel projection".into()));
    }
    let tape = Tape::new();
    let ie = tape.leaf(item_embed.clone());
    let ws: Vec<NodeId> = channel_w.iter().map(|w| tape.leaf(w.clone())).collect();
    let build = global_layer_nodes(&tape, ie, &ws, graph)?;
    let rows = item_embed.rows();
    let k = channel_w.len();
    let mut norms = Tensor::zeros(&[rows, k]);
    for (kk, &pre) in build.pre_norm.iter().enumerate() {
        let val = tape.value(pre);
        for r in 0..rows {
            let n = val.row(r).iter().map(|&v| v * v).sum::<f64>().sqrt();
            *norms.at_mut(r, kk) = n;
        }
    }
    Ok((tape.value(build.z_g), norms))
}

/// The directed edge list of the global layer together with the channel
/// weights it actually assigns to each edge: `(src, dst, alpha)` where
/// `alpha` has one row per directed edge and K columns on the simplex.
pub fn global_edge_channel_weights(
    graph: &GlobalGraph,
    item_embed: &Tensor,
    channel_w: &[Tensor],
) -> Result<(Vec<usize>, Vec<usize>, Tensor)> {
    if item_embed.rows() != graph.n_items() + 1 {
        return Err(Error::Model(format!(
            "embedding table has {} rows, expected {} (catalog + padding row)",
            item_embed.rows(),
            graph.n_items() + 1
        )));
    }
    if channel_w.is_empty() {
        return Err(Error::Model("need at least one channel projection".into()));
    }
    let tape = Tape::new();
    let ie = tape.leaf(item_embed.clone());
    let ws: Vec<NodeId> = channel_w.iter().map(|w| tape.leaf(w.clone())).collect();
    let build = global_layer_nodes(&tape, ie, &ws, graph)?;
    let (src, dst) = graph.directed_edges();
    Ok((src, dst, tape.value(build.alpha)))
}

/// Dropout behavior of the public attention-VAE entry point.
#[derive(Debug, Clone, Copy)]
pub enum DropoutMode {
    Disabled,
    Enabled { rate: f64, seed: u64 },
}

/// Attention-VAE forward for one window: returns (h_s, μ, σ, z_v), each
/// T × d_in. Errors when the window is entirely padding.
pub fn sa_vae_forward(
    window: &PaddedWindow,
    params: &ModelParams,
    sample: &GaussianSample,
    dropout: DropoutMode,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let tape = Tape::new();
    let sp = stage_params(&tape, params);
    if window.indices.len() != sp.t {
        return Err(Error::Model(format!(
            "window length {} does not match the model's T={}",
            window.indices.len(),
            sp.t
        )));
    }
    if window.first_non_pad() == sp.t {
        return Err(Error::Model("window is entirely padding".into()));
    }
    if sample.epsilon().shape() != [sp.t, sp.d_in] {
        return Err(Error::Model(format!(
            "noise sample shape {:?} does not match window activations {}x{}",
            sample.epsilon().shape(),
            sp.t,
            sp.d_in
        )));
    }
    let (mask_h, mask_d) = match dropout {
        DropoutMode::Disabled => (None, None),
        DropoutMode::Enabled { rate, seed } => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Model(format!("dropout rate {rate} outside [0, 1)")));
            }
            if rate == 0.0 {
                (None, None)
            } else {
                (
                    Some(dropout_mask(sp.t, sp.d_in, rate, mix_seed(seed, 1))),
                    Some(dropout_mask(sp.t, sp.d_in, rate, mix_seed(seed, 2))),
                )
            }
        }
    };
    let noise = WindowNoise { eps: Some(sample.epsilon().clone()), mask_h, mask_d };
    let (_, sa) = sa_vae_nodes(&tape, &sp, window, &noise)?;
    Ok((tape.value(sa.h_s), tape.value(sa.mu), tape.value(sa.sigma), tape.value(sa.z_v)))
}

/// Sliding-window channel aggregation over per-position vectors. Position
/// `i` aggregates from positions `max(first_non_pad, i-L+1) ≤ j < i`;
/// positions before `first_non_pad` keep their normalized self term.
pub fn local_window_aggregate(
    z_v: &Tensor,
    channel_w: &[Tensor],
    l: usize,
    first_non_pad: usize,
) -> Result<Tensor> {
    if l < 2 {
        return Err(Error::Model(format!("sliding-window length must be at least 2, got {l}")));
    }
    if channel_w.is_empty() {
        return Err(Error::Model("need at least one channel projection".into()));
    }
    let t = z_v.rows();
    let tape = Tape::new();
    let zv = tape.leaf(z_v.clone());
    let ws: Vec<NodeId> = channel_w.iter().map(|w| tape.leaf(w.clone())).collect();
    let (src, dst) = sliding_window_pairs(t, l, first_non_pad);
    let agg = channel_aggregate(&tape, zv, &ws, Rc::new(src), Rc::new(dst))?;
    Ok(tape.value(agg.out))
}

/// Prediction layer: combine the global representation of the anchor item
/// with the local representation and softmax the catalog dot products.
/// Returns the length-N distribution over items 1..=N.
pub fn combine_and_score(
    z_g_target: &Tensor,
    z_l: &Tensor,
    combine_wg: &Tensor,
    combine_wl: &Tensor,
    item_embed: &Tensor,
) -> Result<Tensor> {
    let g = z_g_target.matmul(combine_wg)?;
    let l = z_l.matmul(combine_wl)?;
    let z = g.add(&l)?;
    let n = item_embed.rows() - 1;
    let mut scores = Vec::with_capacity(n);
    for i in 1..=n {
        scores.push(item_embed.row(i).iter().zip(z.data()).map(|(&a, &b)| a * b).sum());
    }
    let mut y_hat = Tensor::from_vec(scores);
    softmax_slice(y_hat.data_mut());
    Ok(y_hat)
}

/// Negated β-ELBO of one prediction: full-catalog binary cross entropy of
/// the one-hot target against ŷ (log arguments clamped at 1e-12) plus
/// β · KL(N(μ, σ²) ‖ N(0, I)). Returns (loss, recon, kl).
pub fn elbo_loss(
    y_hat: &Tensor,
    target: usize,
    mu_v: &Tensor,
    sigma_v: &Tensor,
    beta: f64,
) -> Result<(f64, f64, f64)> {
    let n = y_hat.len();
    if target == 0 || target > n {
        return Err(Error::Model(format!("target {target} outside 1..={n}")));
    }
    if mu_v.shape() != sigma_v.shape() {
        return Err(Error::Model(format!(
            "mu shape {:?} does not match sigma shape {:?}",
            mu_v.shape(),
            sigma_v.shape()
        )));
    }
    const CLAMP: f64 = 1e-12;
    let mut recon = 0.0;
    for (i, &p) in y_hat.data().iter().enumerate() {
        if i == target - 1 {
            recon -= p.max(CLAMP).ln();
        } else {
            recon -= (1.0 - p).max(CLAMP).ln();
        }
    }
    let mut kl = 0.0;
    for (&m, &s) in mu_v.data().iter().zip(sigma_v.data()) {
        if s <= 0.0 {
            return Err(Error::Model(format!("sigma must be positive, got {s}")));
        }
        kl += m * m + s * s - (s * s).ln() - 1.0;
    }
    kl *= 0.5;
    Ok((recon + beta * kl, recon, kl))
}
