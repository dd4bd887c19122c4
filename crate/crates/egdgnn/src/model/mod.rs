//! Model parameters and the forward pass.

pub mod forward;
pub mod params;

pub use forward::{
    batch_objective, combine_and_score, edge_channel_probs, elbo_loss, forward_trace,
    global_aggregate, global_aggregate_with_channel_norms, global_edge_channel_weights,
    local_window_aggregate, params_from_vec, params_to_vec, sa_vae_forward, BatchNoise,
    BatchOutcome, DropoutMode, ForwardTrace, Scorer,
};
pub use params::{
    load_checkpoint, save_checkpoint, Ablation, Checkpoint, HyperParams, ModelParams,
};
