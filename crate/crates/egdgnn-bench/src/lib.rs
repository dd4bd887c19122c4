//! Shared fixtures for the criterion benches: one synthetic corpus with its
//! item-link graph, initialized parameters, and a batch of training windows,
//! all at a fixed mid-size scale so numbers are comparable across runs.

use egdgnn::corpus::{leave_one_out_split, make_windows, PaddedWindow};
use egdgnn::graph::build_global_graph;
use egdgnn::synth::clustered_corpus;
use egdgnn::{GlobalGraph, HyperParams, ModelParams};

pub struct Fixture {
    pub hyper: HyperParams,
    pub params: ModelParams,
    pub graph: GlobalGraph,
    pub windows: Vec<PaddedWindow>,
}

/// 200 users over a 240-item catalog (4 clusters), window T=50, K=4
/// channels. Large enough that aggregation and attention dominate, small
/// enough that a full criterion pass stays in the seconds range.
pub fn fixture() -> Fixture {
    let (corpus, _) = clustered_corpus(200, 4, 60, 30, 0.8, 7).expect("valid fixture shape");
    let hyper = HyperParams {
        k: 4,
        d_in: 32,
        d_channel: 8,
        t: 50,
        l: 5,
        dropout: 0.0,
        ..HyperParams::default()
    };
    let split = leave_one_out_split(&corpus);
    let graph = build_global_graph(split.train_sequences(), corpus.n_items())
        .expect("fixture graph builds");
    let mut windows = Vec::new();
    for (_, view) in split.iter() {
        windows.extend(make_windows(view, hyper.t));
        if windows.len() >= 64 {
            break;
        }
    }
    windows.truncate(64);
    let params = ModelParams::init(&hyper, corpus.n_items());
    Fixture { hyper, params, graph, windows }
}
