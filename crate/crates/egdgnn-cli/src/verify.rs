//! `egdgnn verify`: self-contained gradient and property checks that need
//! no input data. Each check prints one `VERIFY <name>: ...` line; any
//! failure makes the command exit nonzero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use egdgnn::error::Error;
use egdgnn::graph::build_global_graph;
use egdgnn::model::edge_channel_probs;
use egdgnn::model::global_aggregate_with_channel_norms;
use egdgnn::numerics::mix_seed;
use egdgnn::synth::clustered_corpus;
use egdgnn::tensor::Tensor;
use egdgnn::train::check_model_gradients;
use egdgnn::{train, Ablation, HyperParams, ModelParams, TrainConfig};

use crate::Fail;

/// Small shape where a full finite-difference sweep stays fast.
fn tiny_hyper(seed: u64) -> HyperParams {
    HyperParams {
        k: 2,
        d_in: 8,
        d_channel: 4,
        t: 8,
        l: 4,
        beta: 0.1,
        dropout: 0.0,
        lr: 0.002,
        batch_size: 8,
        epochs: 1,
        seed,
    }
}

fn gradient_check(name: &str, ablation: Ablation, seed: u64, failures: &mut usize) {
    match check_model_gradients(&tiny_hyper(seed), ablation, 20) {
        Ok(report) => println!(
            "VERIFY {name}: PASS (max rel err {:.2e} over {} entries)",
            report.max_rel, report.checked
        ),
        Err(e) => {
            println!("VERIFY {name}: FAIL ({e})");
            *failures += 1;
        }
    }
}

fn edge_simplex_symmetry(seed: u64, failures: &mut usize) {
    let k = 4;
    let d_in = 12;
    let d_channel = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7665_7269));
    let draw = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    };
    let channel_w: Vec<Tensor> = (0..k).map(|_| draw(&mut rng, &[d_in, d_channel])).collect();
    let mut worst_sum = 0.0_f64;
    for trial in 0..1000 {
        let h_i = draw(&mut rng, &[d_in]);
        let h_j = draw(&mut rng, &[d_in]);
        let forward = match edge_channel_probs(&h_i, &h_j, &channel_w) {
            Ok(p) => p,
            Err(e) => {
                println!("VERIFY edge-simplex-symmetry: FAIL (trial {trial}: {e})");
                *failures += 1;
                return;
            }
        };
        let backward = edge_channel_probs(&h_j, &h_i, &channel_w).unwrap();
        let sum: f64 = forward.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        if (sum - 1.0).abs() > 1e-9 {
            println!("VERIFY edge-simplex-symmetry: FAIL (trial {trial}: weights sum to {sum})");
            *failures += 1;
            return;
        }
        if forward.iter().zip(&backward).any(|(a, b)| a.to_bits() != b.to_bits()) {
            println!("VERIFY edge-simplex-symmetry: FAIL (trial {trial}: direction changes the weights)");
            *failures += 1;
            return;
        }
    }
    println!("VERIFY edge-simplex-symmetry: PASS (1000 edges, worst |sum-1| {worst_sum:.2e})");
}

fn channel_norms(seed: u64, failures: &mut usize) {
    let n_items = 300;
    let hyper = HyperParams { k: 3, d_in: 10, d_channel: 4, ..tiny_hyper(seed) };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6e6f_726d));
    let sequences: Vec<Vec<usize>> = (0..80)
        .map(|_| (0..20).map(|_| rng.random_range(1..=n_items)).collect())
        .collect();
    let result = (|| -> Result<f64, Error> {
        let graph = build_global_graph(sequences.iter().map(Vec::as_slice), n_items)?;
        let mut params = ModelParams::init(&hyper, n_items);
        for value in params.item_embed.data_mut().iter_mut() {
            *value = rng.random::<f64>() * 2.0 - 1.0;
        }
        params.item_embed.row_mut(0).fill(0.0);
        let (z_g, _) =
            global_aggregate_with_channel_norms(&graph, &params.item_embed, &params.channel_w)?;
        let mut worst = 0.0_f64;
        for item in 1..=n_items {
            for block in 0..hyper.k {
                let slice = &z_g.row(item)[block * hyper.d_channel..(block + 1) * hyper.d_channel];
                let norm: f64 = slice.iter().map(|&x| x * x).sum::<f64>().sqrt();
                worst = worst.max((norm - 1.0).abs());
            }
        }
        Ok(worst)
    })();
    match result {
        Ok(worst) if worst <= 1e-9 => {
            println!("VERIFY channel-norms: PASS ({n_items} items, worst |norm-1| {worst:.2e})")
        }
        Ok(worst) => {
            println!("VERIFY channel-norms: FAIL (worst |norm-1| {worst:.2e})");
            *failures += 1;
        }
        Err(e) => {
            println!("VERIFY channel-norms: FAIL ({e})");
            *failures += 1;
        }
    }
}

fn training_determinism(seed: u64, failures: &mut usize) {
    let result = (|| -> Result<bool, Error> {
        let (corpus, _) = clustered_corpus(24, 2, 8, 8, 0.8, mix_seed(seed, 0x6474_726e))?;
        let split = egdgnn::corpus::leave_one_out_split(&corpus);
        let graph = build_global_graph(split.train_sequences(), corpus.n_items())?;
        let hyper = HyperParams {
            t: 6,
            l: 3,
            dropout: 0.3,
            batch_size: 16,
            epochs: 2,
            seed,
            ..tiny_hyper(seed)
        };
        let mut outcomes = Vec::new();
        for _ in 0..2 {
            let dir = tempfile_dir()?;
            let config = TrainConfig::new(hyper, Ablation::Full, dir.join("run"));
            outcomes.push(train(&corpus, Some(&graph), &config)?);
            std::fs::remove_dir_all(&dir).ok();
        }
        Ok(outcomes[0].params.bits_equal(&outcomes[1].params))
    })();
    match result {
        Ok(true) => println!("VERIFY training-determinism: PASS (two runs, bit-identical parameters)"),
        Ok(false) => {
            println!("VERIFY training-determinism: FAIL (parameter bits differ between runs)");
            *failures += 1;
        }
        Err(e) => {
            println!("VERIFY training-determinism: FAIL ({e})");
            *failures += 1;
        }
    }
}

fn tempfile_dir() -> Result<std::path::PathBuf, Error> {
    let base = std::env::temp_dir().join(format!("egdgnn-verify-{}", std::process::id()));
    static NEXT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    let n = NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let dir = base.join(n.to_string());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn cmd_verify(seed: u64) -> Result<(), Fail> {
    let mut failures = 0usize;
    gradient_check("gradients-full", Ablation::Full, seed, &mut failures);
    gradient_check("gradients-global-only", Ablation::GlobalOnly, seed, &mut failures);
    gradient_check("gradients-local-only", Ablation::LocalOnly, seed, &mut failures);
    gradient_check("gradients-sliwin-only", Ablation::SliwinOnly, seed, &mut failures);
    gradient_check("gradients-sa-vae-only", Ablation::SaVaeOnly, seed, &mut failures);
    edge_simplex_symmetry(seed, &mut failures);
    channel_norms(seed, &mut failures);
    training_determinism(seed, &mut failures);
    if failures > 0 {
        Err(Fail::Lib(Error::Numerics(format!("{failures} verification check(s) failed"))))
    } else {
        println!("all verification checks passed");
        Ok(())
    }
}
