//! Synthetic interaction generators used by the test suite and the demo
//! pipeline: a clustered Markov corpus with known latent structure, and a
//! rating-log writer in the `user::item::rating::timestamp` format.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::InteractionCorpus;
use crate::error::{Error, Result};
use crate::numerics::mix_seed;

/// Catalog of `n_clusters * items_per_cluster` items where consecutive
/// items stay inside the current item's cluster with probability
/// `p_within`. Returns the corpus plus the true cluster of each item
/// (index 0 is item 1).
pub fn clustered_corpus(
    n_users: usize,
    n_clusters: usize,
    items_per_cluster: usize,
    seq_len: usize,
    p_within: f64,
    seed: u64,
) -> Result<(InteractionCorpus, Vec<usize>)> {
    if n_clusters < 2 || items_per_cluster < 2 {
        return Err(Error::Corpus(
            "clustered corpus needs at least 2 clusters of at least 2 items".into(),
        ));
    }
    if seq_len < 3 {
        return Err(Error::Corpus("sequences shorter than 3 cannot be split".into()));
    }
    if !(0.0..=1.0).contains(&p_within) {
        return Err(Error::Corpus(format!("p_within {p_within} outside [0, 1]")));
    }
    let n_items = n_clusters * items_per_cluster;
    let cluster_of = |item: usize| (item - 1) / items_per_cluster;

    let mut user_ids = Vec::with_capacity(n_users);
    let mut sequences = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u as u64));
        let mut seq = Vec::with_capacity(seq_len);
        let mut current = rng.random_range(1..=n_items);
        seq.push((current, 0_i64));
        for step in 1..seq_len {
            let c = cluster_of(current);
            let next = if rng.random::<f64>() < p_within {
                // any cluster mate except the current item itself
                let mut pick = rng.random_range(0..items_per_cluster - 1);
                let base = c * items_per_cluster + 1;
                if base + pick >= current {
                    pick += 1;
                }
                base + pick
            } else {
                let other = (c + 1 + rng.random_range(0..n_clusters - 1)) % n_clusters;
                other * items_per_cluster + 1 + rng.random_range(0..items_per_cluster)
            };
            seq.push((next, step as i64));
            current = next;
        }
        user_ids.push(format!("u{u}"));
        sequences.push(seq);
    }
    let item_ids: Vec<String> = (1..=n_items).map(|i| format!("i{i}")).collect();
    let corpus = InteractionCorpus::from_sequences(user_ids, item_ids, sequences)?;
    let truth: Vec<usize> = (1..=n_items).map(cluster_of).collect();
    Ok((corpus, truth))
}

/// Clustering purity: each predicted group votes for its dominant true
/// cluster; purity is the fraction of points covered by those votes.
pub fn purity(assignment: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(assignment.len(), truth.len(), "assignment and truth must align");
    assert!(!assignment.is_empty(), "purity of an empty assignment");
    let n_pred = assignment.iter().max().unwrap() + 1;
    let n_true = truth.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0_usize; n_true]; n_pred];
    for (&a, &t) in assignment.iter().zip(truth) {
        counts[a][t] += 1;
    }
    let covered: usize = counts.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum();
    covered as f64 / assignment.len() as f64
}

/// Parameters for the rating-log generator.
#[derive(Debug, Clone)]
pub struct RatingLogSpec {
    pub n_users: usize,
    pub n_clusters: usize,
    pub items_per_cluster: usize,
    /// interactions per user, sampled uniformly from this inclusive range
    pub len_range: (usize, usize),
    /// probability that a transition stays in the user's home cluster
    pub p_home: f64,
    /// Zipf-like exponent for within-cluster item popularity (0 = uniform)
    pub skew: f64,
    pub seed: u64,
}

/// Write a synthetic rating log in the `user::item::rating::timestamp`
/// line format. Each user has a home cluster; transitions stay home with
/// probability `p_home` and item choice within a cluster follows a
/// rank-skewed distribution, so popularity carries signal but sequence
/// context carries more.
pub fn write_rating_log(path: &Path, spec: &RatingLogSpec) -> Result<()> {
    if spec.n_clusters == 0 || spec.items_per_cluster == 0 || spec.n_users == 0 {
        return Err(Error::Corpus("rating log needs users, clusters, and items".into()));
    }
    if spec.len_range.0 < 3 || spec.len_range.0 > spec.len_range.1 {
        return Err(Error::Corpus(format!(
            "bad length range {:?}: need 3 <= lo <= hi",
            spec.len_range
        )));
    }
    // rank weights shared by every cluster
    let weights: Vec<f64> =
        (0..spec.items_per_cluster).map(|r| 1.0 / (r as f64 + 1.0).powf(spec.skew)).collect();
    let total: f64 = weights.iter().sum();

    let mut out = String::new();
    for u in 0..spec.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u as u64));
        let home = u % spec.n_clusters;
        let len = rng.random_range(spec.len_range.0..=spec.len_range.1);
        let mut prev = usize::MAX;
        for step in 0..len {
            let cluster = if rng.random::<f64>() < spec.p_home {
                home
            } else {
                (home + 1 + rng.random_range(0..spec.n_clusters.max(2) - 1)) % spec.n_clusters
            };
            let mut item;
            loop {
                let mut ball = rng.random::<f64>() * total;
                let mut rank = 0;
                for (r, w) in weights.iter().enumerate() {
                    rank = r;
                    if ball < *w {
                        break;
                    }
                    ball -= w;
                }
                item = cluster * spec.items_per_cluster + rank + 1;
                if item != prev {
                    break;
                }
            }
            prev = item;
            let rating = *[3, 4, 5].choose(&mut rng).expect("non-empty");
            out.push_str(&format!("{}::{}::{}::{}\n", u + 1, item, rating, step));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
