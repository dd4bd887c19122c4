//! Leave-one-out ranking evaluation: NDCG@K and Recall@K over 101-candidate
//! lists (the held-out item plus 100 sampled negatives), plus the
//! popularity baseline.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_negatives, InteractionCorpus, LeaveOneOutSplit, SplitView};
use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::numerics::mix_seed;

/// Number of sampled negatives per evaluated user.
pub const N_NEGATIVES: usize = 100;

/// Which held-out target to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
        }
    }
}

/// A scored candidate list after ranking: items in descending-score order
/// (ties broken by ascending item index) with parallel relevance flags.
#[derive(Debug, Clone)]
pub struct RankedList {
    items: Vec<usize>,
    relevant: Vec<bool>,
}

impl RankedList {
    /// Rank candidates by score. `relevant` holds the items that count as
    /// hits (in this protocol: the single held-out target).
    pub fn from_scores(
        candidates: &[usize],
        scores: &[f64],
        relevant: &HashSet<usize>,
    ) -> Result<RankedList> {
        if candidates.len() != scores.len() {
            return Err(Error::Eval(format!(
                "{} candidates but {} scores",
                candidates.len(),
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Eval(format!("non-finite candidate score {bad}")));
        }
        let distinct: HashSet<usize> = candidates.iter().copied().collect();
        if distinct.len() != candidates.len() {
            return Err(Error::Eval("candidate list contains duplicates".into()));
        }
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("scores checked finite")
                .then(candidates[a].cmp(&candidates[b]))
        });
        let items: Vec<usize> = order.iter().map(|&i| candidates[i]).collect();
        let flags: Vec<bool> = items.iter().map(|i| relevant.contains(i)).collect();
        Ok(RankedList { items, relevant: flags })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn relevance(&self) -> &[bool] {
        &self.relevant
    }

    fn n_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

/// Discounted cumulative gain at K over binary relevance, normalized by the
/// ideal ordering: DCG@K = Σ_{i≤K} (2^{r_i}−1)/log₂(i+1), IDCG places all
/// relevant items first.
pub fn ndcg_at_k(ranked: &RankedList, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Eval("K must be at least 1".into()));
    }
    let total = ranked.n_relevant();
    if total == 0 {
        return Err(Error::Eval("ranked list has no relevant item".into()));
    }
    let mut dcg = 0.0;
    for (i, &rel) in ranked.relevant.iter().take(k).enumerate() {
        if rel {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for i in 0..total.min(k) {
        idcg += 1.0 / ((i + 2) as f64).log2();
    }
    Ok(dcg / idcg)
}

/// Fraction of the relevant set that made it into the top K.
pub fn recall_at_k(ranked: &RankedList, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Eval("K must be at least 1".into()));
    }
    let total = ranked.n_relevant();
    if total == 0 {
        return Err(Error::Eval("ranked list has no relevant item".into()));
    }
    let hits = ranked.relevant.iter().take(k).filter(|&&r| r).count();
    Ok(hits as f64 / total as f64)
}

/// Anything that can score candidate items for a user's prefix. `user` is
/// the corpus user index (baselines may ignore it).
pub trait CandidateScorer: Sync {
    fn scores(&self, user: usize, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>>;
}

impl CandidateScorer for Scorer<'_> {
    fn scores(&self, _user: usize, prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        self.score_candidates(prefix, candidates)
    }
}

/// Popularity baseline: an item's score is its interaction count in the
/// training portion of the split, identical for every user.
#[derive(Debug, Clone)]
pub struct PopScorer {
    counts: Vec<f64>,
}

impl PopScorer {
    pub fn count(&self, item: usize) -> f64 {
        self.counts[item]
    }
}

impl CandidateScorer for PopScorer {
    fn scores(&self, _user: usize, _prefix: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        candidates
            .iter()
            .map(|&c| {
                self.counts.get(c).copied().ok_or_else(|| {
                    Error::Eval(format!("candidate item {c} outside the catalog"))
                })
            })
            .collect()
    }
}

pub fn pop_baseline(corpus: &InteractionCorpus, split: &LeaveOneOutSplit) -> PopScorer {
    let mut counts = vec![0.0; corpus.n_items() + 1];
    for seq in split.train_sequences() {
        for &item in seq {
            counts[item] += 1.0;
        }
    }
    PopScorer { counts }
}

/// Mean metrics over evaluated users, in the shape `metrics.json` uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n_users: usize,
    #[serde(rename = "ndcg@5")]
    pub ndcg_at_5: f64,
    #[serde(rename = "recall@5")]
    pub recall_at_5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_at_10: f64,
    #[serde(rename = "recall@10")]
    pub recall_at_10: f64,
    pub seeds: Vec<u64>,
    pub config_digest: String,
    /// Users skipped for an empty history (not serialized; the field is
    /// diagnostic, the file format fixes its keys).
    #[serde(skip)]
    pub n_skipped: usize,
}

impl MetricsReport {
    pub fn with_digest(mut self, digest: &str) -> MetricsReport {
        self.config_digest = digest.to_string();
        self
    }
}

/// Score one user's held-out target against 100 sampled negatives.
fn eval_user(
    scorer: &(impl CandidateScorer + ?Sized),
    corpus: &InteractionCorpus,
    user: usize,
    view: &SplitView,
    which: EvalSplit,
    seed: u64,
) -> Result<Option<[f64; 4]>> {
    let (target, prefix) = match which {
        EvalSplit::Valid => (view.valid_target, view.train.clone()),
        EvalSplit::Test => {
            let mut p = view.train.clone();
            p.push(view.valid_target);
            (view.test_target, p)
        }
    };
    if prefix.is_empty() {
        return Ok(None);
    }
    let sample =
        sample_negatives(corpus, user, target, N_NEGATIVES, mix_seed(seed, user as u64))?;
    let scores = scorer.scores(user, &prefix, &sample.candidates)?;
    let relevant: HashSet<usize> = [target].into();
    let ranked = RankedList::from_scores(&sample.candidates, &scores, &relevant)?;
    Ok(Some([
        ndcg_at_k(&ranked, 5)?,
        recall_at_k(&ranked, 5)?,
        ndcg_at_k(&ranked, 10)?,
        recall_at_k(&ranked, 10)?,
    ]))
}

/// Evaluate a scorer over every user of the split. Per-user negative
/// sampling is seeded by (seed, user index) so users are independent and
/// the report is reproducible; users run in parallel and reduce in user
/// order.
pub fn evaluate(
    scorer: &(impl CandidateScorer + ?Sized),
    corpus: &InteractionCorpus,
    split: &LeaveOneOutSplit,
    which: EvalSplit,
    seed: u64,
) -> Result<MetricsReport> {
    let views: Vec<&(usize, SplitView)> = split.iter().collect();
    let per_user: Vec<Option<[f64; 4]>> = views
        .par_iter()
        .map(|(user, view)| {
            eval_user(scorer, corpus, *user, view, which, seed).map_err(|e| {
                Error::Eval(format!("user {}: {e}", corpus.raw_user(*user)))
            })
        })
        .collect::<Result<_>>()?;
    let mut sums = [0.0; 4];
    let mut n_users = 0usize;
    let mut n_skipped = 0usize;
    for m in per_user {
        match m {
            Some(vals) => {
                for (s, v) in sums.iter_mut().zip(vals) {
                    *s += v;
                }
                n_users += 1;
            }
            None => n_skipped += 1,
        }
    }
    if n_users == 0 {
        return Err(Error::Eval("no user could be evaluated".into()));
    }
    let d = n_users as f64;
    Ok(MetricsReport {
        split: which.name().to_string(),
        n_users,
        ndcg_at_5: sums[0] / d,
        recall_at_5: sums[1] / d,
        ndcg_at_10: sums[2] / d,
        recall_at_10: sums[3] / d,
        seeds: vec![seed],
        config_digest: String::new(),
        n_skipped,
    })
}

/// Mean of reports from the same protocol under different seeds (the
/// five-seed averaging convention).
pub fn mean_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Eval("cannot average zero reports".into()))?;
    for r in reports {
        if r.split != first.split {
            return Err(Error::Eval(format!(
                "cannot average reports from splits {} and {}",
                first.split, r.split
            )));
        }
    }
    let d = reports.len() as f64;
    let mut seeds: Vec<u64> = reports.iter().flat_map(|r| r.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    Ok(MetricsReport {
        split: first.split.clone(),
        n_users: first.n_users,
        ndcg_at_5: reports.iter().map(|r| r.ndcg_at_5).sum::<f64>() / d,
        recall_at_5: reports.iter().map(|r| r.recall_at_5).sum::<f64>() / d,
        ndcg_at_10: reports.iter().map(|r| r.ndcg_at_10).sum::<f64>() / d,
        recall_at_10: reports.iter().map(|r| r.recall_at_10).sum::<f64>() / d,
        seeds,
        config_digest: first.config_digest.clone(),
        n_skipped: reports.iter().map(|r| r.n_skipped).sum(),
    })
}

pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Eval(format!("cannot serialize metrics: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Eval(format!("{}: bad metrics file: {e}", path.display())))
}
