//! Interaction logs: loading, chronological sequences, leave-one-out splits,
//! fixed-length padded windows, and evaluation negative sampling.
//!
//! Dense item indices live in `1..=N`; index 0 is reserved for padding so the
//! model can pin embedding row 0 to zero. Dense user indices are `0..M`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw input layouts the loader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// Lines of `UserID::MovieID::Rating::Timestamp`.
    MovielensDat,
    /// One JSON object per line with `reviewerID`, `asin`, `unixReviewTime`.
    AmazonJsonl,
    /// `user<TAB>item<TAB>timestamp`, optional header line.
    Tsv,
}

impl InputFormat {
    /// Iterative k-core threshold applied by default. The rating-log formats
    /// arrive unfiltered and get the 5-core treatment; plain tsv is taken
    /// as-is so tiny hand-made files survive loading.
    pub fn default_min_count(self) -> usize {
        match self {
            InputFormat::MovielensDat | InputFormat::AmazonJsonl => 5,
            InputFormat::Tsv => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputFormat::MovielensDat => "movielens-dat",
            InputFormat::AmazonJsonl => "amazon-jsonl",
            InputFormat::Tsv => "tsv",
        }
    }
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-dat" => Ok(InputFormat::MovielensDat),
            "amazon-jsonl" => Ok(InputFormat::AmazonJsonl),
            "tsv" => Ok(InputFormat::Tsv),
            other => Err(Error::Corpus(format!(
                "unknown input format '{other}' (expected movielens-dat, amazon-jsonl, or tsv)"
            ))),
        }
    }
}

/// Loader knobs beyond the format itself.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Skip the first line of a tsv file.
    pub tsv_header: bool,
    /// Override the k-core threshold; `None` uses the format default.
    /// Values of 0 or 1 disable filtering.
    pub min_count: Option<usize>,
}


/// All interactions after filtering: per-user chronological sequences over
/// dense ids, plus the raw-id maps needed to serialize them back out.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionCorpus {
    user_raw: Vec<String>,
    item_raw: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    sequences: Vec<Vec<(usize, i64)>>,
}

impl InteractionCorpus {
    /// Build directly from dense sequences. `item_ids[k]` names dense item
    /// `k+1`; sequences hold `(item index, timestamp)` sorted by timestamp.
    pub fn from_sequences(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        sequences: Vec<Vec<(usize, i64)>>,
    ) -> Result<Self> {
        if user_ids.len() != sequences.len() {
            return Err(Error::Corpus(format!(
                "{} user ids but {} sequences",
                user_ids.len(),
                sequences.len()
            )));
        }
        let user_index = index_of(&user_ids, "user")?;
        let item_index_zero_based = index_of(&item_ids, "item")?;
        let item_index =
            item_index_zero_based.into_iter().map(|(k, v)| (k, v + 1)).collect();
        let corpus =
            InteractionCorpus { user_raw: user_ids, item_raw: item_ids, user_index, item_index, sequences };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_items();
        for (u, seq) in self.sequences.iter().enumerate() {
            let mut prev = i64::MIN;
            for &(item, ts) in seq {
                if item == 0 || item > n {
                    return Err(Error::Corpus(format!(
                        "user {} references item index {item} outside 1..={n}",
                        self.user_raw[u]
                    )));
                }
                if ts < prev {
                    return Err(Error::Corpus(format!(
                        "sequence of user {} is not sorted by timestamp",
                        self.user_raw[u]
                    )));
                }
                prev = ts;
            }
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.user_raw.len()
    }

    /// Catalog size N; valid dense item indices are `1..=N`.
    pub fn n_items(&self) -> usize {
        self.item_raw.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn sequence(&self, user: usize) -> &[(usize, i64)] {
        &self.sequences[user]
    }

    pub fn sequences(&self) -> &[Vec<(usize, i64)>] {
        &self.sequences
    }

    pub fn raw_user(&self, user: usize) -> &str {
        &self.user_raw[user]
    }

    /// Raw id of dense item `item` (1-based).
    pub fn raw_item(&self, item: usize) -> &str {
        &self.item_raw[item - 1]
    }

    pub fn user_of_raw(&self, raw: &str) -> Option<usize> {
        self.user_index.get(raw).copied()
    }

    pub fn item_of_raw(&self, raw: &str) -> Option<usize> {
        self.item_index.get(raw).copied()
    }

    /// The corpus restricted to users with at least three interactions (the
    /// ones a leave-one-out split retains), with user indices recompacted.
    /// Item indices are untouched so the catalog stays stable.
    pub fn restrict_to_splittable(&self) -> InteractionCorpus {
        let mut user_raw = Vec::new();
        let mut sequences = Vec::new();
        for (u, seq) in self.sequences.iter().enumerate() {
            if seq.len() >= 3 {
                user_raw.push(self.user_raw[u].clone());
                sequences.push(seq.clone());
            }
        }
        let user_index =
            user_raw.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        InteractionCorpus {
            user_raw,
            item_raw: self.item_raw.clone(),
            user_index,
            item_index: self.item_index.clone(),
            sequences,
        }
    }
}

fn index_of(ids: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::Corpus(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(map)
}

struct RawEvent {
    user: String,
    item: String,
    ts: i64,
}

/// Load a raw interaction file with the format's default options.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionCorpus> {
    load_interactions_with(path, format, &LoadOptions::default())
}

/// Load, filter, and order a raw interaction file.
///
/// Rows are kept in file order, then each user's events are stably sorted by
/// timestamp (ties keep file order). Duplicate (user, item, timestamp) rows
/// are retained as distinct events.
pub fn load_interactions_with(
    path: &Path,
    format: InputFormat,
    options: &LoadOptions,
) -> Result<InteractionCorpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut events: Vec<RawEvent> = Vec::new();
    let shown = path.display();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = idx + 1;
        if line_no == 1 && format == InputFormat::Tsv && options.tsv_header {
            continue;
        }
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let event = parse_line(trimmed, format)
            .map_err(|msg| Error::Corpus(format!("{shown}:{line_no}: {msg}")))?;
        events.push(event);
    }
    if events.is_empty() {
        return Err(Error::Corpus(format!("{shown}: no interaction rows")));
    }

    let min_count = options.min_count.unwrap_or_else(|| format.default_min_count());
    kcore_filter(&mut events, min_count);
    if events.is_empty() {
        return Err(Error::Corpus(format!(
            "{shown}: no interactions survive the {min_count}-core filter"
        )));
    }

    // Dense ids by first appearance in file order, then per-user stable
    // timestamp sort.
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_raw: Vec<String> = Vec::new();
    let mut item_raw: Vec<String> = Vec::new();
    let mut sequences: Vec<Vec<(usize, i64)>> = Vec::new();
    for ev in &events {
        let &mut u = user_index.entry(ev.user.clone()).or_insert_with(|| {
            user_raw.push(ev.user.clone());
            sequences.push(Vec::new());
            user_raw.len() - 1
        });
        let &mut i = item_index.entry(ev.item.clone()).or_insert_with(|| {
            item_raw.push(ev.item.clone());
            item_raw.len()
        });
        sequences[u].push((i, ev.ts));
    }
    for seq in &mut sequences {
        seq.sort_by_key(|&(_, ts)| ts);
    }
    let corpus = InteractionCorpus { user_raw, item_raw, user_index, item_index, sequences };
    corpus.validate()?;
    Ok(corpus)
}

fn parse_line(line: &str, format: InputFormat) -> std::result::Result<RawEvent, String> {
    match format {
        InputFormat::MovielensDat => {
            let fields: Vec<&str> = line.split("::").collect();
            if fields.len() != 4 {
                return Err(format!("expected 4 '::'-separated fields, found {}", fields.len()));
            }
            fields[2]
                .parse::<f64>()
                .map_err(|_| format!("rating '{}' is not a number", fields[2]))?;
            let ts = fields[3]
                .parse::<i64>()
                .map_err(|_| format!("timestamp '{}' is not an integer", fields[3]))?;
            Ok(RawEvent { user: fields[0].to_string(), item: fields[1].to_string(), ts })
        }
        InputFormat::AmazonJsonl => {
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
            let user = value
                .get("reviewerID")
                .and_then(|v| v.as_str())
                .ok_or("missing string field 'reviewerID'")?;
            let item = value
                .get("asin")
                .and_then(|v| v.as_str())
                .ok_or("missing string field 'asin'")?;
            let ts = value
                .get("unixReviewTime")
                .and_then(|v| v.as_i64())
                .ok_or("missing integer field 'unixReviewTime'")?;
            Ok(RawEvent { user: user.to_string(), item: item.to_string(), ts })
        }
        InputFormat::Tsv => {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
            }
            let ts = fields[2]
                .trim()
                .parse::<i64>()
                .map_err(|_| format!("timestamp '{}' is not an integer", fields[2]))?;
            Ok(RawEvent { user: fields[0].to_string(), item: fields[1].to_string(), ts })
        }
    }
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// both counts are stable. `k <= 1` is a no-op.
fn kcore_filter(events: &mut Vec<RawEvent>, k: usize) {
    if k <= 1 {
        return;
    }
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for ev in events.iter() {
            *user_count.entry(&ev.user).or_insert(0) += 1;
            *item_count.entry(&ev.item).or_insert(0) += 1;
        }
        let before = events.len();
        let keep: Vec<bool> = events
            .iter()
            .map(|ev| user_count[ev.user.as_str()] >= k && item_count[ev.item.as_str()] >= k)
            .collect();
        let mut idx = 0;
        events.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
        if events.len() == before {
            return;
        }
    }
}

// ---- leave-one-out split ----

/// One user's partition: everything except the last two events trains, the
/// second-to-last item validates, the last item tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitView {
    pub train: Vec<usize>,
    pub valid_target: usize,
    pub test_target: usize,
}

/// Split views for every retained user, ordered by user index.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaveOneOutSplit {
    views: Vec<(usize, SplitView)>,
    n_dropped: usize,
}

impl LeaveOneOutSplit {
    pub fn iter(&self) -> std::slice::Iter<'_, (usize, SplitView)> {
        self.views.iter()
    }

    pub fn get(&self, user: usize) -> Option<&SplitView> {
        self.views
            .binary_search_by_key(&user, |&(u, _)| u)
            .ok()
            .map(|pos| &self.views[pos].1)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Users excluded for having fewer than three interactions.
    pub fn n_dropped(&self) -> usize {
        self.n_dropped
    }

    /// Training item sequences in user order (graph-construction input).
    pub fn train_sequences(&self) -> impl Iterator<Item = &[usize]> {
        self.views.iter().map(|(_, v)| v.train.as_slice())
    }
}

/// Partition every user with at least three interactions; shorter users are
/// dropped and counted, not errors.
pub fn leave_one_out_split(corpus: &InteractionCorpus) -> LeaveOneOutSplit {
    let mut views = Vec::new();
    let mut n_dropped = 0;
    for (u, seq) in corpus.sequences().iter().enumerate() {
        if seq.len() < 3 {
            n_dropped += 1;
            continue;
        }
        let items: Vec<usize> = seq.iter().map(|&(i, _)| i).collect();
        let n = items.len();
        views.push((
            u,
            SplitView {
                train: items[..n - 2].to_vec(),
                valid_target: items[n - 2],
                test_target: items[n - 1],
            },
        ));
    }
    LeaveOneOutSplit { views, n_dropped }
}

// ---- padded windows ----

/// A fixed-length model input: `indices` holds the most recent items
/// right-aligned with zero padding on the left, `positions` the slot ids
/// `0..T`, and `target` the item the window should predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedWindow {
    pub indices: Vec<usize>,
    pub positions: Vec<usize>,
    pub target: usize,
}

impl PaddedWindow {
    /// Index of the first non-pad slot; equals T when every slot is padding.
    pub fn first_non_pad(&self) -> usize {
        self.indices.iter().position(|&i| i != 0).unwrap_or(self.indices.len())
    }
}

/// Left-pad the most recent `t` items of `prefix` into a window.
pub fn window_from_prefix(prefix: &[usize], t: usize, target: usize) -> PaddedWindow {
    assert!(t >= 1, "window length must be at least 1");
    let keep = prefix.len().min(t);
    let mut indices = vec![0usize; t - keep];
    indices.extend_from_slice(&prefix[prefix.len() - keep..]);
    PaddedWindow { indices, positions: (0..t).collect(), target }
}

/// One window per prefix of the training sequence: the window over
/// `train[..p]` predicts `train[p]`. An empty or single-item training
/// sequence yields no windows with a next-item target beyond its prefixes.
pub fn make_windows(view: &SplitView, t: usize) -> Vec<PaddedWindow> {
    assert!(t >= 1, "window length must be at least 1");
    (1..view.train.len())
        .map(|p| window_from_prefix(&view.train[..p], t, view.train[p]))
        .collect()
}

// ---- negative sampling ----

/// The 1 + n candidate list evaluated per user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    pub candidates: Vec<usize>,
    pub positive_position: usize,
}

/// Draw `n` distinct negatives uniformly from the items outside the user's
/// entire history (and never the positive), deterministically from `seed`.
/// The positive sits at position 0 of the candidate list.
pub fn sample_negatives(
    corpus: &InteractionCorpus,
    user: usize,
    positive: usize,
    n: usize,
    seed: u64,
) -> Result<NegativeSample> {
    let n_items = corpus.n_items();
    let mut excluded: HashSet<usize> =
        corpus.sequence(user).iter().map(|&(i, _)| i).collect();
    excluded.insert(positive);
    let eligible = n_items - excluded.len();
    if eligible < n {
        return Err(Error::Corpus(format!(
            "user {} has only {eligible} items outside their history, need {n} negatives",
            corpus.raw_user(user)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives: Vec<usize> = Vec::with_capacity(n);
    if eligible >= 2 * n {
        // Rejection sampling: fast when most of the catalog is eligible.
        let mut taken: HashSet<usize> = HashSet::with_capacity(n);
        while negatives.len() < n {
            let cand = rng.random_range(1..=n_items);
            if !excluded.contains(&cand) && taken.insert(cand) {
                negatives.push(cand);
            }
        }
    } else {
        // Dense case: enumerate the eligible set and take a partial shuffle.
        let mut pool: Vec<usize> =
            (1..=n_items).filter(|i| !excluded.contains(i)).collect();
        for k in 0..n {
            let j = rng.random_range(k..pool.len());
            pool.swap(k, j);
            negatives.push(pool[k]);
        }
    }
    let mut candidates = Vec::with_capacity(n + 1);
    candidates.push(positive);
    candidates.extend(negatives);
    Ok(NegativeSample { candidates, positive_position: 0 })
}

// ---- prepared directory ----

/// Summary written to `stats.json` alongside the prepared corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub mean_seq_len: f64,
    pub sparsity: f64,
}

/// Write the canonical preprocessed form of a corpus: `items.tsv` and
/// `users.tsv` (raw id ↔ dense index), `train.tsv` / `valid.tsv` /
/// `test.tsv` (`user<TAB>item<TAB>timestamp` over dense ids), and
/// `stats.json`. Only users a leave-one-out split retains are written;
/// their indices are recompacted in order.
pub fn write_prepared(corpus: &InteractionCorpus, dir: &Path) -> Result<PreparedStats> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let split = leave_one_out_split(corpus);

    let mut items = String::new();
    for i in 1..=corpus.n_items() {
        items.push_str(&format!("{}\t{}\n", corpus.raw_item(i), i));
    }
    write_file(&dir.join("items.tsv"), &items)?;

    let mut users = String::new();
    let mut train = String::new();
    let mut valid = String::new();
    let mut test = String::new();
    let mut interactions = 0usize;
    let mut train_len_sum = 0usize;
    for (new_u, &(old_u, ref view)) in split.iter().enumerate() {
        users.push_str(&format!("{}\t{}\n", corpus.raw_user(old_u), new_u));
        let seq = corpus.sequence(old_u);
        let n = seq.len();
        interactions += n;
        train_len_sum += view.train.len();
        for &(item, ts) in &seq[..n - 2] {
            train.push_str(&format!("{new_u}\t{item}\t{ts}\n"));
        }
        valid.push_str(&format!("{new_u}\t{}\t{}\n", seq[n - 2].0, seq[n - 2].1));
        test.push_str(&format!("{new_u}\t{}\t{}\n", seq[n - 1].0, seq[n - 1].1));
    }
    write_file(&dir.join("users.tsv"), &users)?;
    write_file(&dir.join("train.tsv"), &train)?;
    write_file(&dir.join("valid.tsv"), &valid)?;
    write_file(&dir.join("test.tsv"), &test)?;

    let retained = split.len();
    let stats = PreparedStats {
        users: retained,
        items: corpus.n_items(),
        interactions,
        mean_seq_len: if retained == 0 {
            0.0
        } else {
            train_len_sum as f64 / retained as f64
        },
        sparsity: if retained == 0 || corpus.n_items() == 0 {
            0.0
        } else {
            1.0 - interactions as f64 / (retained as f64 * corpus.n_items() as f64)
        },
    };
    let json = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::Corpus(format!("stats serialization failed: {e}")))?;
    write_file(&dir.join("stats.json"), &(json + "\n"))?;
    Ok(stats)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Reload a directory written by [`write_prepared`]. Every user's sequence
/// is the concatenation of their train rows, validation row, and test row.
pub fn load_prepared(dir: &Path) -> Result<InteractionCorpus> {
    let item_raw = read_id_map(&dir.join("items.tsv"), 1)?;
    let user_raw = read_id_map(&dir.join("users.tsv"), 0)?;
    let m = user_raw.len();
    let n = item_raw.len();
    let mut sequences: Vec<Vec<(usize, i64)>> = vec![Vec::new(); m];
    for name in ["train.tsv", "valid.tsv", "test.tsv"] {
        let path = dir.join(name);
        let content = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for (idx, line) in content.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| {
                Error::Corpus(format!("{}:{}: {msg}", path.display(), idx + 1))
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected user, item, timestamp"));
            }
            let u: usize =
                fields[0].parse().map_err(|_| bad("user index is not an integer"))?;
            let i: usize =
                fields[1].parse().map_err(|_| bad("item index is not an integer"))?;
            let ts: i64 =
                fields[2].parse().map_err(|_| bad("timestamp is not an integer"))?;
            if u >= m {
                return Err(bad(&format!("user index {u} outside 0..{m}")));
            }
            if i == 0 || i > n {
                return Err(bad(&format!("item index {i} outside 1..={n}")));
            }
            sequences[u].push((i, ts));
        }
    }
    InteractionCorpus::from_sequences(user_raw, item_raw, sequences)
}

/// Read a two-column `raw<TAB>dense` map, verifying the dense column is the
/// contiguous run starting at `base`.
fn read_id_map(path: &Path, base: usize) -> Result<Vec<String>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad =
            |msg: String| Error::Corpus(format!("{}:{}: {msg}", path.display(), idx + 1));
        if fields.len() != 2 {
            return Err(bad("expected raw id and dense index".to_string()));
        }
        let dense: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("dense index '{}' is not an integer", fields[1])))?;
        if dense != raw.len() + base {
            return Err(bad(format!(
                "dense index {dense} out of order (expected {})",
                raw.len() + base
            )));
        }
        raw.push(fields[0].to_string());
    }
    Ok(raw)
}

#[cfg(test)]
// Test oracles below are deliberate literal loops; indexed form mirrors the math.
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::numerics::mix_seed;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn synthetic_corpus(
        n_users: usize,
        n_items: usize,
        seqs: Vec<Vec<(usize, i64)>>,
    ) -> InteractionCorpus {
        InteractionCorpus::from_sequences(
            (0..n_users).map(|u| format!("u{u}")).collect(),
            (1..=n_items).map(|i| format!("i{i}")).collect(),
            seqs,
        )
        .unwrap()
    }

    #[test]
    fn tsv_single_line_gives_one_user_one_item() {
        let f = write_temp("u1\ti1\t100\n");
        let c = load_interactions(f.path(), InputFormat::Tsv).unwrap();
        assert_eq!(c.n_users(), 1);
        assert_eq!(c.n_items(), 1);
        assert_eq!(c.sequence(0), &[(1, 100)]);
    }

    #[test]
    fn tsv_header_skipped_when_flagged() {
        let f = write_temp("user\titem\tts\nu1\ti1\t100\n");
        let opts = LoadOptions { tsv_header: true, ..Default::default() };
        let c = load_interactions_with(f.path(), InputFormat::Tsv, &opts).unwrap();
        assert_eq!(c.n_interactions(), 1);
        assert!(load_interactions(f.path(), InputFormat::Tsv).is_err());
    }

    #[test]
    fn movielens_lines_parse_and_sort() {
        let f = write_temp(
            "1::10::5::300\n1::20::3::100\n2::10::4::50\n1::30::1::200\n",
        );
        let opts = LoadOptions { min_count: Some(1), ..Default::default() };
        let c = load_interactions_with(f.path(), InputFormat::MovielensDat, &opts).unwrap();
        assert_eq!(c.n_users(), 2);
        assert_eq!(c.n_items(), 3);
        let seq: Vec<&str> = c.sequence(0).iter().map(|&(i, _)| c.raw_item(i)).collect();
        assert_eq!(seq, vec!["20", "30", "10"]);
    }

    #[test]
    fn amazon_jsonl_parses() {
        let f = write_temp(
            r#"{"reviewerID":"A1","asin":"B1","unixReviewTime":100,"overall":5.0}
{"reviewerID":"A1","asin":"B2","unixReviewTime":50}
"#,
        );
        let opts = LoadOptions { min_count: Some(1), ..Default::default() };
        let c = load_interactions_with(f.path(), InputFormat::AmazonJsonl, &opts).unwrap();
        assert_eq!(c.n_users(), 1);
        let seq: Vec<&str> = c.sequence(0).iter().map(|&(i, _)| c.raw_item(i)).collect();
        assert_eq!(seq, vec!["B2", "B1"]);
    }

    #[test]
    fn malformed_line_error_names_the_line() {
        let f = write_temp("u1\ti1\t100\nu2\ti2\n");
        let err = load_interactions(f.path(), InputFormat::Tsv).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got: {err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_temp("");
        assert!(load_interactions(f.path(), InputFormat::Tsv).is_err());
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let f = write_temp("u\ta\t5\nu\tb\t5\nu\tc\t5\n");
        let c = load_interactions(f.path(), InputFormat::Tsv).unwrap();
        let seq: Vec<&str> = c.sequence(0).iter().map(|&(i, _)| c.raw_item(i)).collect();
        assert_eq!(seq, vec!["a", "b", "c"]);
    }

    #[test]
    fn shuffled_timestamps_match_brute_force_sort_oracle() {
        // Random rows for 3 users, then an independent stable sort of the
        // raw (ts, arrival) pairs as the expected order.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lines = Vec::new();
        let mut per_user: Vec<Vec<(i64, String)>> = vec![Vec::new(); 3];
        for row in 0..60 {
            let u = rng.random_range(0..3usize);
            let item = format!("it{}", rng.random_range(0..10));
            let ts = rng.random_range(0..20i64);
            lines.push(format!("u{u}\t{item}\t{ts}"));
            per_user[u].push((ts, item));
            let _ = row;
        }
        let f = write_temp(&(lines.join("\n") + "\n"));
        let c = load_interactions(f.path(), InputFormat::Tsv).unwrap();
        for u in 0..3 {
            let mut expected = per_user[u].clone();
            expected.sort_by_key(|&(ts, _)| ts);
            let user = c.user_of_raw(&format!("u{u}")).unwrap();
            let got: Vec<(i64, String)> = c
                .sequence(user)
                .iter()
                .map(|&(i, ts)| (ts, c.raw_item(i).to_string()))
                .collect();
            assert_eq!(got, expected, "user {u}");
        }
    }

    #[test]
    fn five_core_filter_iterates_to_a_stable_set() {
        // "rare" appears 4 times and must go; user "weak" then falls to 4
        // interactions and must go too, taking its other items' counts down.
        let mut lines = Vec::new();
        for t in 0..5 {
            for item in ["a", "b", "c", "d"] {
                lines.push(format!("strong{t}\t{item}\t{t}"));
            }
            lines.push(format!("strong{t}\tcommon\t{}", t + 10));
        }
        for t in 0..4 {
            lines.push(format!("weak\trare\t{t}"));
        }
        lines.push("weak\tcommon\t9".to_string());
        let f = write_temp(&(lines.join("\n") + "\n"));
        let opts = LoadOptions { min_count: Some(5), ..Default::default() };
        let c = load_interactions_with(f.path(), InputFormat::Tsv, &opts).unwrap();
        assert!(c.user_of_raw("weak").is_none());
        assert!(c.item_of_raw("rare").is_none());
        assert_eq!(c.n_users(), 5);
        assert_eq!(c.n_items(), 5);
        // Independent fixed-point check: every survivor has >= 5 events.
        for u in 0..c.n_users() {
            assert!(c.sequence(u).len() >= 5);
        }
        let mut item_counts = vec![0usize; c.n_items() + 1];
        for seq in c.sequences() {
            for &(i, _) in seq {
                item_counts[i] += 1;
            }
        }
        assert!(item_counts[1..].iter().all(|&c| c >= 5));
    }

    #[test]
    fn split_four_items_and_two_items() {
        let c = synthetic_corpus(
            2,
            4,
            vec![
                vec![(1, 0), (2, 1), (3, 2), (4, 3)],
                vec![(1, 0), (2, 1)],
            ],
        );
        let split = leave_one_out_split(&c);
        assert_eq!(split.len(), 1);
        assert_eq!(split.n_dropped(), 1);
        let view = split.get(0).unwrap();
        assert_eq!(view.train, vec![1, 2]);
        assert_eq!(view.valid_target, 3);
        assert_eq!(view.test_target, 4);
        assert!(split.get(1).is_none());
    }

    #[test]
    fn split_matches_slicing_oracle_on_random_users() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seqs: Vec<Vec<(usize, i64)>> = (0..50)
            .map(|_| {
                let len = rng.random_range(1..12usize);
                (0..len).map(|t| (rng.random_range(1..=30usize), t as i64)).collect()
            })
            .collect();
        let c = synthetic_corpus(50, 30, seqs.clone());
        let split = leave_one_out_split(&c);
        for (u, seq) in seqs.iter().enumerate() {
            let items: Vec<usize> = seq.iter().map(|&(i, _)| i).collect();
            match split.get(u) {
                Some(view) => {
                    assert!(items.len() >= 3);
                    assert_eq!(view.train, items[..items.len() - 2].to_vec());
                    assert_eq!(view.valid_target, items[items.len() - 2]);
                    assert_eq!(view.test_target, items[items.len() - 1]);
                    // Reconcatenation reproduces the original sequence.
                    let mut rebuilt = view.train.clone();
                    rebuilt.push(view.valid_target);
                    rebuilt.push(view.test_target);
                    assert_eq!(rebuilt, items);
                }
                None => assert!(items.len() < 3),
            }
        }
    }

    #[test]
    fn windows_for_three_item_train() {
        let view = SplitView { train: vec![7, 8, 9], valid_target: 1, test_target: 2 };
        let windows = make_windows(&view, 5);
        assert_eq!(windows.len(), 2);
        assert_eq!(windows[0].indices, vec![0, 0, 0, 0, 7]);
        assert_eq!(windows[0].target, 8);
        assert_eq!(windows[1].indices, vec![0, 0, 0, 7, 8]);
        assert_eq!(windows[1].target, 9);
        assert_eq!(windows[0].positions, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn long_prefix_keeps_most_recent_items() {
        let view = SplitView {
            train: (1..=8).collect(),
            valid_target: 9,
            test_target: 10,
        };
        let windows = make_windows(&view, 5);
        let last = windows.last().unwrap();
        assert_eq!(last.indices, vec![3, 4, 5, 6, 7]);
        assert_eq!(last.target, 8);
    }

    #[test]
    fn windows_match_prefix_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let len = rng.random_range(0..15usize);
            let train: Vec<usize> =
                (0..len).map(|_| rng.random_range(1..=40usize)).collect();
            let t = rng.random_range(1..8usize);
            let view = SplitView { train: train.clone(), valid_target: 1, test_target: 1 };
            let got = make_windows(&view, t);
            // Brute force: every prefix, pad by hand.
            let mut expected = Vec::new();
            for p in 1..train.len() {
                let prefix = &train[..p];
                let mut idx = Vec::new();
                for slot in 0..t {
                    let back = t - slot;
                    idx.push(if back <= prefix.len().min(t) {
                        prefix[prefix.len() - back]
                    } else {
                        0
                    });
                }
                expected.push(PaddedWindow {
                    indices: idx,
                    positions: (0..t).collect(),
                    target: train[p],
                });
            }
            assert_eq!(got, expected);
            for w in &got {
                let zeros = w.indices.iter().take_while(|&&i| i == 0).count();
                let non_pad = w.indices.iter().filter(|&&i| i != 0).count();
                assert_eq!(zeros + non_pad, t);
                assert!(w.indices[zeros..].iter().all(|&i| i != 0));
            }
        }
    }

    #[test]
    fn forced_negative_set_is_the_complement() {
        let c = synthetic_corpus(1, 101, vec![vec![(42, 0)]]);
        let s = sample_negatives(&c, 0, 42, 100, 9).unwrap();
        assert_eq!(s.candidates.len(), 101);
        assert_eq!(s.candidates[s.positive_position], 42);
        let mut negs: Vec<usize> =
            s.candidates.iter().copied().filter(|&i| i != 42).collect();
        negs.sort_unstable();
        let expected: Vec<usize> = (1..=101).filter(|&i| i != 42).collect();
        assert_eq!(negs, expected);
    }

    #[test]
    fn same_seed_same_candidates() {
        let c = synthetic_corpus(1, 50, vec![vec![(3, 0), (7, 1)]]);
        let a = sample_negatives(&c, 0, 7, 20, 1234).unwrap();
        let b = sample_negatives(&c, 0, 7, 20, 1234).unwrap();
        assert_eq!(a, b);
        let d = sample_negatives(&c, 0, 7, 20, 1235).unwrap();
        assert_ne!(a.candidates, d.candidates);
    }

    #[test]
    fn too_few_eligible_items_is_an_error() {
        let c = synthetic_corpus(1, 5, vec![vec![(1, 0), (2, 1), (3, 2)]]);
        let err = sample_negatives(&c, 0, 4, 3, 0).unwrap_err();
        assert!(err.to_string().contains("u0"), "got: {err}");
    }

    #[test]
    fn negatives_never_hit_history_over_many_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_items = 100usize;
        for case in 0..1000u64 {
            let len = rng.random_range(1..30usize);
            let seq: Vec<(usize, i64)> =
                (0..len).map(|t| (rng.random_range(1..=n_items), t as i64)).collect();
            let c = synthetic_corpus(1, n_items, vec![seq.clone()]);
            let positive = seq[len - 1].0;
            for draw in 0..10u64 {
                let s =
                    sample_negatives(&c, 0, positive, 20, mix_seed(case, draw)).unwrap();
                let history: HashSet<usize> = seq.iter().map(|&(i, _)| i).collect();
                for (pos, &cand) in s.candidates.iter().enumerate() {
                    if pos == s.positive_position {
                        continue;
                    }
                    assert!(!history.contains(&cand));
                    assert_ne!(cand, positive);
                }
                let unique: HashSet<usize> = s.candidates.iter().copied().collect();
                assert_eq!(unique.len(), s.candidates.len());
            }
        }
    }

    #[test]
    fn negative_frequencies_are_uniform_chi_square() {
        // 10 000 draws of 100 negatives from 999 eligible items; the
        // chi-square statistic over per-item counts should sit within 3
        // standard deviations of its dof (= 998) expectation.
        let n_items = 1000usize;
        let c = synthetic_corpus(1, n_items, vec![vec![(1, 0)]]);
        let mut counts = vec![0usize; n_items + 1];
        let draws = 10_000u64;
        let n = 100usize;
        for d in 0..draws {
            let s = sample_negatives(&c, 0, 1, n, mix_seed(77, d)).unwrap();
            for (pos, &cand) in s.candidates.iter().enumerate() {
                if pos != s.positive_position {
                    counts[cand] += 1;
                }
            }
        }
        assert_eq!(counts[0], 0);
        assert_eq!(counts[1], 0);
        let eligible = (n_items - 1) as f64;
        let expected = draws as f64 * n as f64 / eligible;
        let chi2: f64 = counts[2..]
            .iter()
            .map(|&c| {
                let diff = c as f64 - expected;
                diff * diff / expected
            })
            .sum();
        let dof = eligible - 1.0;
        let sd = (2.0 * dof).sqrt();
        assert!(
            (chi2 - dof).abs() < 3.0 * sd,
            "chi2 {chi2} vs dof {dof} (sd {sd})"
        );
    }

    #[test]
    fn prepared_round_trip_reproduces_the_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let seqs: Vec<Vec<(usize, i64)>> = (0..40)
            .map(|_| {
                let len = rng.random_range(1..10usize);
                let mut ts: Vec<i64> = (0..len).map(|_| rng.random_range(0..50)).collect();
                ts.sort_unstable();
                ts.iter().map(|&t| (rng.random_range(1..=25usize), t)).collect()
            })
            .collect();
        let c = synthetic_corpus(40, 25, seqs);
        let dir = tempfile::tempdir().unwrap();
        let stats = write_prepared(&c, dir.path()).unwrap();
        let reloaded = load_prepared(dir.path()).unwrap();
        let expected = c.restrict_to_splittable();
        assert_eq!(reloaded, expected);
        assert_eq!(stats.users, expected.n_users());
        assert_eq!(stats.items, 25);
        assert_eq!(stats.interactions, expected.n_interactions());
        let mean = expected
            .sequences()
            .iter()
            .map(|s| s.len() as f64 - 2.0)
            .sum::<f64>()
            / expected.n_users() as f64;
        assert!((stats.mean_seq_len - mean).abs() < 1e-12);
    }

    #[test]
    fn prepare_writes_all_split_files_even_for_one_short_user() {
        let c = synthetic_corpus(1, 1, vec![vec![(1, 100)]]);
        let dir = tempfile::tempdir().unwrap();
        let stats = write_prepared(&c, dir.path()).unwrap();
        assert_eq!(stats.users, 0);
        for name in ["items.tsv", "users.tsv", "train.tsv", "valid.tsv", "test.tsv", "stats.json"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let reloaded = load_prepared(dir.path()).unwrap();
        assert_eq!(reloaded.n_users(), 0);
        assert_eq!(reloaded.n_items(), 1);
    }

    #[test]
    fn movielens_full_corpus_statistics() {
        // Needs the real ratings file; point EGD_ML1M at ratings.dat to run.
        let path = match std::env::var("EGD_ML1M") {
            Ok(p) => p,
            Err(_) => {
                eprintln!("EGD_ML1M not set; skipping full corpus check");
                return;
            }
        };
        let c =
            load_interactions(Path::new(&path), InputFormat::MovielensDat).unwrap();
        assert_eq!(c.n_users(), 6040);
        assert_eq!(c.n_items(), 3416);
        assert_eq!(c.n_interactions(), 999_611);
    }
}
