//! The global item-link graph: undirected edges between consecutively
//! interacted items across all training sequences.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::mix_seed;

/// Simple undirected graph over dense item indices `1..=n_items`.
/// Neighbor lists are sorted ascending and never contain duplicates or the
/// item itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalGraph {
    n_items: usize,
    adjacency: Vec<Vec<usize>>,
    edge_count: usize,
}

impl GlobalGraph {
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Sorted neighbors of an item; empty for isolated items.
    pub fn neighbors_of(&self, item: usize) -> Result<&[usize]> {
        if item == 0 || item > self.n_items {
            return Err(Error::Graph(format!(
                "item index {item} outside 1..={}",
                self.n_items
            )));
        }
        Ok(&self.adjacency[item])
    }

    /// Every ordered (source, destination) pair, grouped by destination in
    /// ascending order. Each undirected edge appears twice, once per
    /// direction; the model aggregates over exactly this list.
    pub fn directed_edges(&self) -> (Vec<usize>, Vec<usize>) {
        let mut src = Vec::with_capacity(2 * self.edge_count);
        let mut dst = Vec::with_capacity(2 * self.edge_count);
        for i in 1..=self.n_items {
            for &j in &self.adjacency[i] {
                src.push(j);
                dst.push(i);
            }
        }
        (src, dst)
    }

    /// Undirected edges as (i, j) with i < j, ascending.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.edge_count);
        for i in 1..=self.n_items {
            for &j in &self.adjacency[i] {
                if i < j {
                    edges.push((i, j));
                }
            }
        }
        edges
    }

    /// Subsample neighbor lists so no item keeps more than `max_degree`
    /// neighbors. An edge survives only if both endpoints keep it, so the
    /// result stays symmetric. Deterministic in `seed`.
    pub fn cap_degrees(&self, max_degree: usize, seed: u64) -> GlobalGraph {
        let mut chosen: Vec<BTreeSet<usize>> = Vec::with_capacity(self.n_items + 1);
        chosen.push(BTreeSet::new());
        for i in 1..=self.n_items {
            let neigh = &self.adjacency[i];
            if neigh.len() <= max_degree {
                chosen.push(neigh.iter().copied().collect());
            } else {
                let mut pool = neigh.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
                for k in 0..max_degree {
                    let j = rng.random_range(k..pool.len());
                    pool.swap(k, j);
                }
                chosen.push(pool[..max_degree].iter().copied().collect());
            }
        }
        let mut edges = BTreeSet::new();
        for i in 1..=self.n_items {
            for &j in chosen[i].iter() {
                if i < j && chosen[j].contains(&i) {
                    edges.insert((i, j));
                }
            }
        }
        from_edge_set(edges, self.n_items)
    }

    /// Serialize as `graph.tsv`: a `#items=N #edges=E` header followed by
    /// one `i<TAB>j` line per undirected edge with i < j.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#items={} #edges={}\n", self.n_items, self.edge_count);
        for (i, j) in self.undirected_edges() {
            out.push_str(&format!("{i}\t{j}\n"));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn from_tsv(content: &str) -> Result<GlobalGraph> {
        let mut lines = content.lines();
        let header = lines.next().ok_or_else(|| Error::Graph("empty graph file".into()))?;
        let bad_header = || Error::Graph(format!("malformed graph header '{header}'"));
        let rest = header.strip_prefix("#items=").ok_or_else(bad_header)?;
        let (items_str, edges_part) = rest.split_once(' ').ok_or_else(bad_header)?;
        let n_items: usize = items_str.parse().map_err(|_| bad_header())?;
        let declared_edges: usize = edges_part
            .strip_prefix("#edges=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad_header)?;
        let mut edges = BTreeSet::new();
        for (idx, line) in lines.enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad =
                |msg: String| Error::Graph(format!("graph line {}: {msg}", idx + 2));
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected two tab-separated indices".into()))?;
            let i: usize =
                a.parse().map_err(|_| bad(format!("'{a}' is not an index")))?;
            let j: usize =
                b.parse().map_err(|_| bad(format!("'{b}' is not an index")))?;
            if i == 0 || j == 0 || i > n_items || j > n_items {
                return Err(bad(format!("edge {i}-{j} outside 1..={n_items}")));
            }
            if i >= j {
                return Err(bad(format!("edge {i}-{j} not in canonical i<j form")));
            }
            if !edges.insert((i, j)) {
                return Err(bad(format!("duplicate edge {i}-{j}")));
            }
        }
        if edges.len() != declared_edges {
            return Err(Error::Graph(format!(
                "header declares {declared_edges} edges, file holds {}",
                edges.len()
            )));
        }
        Ok(from_edge_set(edges, n_items))
    }

    pub fn read_tsv(path: &Path) -> Result<GlobalGraph> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GlobalGraph::from_tsv(&content)
    }
}

fn from_edge_set(edges: BTreeSet<(usize, usize)>, n_items: usize) -> GlobalGraph {
    let mut adjacency = vec![Vec::new(); n_items + 1];
    for &(i, j) in &edges {
        adjacency[i].push(j);
        adjacency[j].push(i);
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    GlobalGraph { n_items, adjacency, edge_count: edges.len() }
}

/// Build the graph from training sequences: every pair of consecutive items
/// becomes an undirected edge, deduplicated, with self-pairs (an item
/// repeated back to back) skipped.
pub fn build_global_graph<'a, I>(sequences: I, n_items: usize) -> Result<GlobalGraph>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    let mut edges = BTreeSet::new();
    for seq in sequences {
        for &item in seq {
            if item == 0 || item > n_items {
                return Err(Error::Graph(format!(
                    "sequence item index {item} outside 1..={n_items}"
                )));
            }
        }
        for pair in seq.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    Ok(from_edge_set(edges, n_items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn edge_set(g: &GlobalGraph) -> HashSet<(usize, usize)> {
        g.undirected_edges().into_iter().collect()
    }

    #[test]
    fn consecutive_pairs_become_edges() {
        let seq = vec![5usize, 6, 2, 4, 1, 2];
        let g = build_global_graph([seq.as_slice()], 6).unwrap();
        let expected: HashSet<(usize, usize)> =
            [(5, 6), (2, 6), (2, 4), (1, 4), (1, 2)].into_iter().collect();
        assert_eq!(edge_set(&g), expected);
        assert_eq!(g.edge_count(), 5);
        assert_eq!(g.neighbors_of(2).unwrap(), &[1, 4, 6]);
        assert_eq!(g.neighbors_of(3).unwrap(), &[] as &[usize]);
    }

    #[test]
    fn repeated_item_gives_no_self_loop() {
        let seq = vec![3usize, 3, 3];
        let g = build_global_graph([seq.as_slice()], 5).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.neighbors_of(3).unwrap(), &[] as &[usize]);
    }

    #[test]
    fn out_of_range_indices_are_errors() {
        let with_zero = vec![0usize, 1];
        assert!(build_global_graph([with_zero.as_slice()], 5).is_err());
        let too_big = vec![1usize, 6];
        assert!(build_global_graph([too_big.as_slice()], 5).is_err());
        let g = build_global_graph([], 5).unwrap();
        assert!(g.neighbors_of(0).is_err());
        assert!(g.neighbors_of(6).is_err());
    }

    #[test]
    fn random_sequences_match_pair_enumeration_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for round in 0..100 {
            let n_items = rng.random_range(2..20usize);
            let n_seqs = rng.random_range(1..8usize);
            let seqs: Vec<Vec<usize>> = (0..n_seqs)
                .map(|_| {
                    let len = rng.random_range(0..12usize);
                    (0..len).map(|_| rng.random_range(1..=n_items)).collect()
                })
                .collect();
            let g = build_global_graph(seqs.iter().map(Vec::as_slice), n_items).unwrap();

            let mut expected = HashSet::new();
            for s in &seqs {
                for w in s.windows(2) {
                    if w[0] != w[1] {
                        expected.insert((w[0].min(w[1]), w[0].max(w[1])));
                    }
                }
            }
            assert_eq!(edge_set(&g), expected, "round {round}");

            // Symmetry and handshake over every adjacency entry.
            let mut degree_sum = 0;
            for i in 1..=n_items {
                let neigh = g.neighbors_of(i).unwrap();
                degree_sum += neigh.len();
                let mut sorted = neigh.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted, neigh, "list canonical");
                assert!(!neigh.contains(&i), "no self-loop");
                for &j in neigh {
                    assert!(g.neighbors_of(j).unwrap().contains(&i), "symmetry");
                }
            }
            assert_eq!(degree_sum, 2 * g.edge_count());
        }
    }

    #[test]
    fn order_and_direction_independent() {
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4], vec![4, 2, 5], vec![5, 1]];
        let g = build_global_graph(seqs.iter().map(Vec::as_slice), 5).unwrap();
        let mut permuted = seqs.clone();
        permuted.reverse();
        let g2 = build_global_graph(permuted.iter().map(Vec::as_slice), 5).unwrap();
        assert_eq!(g, g2);
        let reversed: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| s.iter().rev().copied().collect())
            .collect();
        let g3 = build_global_graph(reversed.iter().map(Vec::as_slice), 5).unwrap();
        assert_eq!(g, g3);
    }

    #[test]
    fn tsv_round_trip() {
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3], vec![3, 1, 4]];
        let g = build_global_graph(seqs.iter().map(Vec::as_slice), 4).unwrap();
        let text = g.to_tsv();
        assert!(text.starts_with("#items=4 #edges="));
        let g2 = GlobalGraph::from_tsv(&text).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn tsv_rejects_bad_content() {
        assert!(GlobalGraph::from_tsv("").is_err());
        assert!(GlobalGraph::from_tsv("#items=3 #edges=1\n2\t1\n").is_err());
        assert!(GlobalGraph::from_tsv("#items=3 #edges=2\n1\t2\n").is_err());
        assert!(GlobalGraph::from_tsv("#items=3 #edges=1\n1\t5\n").is_err());
    }

    #[test]
    fn degree_cap_is_symmetric_and_deterministic() {
        // Star plus ring: item 1 connects to everyone, others form a cycle.
        let mut seqs: Vec<Vec<usize>> = Vec::new();
        for j in 2..=9usize {
            seqs.push(vec![1, j]);
            seqs.push(vec![j, if j == 9 { 2 } else { j + 1 }]);
        }
        let g = build_global_graph(seqs.iter().map(Vec::as_slice), 9).unwrap();
        assert_eq!(g.neighbors_of(1).unwrap().len(), 8);
        let capped = g.cap_degrees(3, 42);
        let original = edge_set(&g);
        for i in 1..=9 {
            let neigh = capped.neighbors_of(i).unwrap();
            assert!(neigh.len() <= 3, "item {i} degree {}", neigh.len());
            for &j in neigh {
                assert!(capped.neighbors_of(j).unwrap().contains(&i));
                assert!(original.contains(&(i.min(j), i.max(j))));
            }
        }
        assert_eq!(capped, g.cap_degrees(3, 42));
        assert_eq!(g.cap_degrees(100, 1), g);
    }
}
