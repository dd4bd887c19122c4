//! Plot-ready exports of the trained global representations: raw vectors,
//! the per-item channel assignment, and a deterministic 2-D PCA
//! projection.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::GlobalGraph;
use crate::model::{global_aggregate_with_channel_norms, ModelParams};
use crate::tensor::Tensor;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: returns
/// eigenvalues in descending order and the matching orthonormal
/// eigenvectors as columns.
fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::Model(format!("eigendecomposition needs a square matrix, got {n}x{m}")));
    }
    let max_abs = a.data().iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()));
    let sym_tol = 1e-9 * (1.0 + max_abs);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.at(i, j) - a.at(j, i)).abs() > sym_tol {
                return Err(Error::Model(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    a.at(i, j),
                    a.at(j, i)
                )));
            }
        }
    }
    let mut d = a.clone();
    let mut v = Tensor::zeros(&[n, n]);
    for i in 0..n {
        *v.at_mut(i, i) = 1.0;
    }
    let scale = max_abs.max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += d.at(i, j) * d.at(i, j);
            }
        }
        if off.sqrt() < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = d.at(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = d.at(p, p);
                let aqq = d.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let dkp = d.at(k, p);
                    let dkq = d.at(k, q);
                    *d.at_mut(k, p) = c * dkp - s * dkq;
                    *d.at_mut(k, q) = s * dkp + c * dkq;
                }
                for k in 0..n {
                    let dpk = d.at(p, k);
                    let dqk = d.at(q, k);
                    *d.at_mut(p, k) = c * dpk - s * dqk;
                    *d.at_mut(q, k) = s * dpk + c * dqk;
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    *v.at_mut(k, p) = c * vkp - s * vkq;
                    *v.at_mut(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d.at(j, j).partial_cmp(&d.at(i, i)).expect("finite eigenvalues"));
    let values: Vec<f64> = order.iter().map(|&i| d.at(i, i)).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            *vectors.at_mut(row, col) = v.at(row, src);
        }
    }
    Ok((values, vectors))
}

/// Mean-center the rows of `points` and project onto the top-2 principal
/// directions. Deterministic: eigenvalues sorted descending (ties by
/// original index) and each component's sign fixed so its
/// largest-magnitude entry is positive.
pub fn pca_2d(points: &Tensor) -> Result<Tensor> {
    let (n, d) = points.dims2()?;
    if n < 2 {
        return Err(Error::Model(format!("PCA needs at least 2 points, got {n}")));
    }
    if d < 2 {
        return Err(Error::Model(format!("PCA to 2 components needs dimension >= 2, got {d}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &x) in mean.iter_mut().zip(points.row(r)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = points.clone();
    for r in 0..n {
        for (x, &m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let cov = centered.matmul_tn(&centered)?.scale(1.0 / (n as f64 - 1.0));
    let (_, vectors) = symmetric_eigen(&cov)?;
    let mut basis = Tensor::zeros(&[d, 2]);
    for col in 0..2 {
        let column: Vec<f64> = (0..d).map(|row| vectors.at(row, col)).collect();
        let lead = column
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                a.abs().partial_cmp(&b.abs()).expect("finite components")
            })
            .map(|(i, _)| i)
            .expect("d >= 2");
        let flip = if column[lead] < 0.0 { -1.0 } else { 1.0 };
        for (row, &value) in column.iter().enumerate() {
            *basis.at_mut(row, col) = flip * value;
        }
    }
    centered.matmul(&basis)
}

/// argmax over per-channel block strengths, ties to the lowest channel.
fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-item channel assignment: the channel whose aggregated block has the
/// largest norm before per-channel normalization. Index 0 of the result
/// corresponds to item 1.
pub fn channel_assignment(params: &ModelParams, graph: &GlobalGraph) -> Result<Vec<usize>> {
    let (_, norms) =
        global_aggregate_with_channel_norms(graph, &params.item_embed, &params.channel_w)?;
    Ok((1..norms.rows()).map(|i| argmax_row(norms.row(i))).collect())
}

fn format_float(x: f64) -> String {
    // shortest round-trip formatting keeps files compact and exact
    let mut s = format!("{x}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

fn write_tsv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.join("\t"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write `embeddings.tsv` (item, global vector), `channels.tsv` (item,
/// argmax channel), and `pca2d.tsv` (item, x, y) into `dir`.
pub fn export_embeddings(params: &ModelParams, graph: &GlobalGraph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (z_g, norms) =
        global_aggregate_with_channel_norms(graph, &params.item_embed, &params.channel_w)?;
    let n_items = graph.n_items();
    let width = z_g.cols();

    let mut emb_rows = Vec::with_capacity(n_items);
    let mut chan_rows = Vec::with_capacity(n_items);
    for item in 1..=n_items {
        let mut row = Vec::with_capacity(width + 1);
        row.push(item.to_string());
        row.extend(z_g.row(item).iter().map(|&v| format_float(v)));
        emb_rows.push(row);
        chan_rows.push(vec![item.to_string(), argmax_row(norms.row(item)).to_string()]);
    }
    let emb_header: String = std::iter::once("item".to_string())
        .chain((0..width).map(|c| format!("v{c}")))
        .collect::<Vec<_>>()
        .join("\t");
    write_tsv(&dir.join("embeddings.tsv"), &emb_header, &emb_rows)?;
    write_tsv(&dir.join("channels.tsv"), "item\tchannel", &chan_rows)?;

    // PCA over the catalog rows (padding row excluded)
    let mut catalog = Tensor::zeros(&[n_items, width]);
    for item in 1..=n_items {
        catalog.row_mut(item - 1).copy_from_slice(z_g.row(item));
    }
    let proj = pca_2d(&catalog)?;
    let mut pca_rows = Vec::with_capacity(n_items);
    for item in 1..=n_items {
        pca_rows.push(vec![
            item.to_string(),
            format_float(proj.at(item - 1, 0)),
            format_float(proj.at(item - 1, 1)),
        ]);
    }
    write_tsv(&dir.join("pca2d.tsv"), "item\tx\ty", &pca_rows)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::graph::build_global_graph;
    use crate::model::HyperParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .unwrap()
    }

    #[test]
    fn eigen_reconstructs_the_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let raw = rand_tensor(&mut rng, &[5, 5]);
            let sym = raw.add(&raw.transpose().unwrap()).unwrap().scale(0.5);
            let (values, vectors) = symmetric_eigen(&sym).unwrap();
            // descending eigenvalues
            for pair in values.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
            // A v_i = lambda_i v_i and orthonormal columns
            for i in 0..5 {
                for r in 0..5 {
                    let mut av = 0.0;
                    for c in 0..5 {
                        av += sym.at(r, c) * vectors.at(c, i);
                    }
                    assert!((av - values[i] * vectors.at(r, i)).abs() < 1e-9);
                }
                for j in 0..5 {
                    let dot: f64 =
                        (0..5).map(|r| vectors.at(r, i) * vectors.at(r, j)).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
        }
    }

    /// Independent top-eigenvector method: power iteration plus deflation.
    fn power_iteration_top2(a: &Tensor) -> [Vec<f64>; 2] {
        let n = a.rows();
        let mut m = a.clone();
        let mut out: [Vec<f64>; 2] = [vec![], vec![]];
        for slot in &mut out {
            let mut v: Vec<f64> = (0..n).map(|i| 1.0 / (i as f64 + 1.0)).collect();
            for _ in 0..20_000 {
                let mut next = vec![0.0; n];
                for r in 0..n {
                    for c in 0..n {
                        next[r] += m.at(r, c) * v[c];
                    }
                }
                let norm: f64 = next.iter().map(|&x| x * x).sum::<f64>().sqrt();
                for x in &mut next {
                    *x /= norm;
                }
                v = next;
            }
            let mut av = vec![0.0; n];
            for r in 0..n {
                for c in 0..n {
                    av[r] += m.at(r, c) * v[c];
                }
            }
            let lambda: f64 = v.iter().zip(&av).map(|(&a, &b)| a * b).sum();
            for r in 0..n {
                for c in 0..n {
                    *m.at_mut(r, c) -= lambda * v[r] * v[c];
                }
            }
            *slot = v;
        }
        out
    }

    #[test]
    fn pca_matches_power_iteration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points = rand_tensor(&mut rng, &[40, 6]);
        let proj = pca_2d(&points).unwrap();

        // oracle: center, covariance, top-2 by power iteration
        let n = 40;
        let d = 6;
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                mean[c] += points.at(r, c) / n as f64;
            }
        }
        let mut centered = points.clone();
        for r in 0..n {
            for c in 0..d {
                *centered.at_mut(r, c) -= mean[c];
            }
        }
        let cov = centered.matmul_tn(&centered).unwrap().scale(1.0 / (n as f64 - 1.0));
        let top2 = power_iteration_top2(&cov);
        for (col, vec_oracle) in top2.iter().enumerate() {
            // fix the oracle's sign by the same rule
            let lead = vec_oracle
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).unwrap())
                .unwrap()
                .0;
            let flip = if vec_oracle[lead] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..n {
                let mut want = 0.0;
                for c in 0..d {
                    want += centered.at(r, c) * flip * vec_oracle[c];
                }
                assert!(
                    (proj.at(r, col) - want).abs() < 1e-9,
                    "row {r} component {col}: {} vs {}",
                    proj.at(r, col),
                    want
                );
            }
        }
    }

    #[test]
    fn planar_input_projects_isometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let points = rand_tensor(&mut rng, &[25, 2]);
        let proj = pca_2d(&points).unwrap();
        for i in 0..25 {
            for j in (i + 1)..25 {
                let orig: f64 = (0..2)
                    .map(|c| (points.at(i, c) - points.at(j, c)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let now: f64 = (0..2)
                    .map(|c| (proj.at(i, c) - proj.at(j, c)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((orig - now).abs() < 1e-9, "pair ({i}, {j})");
            }
        }
    }

    #[test]
    fn pca_rejects_degenerate_shapes() {
        assert!(pca_2d(&Tensor::zeros(&[1, 5])).is_err());
        assert!(pca_2d(&Tensor::zeros(&[5, 1])).is_err());
    }

    fn tiny_setup(k: usize) -> (ModelParams, GlobalGraph) {
        let hyper = HyperParams {
            k,
            d_in: 6,
            d_channel: 3,
            t: 4,
            l: 3,
            beta: 0.1,
            dropout: 0.0,
            lr: 0.002,
            batch_size: 4,
            epochs: 1,
            seed: 5,
        };
        let params = ModelParams::init(&hyper, 8);
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8, 1], vec![2, 5]];
        let graph = build_global_graph(seqs.iter().map(Vec::as_slice), 8).unwrap();
        (params, graph)
    }

    #[test]
    fn single_channel_assigns_everything_to_zero() {
        let (params, graph) = tiny_setup(1);
        let assign = channel_assignment(&params, &graph).unwrap();
        assert_eq!(assign.len(), 8);
        assert!(assign.iter().all(|&k| k == 0));
    }

    #[test]
    fn export_writes_three_deterministic_files() {
        let (params, graph) = tiny_setup(2);
        let dir = tempfile::tempdir().unwrap();
        export_embeddings(&params, &graph, dir.path()).unwrap();

        let emb = std::fs::read_to_string(dir.path().join("embeddings.tsv")).unwrap();
        let chan = std::fs::read_to_string(dir.path().join("channels.tsv")).unwrap();
        let pca = std::fs::read_to_string(dir.path().join("pca2d.tsv")).unwrap();
        assert_eq!(emb.lines().count(), 9, "header + 8 items");
        assert_eq!(chan.lines().count(), 9);
        assert_eq!(pca.lines().count(), 9);
        assert!(emb.starts_with("item\tv0\t"));
        assert!(chan.starts_with("item\tchannel"));
        assert!(pca.starts_with("item\tx\ty"));
        // channel column parses and stays within range
        for line in chan.lines().skip(1) {
            let k: usize = line.split('\t').nth(1).unwrap().parse().unwrap();
            assert!(k < 2);
        }
        // embeddings match the aggregation values exactly
        let (z_g, _) = global_aggregate_with_channel_norms(
            &graph,
            &params.item_embed,
            &params.channel_w,
        )
        .unwrap();
        let second = emb.lines().nth(1).unwrap();
        let cells: Vec<&str> = second.split('\t').collect();
        assert_eq!(cells[0], "1");
        for (c, cell) in cells[1..].iter().enumerate() {
            let v: f64 = cell.parse().unwrap();
            assert_eq!(v, z_g.at(1, c), "column {c} must round-trip exactly");
        }

        let again = tempfile::tempdir().unwrap();
        export_embeddings(&params, &graph, again.path()).unwrap();
        let emb2 = std::fs::read_to_string(again.path().join("embeddings.tsv")).unwrap();
        assert_eq!(emb, emb2, "export must be byte-identical for identical inputs");
    }
}
