//! Minimal reverse-mode tape over [`Tensor`] values.
//!
//! The model's forward pass records tensor-level operations onto a [`Tape`];
//! [`Tape::backward`] then replays them in reverse, accumulating gradients
//! into every reachable node. Each operation carries its own analytic
//! backward rule, and every rule is held to the finite-difference contract
//! (relative error < 1e-6 over repeated random probes — see the tests at the
//! bottom of this file).
//!
//! The tape is deliberately small: only the operations the model actually
//! uses exist, and several of them are fused domain ops (per-edge channel
//! dots, weighted neighbor sums, the full-catalog softmax/BCE) so that a
//! training batch records a few dozen nodes instead of millions of scalars.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, LAYER_NORM_EPS, MASK_VALUE};
use crate::tensor::Tensor;

/// Log arguments in the catalog cross entropy are clamped here.
pub const BCE_CLAMP: f64 = 1e-12;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// What to do with a softmax row whose keys are all masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeadRows {
    /// Reject the input (the public attention primitive's contract).
    Error,
    /// Emit an all-zero weight row. Used by the model for padding queries,
    /// which have no valid key and whose output is ignored downstream.
    ZeroFill,
}

type BackFn = Box<dyn Fn(&[Tensor], &Tensor, &mut [Option<Tensor>])>;

pub struct Tape {
    vals: RefCell<Vec<Tensor>>,
    backs: RefCell<Vec<Option<BackFn>>>,
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => {
            debug_assert_eq!(t.shape(), delta.shape());
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: RefCell::new(Vec::new()), backs: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.vals.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current value of a node (cloned).
    pub fn value(&self, id: NodeId) -> Tensor {
        self.vals.borrow()[id.0].clone()
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> NodeId {
        let mut vals = self.vals.borrow_mut();
        let mut backs = self.backs.borrow_mut();
        vals.push(value);
        backs.push(back);
        NodeId(vals.len() - 1)
    }

    /// A differentiable input (parameter). Gradients accumulate here.
    pub fn leaf(&self, value: Tensor) -> NodeId {
        self.push(value, None)
    }

    /// Reverse sweep from a scalar node. Returns the gradient for each of
    /// `wanted` (zeros when the node does not influence the loss).
    pub fn backward(&self, loss: NodeId, wanted: &[NodeId]) -> Result<Vec<Tensor>> {
        let vals = self.vals.borrow();
        let backs = self.backs.borrow();
        if vals[loss.0].len() != 1 {
            return Err(Error::Numerics(format!(
                "backward needs a scalar loss node, got shape {:?}",
                vals[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; vals.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if let Some(back) = backs[id].as_ref() {
                if let Some(g) = grads[id].take() {
                    back(&vals, &g, &mut grads);
                }
            }
        }
        Ok(wanted
            .iter()
            .map(|w| match grads[w.0].take() {
                Some(g) => g,
                None => Tensor::zeros(vals[w.0].shape()),
            })
            .collect())
    }

    // ---- elementwise and linear algebra ----

    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            vals[a.0].add(&vals[b.0]).expect("add shape checked by caller")
        };
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            })),
        )
    }

    /// `a (R×C) + bias ([C])` broadcast over rows.
    pub fn add_bias(&self, a: NodeId, bias: NodeId) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            let (r, c) = vals[a.0].dims2().expect("add_bias wants a matrix");
            debug_assert_eq!(vals[bias.0].len(), c);
            let mut out = vals[a.0].clone();
            for i in 0..r {
                for (v, &b) in out.row_mut(i).iter_mut().zip(vals[bias.0].data()) {
                    *v += b;
                }
            }
            out
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                accumulate(&mut grads[a.0], g.clone());
                let c = vals[bias.0].len();
                let mut db = Tensor::zeros(vals[bias.0].shape());
                for row in 0..g.len() / c {
                    for (d, &gv) in db.data_mut().iter_mut().zip(g.row(row)) {
                        *d += gv;
                    }
                }
                accumulate(&mut grads[bias.0], db);
            })),
        )
    }

    pub fn scale(&self, a: NodeId, c: f64) -> NodeId {
        let out = self.vals.borrow()[a.0].scale(c);
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                accumulate(&mut grads[a.0], g.scale(c));
            })),
        )
    }

    /// Elementwise product with a constant tensor (dropout masks, frozen ε).
    pub fn mul_const(&self, a: NodeId, c: Tensor) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            vals[a.0].zip_map(&c, |x, m| x * m).expect("mul_const shape checked by caller")
        };
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                let dg = g.zip_map(&c, |gv, m| gv * m).expect("shapes fixed at record time");
                accumulate(&mut grads[a.0], dg);
            })),
        )
    }

    pub fn tanh(&self, a: NodeId) -> NodeId {
        let out = self.vals.borrow()[a.0].map(f64::tanh);
        let out_id_holder = self.push(out, None);
        let out_idx = out_id_holder.0;
        self.backs.borrow_mut()[out_idx] = Some(Box::new(move |vals, g, grads| {
            let y = &vals[out_idx];
            let dg = g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)).expect("same shape");
            accumulate(&mut grads[a.0], dg);
        }));
        out_id_holder
    }

    pub fn exp(&self, a: NodeId) -> NodeId {
        let out = self.vals.borrow()[a.0].map(f64::exp);
        let out_id = self.push(out, None);
        let out_idx = out_id.0;
        self.backs.borrow_mut()[out_idx] = Some(Box::new(move |vals, g, grads| {
            let y = &vals[out_idx];
            let dg = g.zip_map(y, |gv, yv| gv * yv).expect("same shape");
            accumulate(&mut grads[a.0], dg);
        }));
        out_id
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&self, a: NodeId, b: NodeId) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            vals[a.0].matmul(&vals[b.0]).expect("matmul shapes checked by caller")
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let da = g.matmul_nt(&vals[b.0]).expect("shapes fixed");
                let db = vals[a.0].matmul_tn(g).expect("shapes fixed");
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            })),
        )
    }

    /// `a (m×k) · bᵀ` with `b (n×k)`; the attention-logit shape.
    pub fn matmul_nt(&self, a: NodeId, b: NodeId) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            vals[a.0].matmul_nt(&vals[b.0]).expect("matmul_nt shapes checked by caller")
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let da = g.matmul(&vals[b.0]).expect("shapes fixed");
                let db = g.matmul_tn(&vals[a.0]).expect("shapes fixed");
                accumulate(&mut grads[a.0], da);
                accumulate(&mut grads[b.0], db);
            })),
        )
    }

    // ---- row selection / assembly ----

    /// Gather rows of `src` by index (embedding lookup). Repeated indices
    /// are allowed; their gradients accumulate into the same source row.
    pub fn gather_rows(&self, src: NodeId, indices: Vec<usize>) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            let s = &vals[src.0];
            let c = s.cols();
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in &indices {
                data.extend_from_slice(s.row(i));
            }
            Tensor::new(&[indices.len(), c], data).expect("gather shape consistent")
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let mut ds = Tensor::zeros(vals[src.0].shape());
                let c = ds.cols();
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut ds.row_mut(i)[..c];
                    for (d, &gv) in dst.iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                accumulate(&mut grads[src.0], ds);
            })),
        )
    }

    /// Single row as a 1×C matrix.
    pub fn select_row(&self, src: NodeId, row: usize) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            let s = &vals[src.0];
            Tensor::new(&[1, s.cols()], s.row(row).to_vec()).expect("row shape")
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let mut ds = Tensor::zeros(vals[src.0].shape());
                for (d, &gv) in ds.row_mut(row).iter_mut().zip(g.data()) {
                    *d += gv;
                }
                accumulate(&mut grads[src.0], ds);
            })),
        )
    }

    /// Concatenate matrices along columns (equal row counts).
    pub fn concat_cols(&self, parts: &[NodeId]) -> NodeId {
        let parts: Vec<NodeId> = parts.to_vec();
        let (out, widths) = {
            let vals = self.vals.borrow();
            let rows = vals[parts[0].0].rows();
            let widths: Vec<usize> = parts.iter().map(|p| vals[p.0].cols()).collect();
            let total: usize = widths.iter().sum();
            let mut out = Tensor::zeros(&[rows, total]);
            for r in 0..rows {
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    out.row_mut(r)[off..off + w].copy_from_slice(vals[p.0].row(r));
                    off += w;
                }
            }
            (out, widths)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let rows = g.rows();
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    let mut dp = Tensor::zeros(vals[p.0].shape());
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    accumulate(&mut grads[p.0], dp);
                    off += w;
                }
            })),
        )
    }

    /// Stack equal-length vectors as the columns of a matrix (E×K from K
    /// per-edge score vectors).
    pub fn stack_cols(&self, cols: &[NodeId]) -> NodeId {
        let cols: Vec<NodeId> = cols.to_vec();
        let out = {
            let vals = self.vals.borrow();
            let e = vals[cols[0].0].len();
            let k = cols.len();
            let mut out = Tensor::zeros(&[e, k]);
            for (ci, c) in cols.iter().enumerate() {
                for (r, &v) in vals[c.0].data().iter().enumerate() {
                    *out.at_mut(r, ci) = v;
                }
            }
            out
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                for (ci, c) in cols.iter().enumerate() {
                    let mut dc = Tensor::zeros(vals[c.0].shape());
                    for r in 0..dc.len() {
                        dc.data_mut()[r] = g.at(r, ci);
                    }
                    accumulate(&mut grads[c.0], dc);
                }
            })),
        )
    }

    // ---- normalization / attention ----

    /// Row softmax with an optional hard mask (nonzero = disallowed, −1e9
    /// added to the logit). Masked entries come out exactly 0. Rows with
    /// every entry masked follow the `dead` policy.
    pub fn softmax_rows(
        &self,
        a: NodeId,
        mask: Option<&Tensor>,
        dead: DeadRows,
    ) -> Result<NodeId> {
        let out = {
            let vals = self.vals.borrow();
            let x = &vals[a.0];
            let (rows, cols) = x.dims2()?;
            if let Some(m) = mask {
                if m.dims2()? != (rows, cols) {
                    return Err(Error::Numerics(format!(
                        "softmax mask shape {:?} does not match {rows}x{cols}",
                        m.shape()
                    )));
                }
            }
            let mut out = x.clone();
            for r in 0..rows {
                let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
                let dead_row = match mask {
                    Some(m) => {
                        let mrow = m.row(r);
                        let all = mrow.iter().all(|&f| f != 0.0);
                        if !all {
                            for (v, &f) in row.iter_mut().zip(mrow) {
                                if f != 0.0 {
                                    *v += MASK_VALUE;
                                }
                            }
                        }
                        all
                    }
                    None => false,
                };
                if dead_row {
                    match dead {
                        DeadRows::Error => {
                            return Err(Error::Numerics(format!(
                                "softmax row {r} has every position masked"
                            )))
                        }
                        DeadRows::ZeroFill => row.fill(0.0),
                    }
                } else {
                    softmax_slice(row);
                }
            }
            out
        };
        let out_id = self.push(out, None);
        let out_idx = out_id.0;
        self.backs.borrow_mut()[out_idx] = Some(Box::new(move |vals, g, grads| {
            let y = &vals[out_idx];
            let (rows, cols) = (y.rows(), y.cols());
            let mut dx = Tensor::zeros(y.shape());
            for r in 0..rows {
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                let dr = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            accumulate(&mut grads[a.0], dx);
        }));
        Ok(out_id)
    }

    /// Row-wise l2 normalization; rows with norm below `eps` pass through
    /// unchanged (and carry an identity Jacobian).
    pub fn l2norm_rows(&self, a: NodeId, eps: f64) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            let x = &vals[a.0];
            let mut out = x.clone();
            let cols = out.cols();
            for r in 0..out.rows() {
                crate::numerics::l2_normalize_slice(
                    &mut out.data_mut()[r * cols..(r + 1) * cols],
                    eps,
                );
            }
            out
        };
        let out_id = self.push(out, None);
        let out_idx = out_id.0;
        self.backs.borrow_mut()[out_idx] = Some(Box::new(move |vals, g, grads| {
            let x = &vals[a.0];
            let y = &vals[out_idx];
            let mut dx = Tensor::zeros(x.shape());
            let cols = x.cols();
            for r in 0..x.rows() {
                let xr = x.row(r);
                let yr = y.row(r);
                let gr = g.row(r);
                let norm = xr.iter().map(|&v| v * v).sum::<f64>().sqrt();
                let dr = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                if norm < eps {
                    dr.copy_from_slice(gr);
                } else {
                    let ydotg: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * ydotg) / norm;
                    }
                }
            }
            accumulate(&mut grads[a.0], dx);
        }));
        out_id
    }

    /// Row-wise layer normalization with learned gain/bias, variance floor
    /// `max(var, 1e-8)` as in [`crate::numerics::layer_norm`].
    pub fn layer_norm(&self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            crate::numerics::layer_norm(&vals[x.0], &vals[gain.0], &vals[bias.0])
                .expect("layer_norm shapes checked by caller")
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let xv = &vals[x.0];
                let gv = &vals[gain.0];
                let (rows, d) = (xv.rows(), xv.cols());
                let df = d as f64;
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = Tensor::zeros(gv.shape());
                let mut dbias = Tensor::zeros(gv.shape());
                for r in 0..rows {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let mean = xr.iter().sum::<f64>() / df;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let floored = var < LAYER_NORM_EPS;
                    let std = var.max(LAYER_NORM_EPS).sqrt();
                    // xhat and the two row means the backward needs
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) / std).collect();
                    let u: Vec<f64> =
                        gr.iter().zip(gv.data()).map(|(&gg, &ga)| gg * ga).collect();
                    let mean_u = u.iter().sum::<f64>() / df;
                    let mean_ux = u.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / df;
                    for j in 0..d {
                        dgain.data_mut()[j] += gr[j] * xhat[j];
                        dbias.data_mut()[j] += gr[j];
                        let term = if floored {
                            // std is a constant in this branch
                            u[j] - mean_u
                        } else {
                            u[j] - mean_u - xhat[j] * mean_ux
                        };
                        dx.data_mut()[r * d + j] = term / std;
                    }
                }
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[gain.0], dgain);
                accumulate(&mut grads[bias.0], dbias);
            })),
        )
    }

    // ---- graph / sequence aggregation ----

    /// Per-edge dot products: `out[e] = z[src[e]] · z[dst[e]]`.
    pub fn edge_dot(&self, z: NodeId, src: Rc<Vec<usize>>, dst: Rc<Vec<usize>>) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            let zv = &vals[z.0];
            let data: Vec<f64> = src
                .iter()
                .zip(dst.iter())
                .map(|(&s, &d)| {
                    zv.row(s).iter().zip(zv.row(d)).map(|(&a, &b)| a * b).sum()
                })
                .collect();
            Tensor::from_vec(data)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let zv = &vals[z.0];
                let mut dz = Tensor::zeros(zv.shape());
                for ((&s, &d), &gv) in src.iter().zip(dst.iter()).zip(g.data()) {
                    // s and d are distinct rows (no self-loops upstream),
                    // but accumulate handles s == d correctly anyway.
                    for (dd, &zv_s) in dz.row_mut(d).iter_mut().zip(zv.row(s)) {
                        *dd += gv * zv_s;
                    }
                    for (ds, &zv_d) in dz.row_mut(s).iter_mut().zip(zv.row(d)) {
                        *ds += gv * zv_d;
                    }
                }
                accumulate(&mut grads[z.0], dz);
            })),
        )
    }

    /// Weighted neighbor sum for channel `k`:
    /// `out[dst[e]] += alpha[e, k] * z[src[e]]`, output shaped like `z`.
    pub fn weighted_seg_sum(
        &self,
        z: NodeId,
        alpha: NodeId,
        k: usize,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
    ) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            let zv = &vals[z.0];
            let av = &vals[alpha.0];
            let mut out = Tensor::zeros(zv.shape());
            for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                let w = av.at(e, k);
                for (o, &zv_s) in out.row_mut(d).iter_mut().zip(zv.row(s)) {
                    *o += w * zv_s;
                }
            }
            out
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let zv = &vals[z.0];
                let av = &vals[alpha.0];
                let mut dz = Tensor::zeros(zv.shape());
                let mut da = Tensor::zeros(av.shape());
                for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                    let w = av.at(e, k);
                    let grow = g.row(d);
                    for (dzs, &gv) in dz.row_mut(s).iter_mut().zip(grow) {
                        *dzs += w * gv;
                    }
                    *da.at_mut(e, k) +=
                        zv.row(s).iter().zip(grow).map(|(&a, &b)| a * b).sum::<f64>();
                }
                accumulate(&mut grads[z.0], dz);
                accumulate(&mut grads[alpha.0], da);
            })),
        )
    }

    // ---- prediction head / losses ----

    /// Scores of every catalog item against a combined representation:
    /// `out[i-1] = embed[i] · z` for items 1..=N (row 0 is padding).
    pub fn catalog_scores(&self, z: NodeId, embed: NodeId) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            let zv = &vals[z.0];
            let ev = &vals[embed.0];
            let n = ev.rows() - 1;
            let mut data = Vec::with_capacity(n);
            for i in 1..=n {
                data.push(ev.row(i).iter().zip(zv.data()).map(|(&a, &b)| a * b).sum());
            }
            Tensor::from_vec(data)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let zv = &vals[z.0];
                let ev = &vals[embed.0];
                let n = ev.rows() - 1;
                let mut dz = Tensor::zeros(zv.shape());
                let mut de = Tensor::zeros(ev.shape());
                for i in 1..=n {
                    let gv = g.data()[i - 1];
                    if gv == 0.0 {
                        continue;
                    }
                    for (dzj, &e) in dz.data_mut().iter_mut().zip(ev.row(i)) {
                        *dzj += gv * e;
                    }
                    for (dej, &zj) in de.row_mut(i).iter_mut().zip(zv.data()) {
                        *dej += gv * zj;
                    }
                }
                accumulate(&mut grads[z.0], dz);
                accumulate(&mut grads[embed.0], de);
            })),
        )
    }

    /// Full-catalog binary cross entropy against a one-hot target, fused
    /// with the catalog softmax:
    /// `L = −ln ŷ_t − Σ_{i≠t} ln(1−ŷ_i)`, `ŷ = softmax(scores)`,
    /// log arguments clamped at 1e-12.
    pub fn softmax_bce(&self, scores: NodeId, target: usize) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            let mut p = vals[scores.0].clone();
            softmax_slice(p.data_mut());
            let mut loss = 0.0;
            for (i, &pi) in p.data().iter().enumerate() {
                if i == target {
                    loss -= pi.max(BCE_CLAMP).ln();
                } else {
                    loss -= (1.0 - pi).max(BCE_CLAMP).ln();
                }
            }
            Tensor::scalar(loss)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let gv = g.data()[0];
                let mut p = vals[scores.0].clone();
                softmax_slice(p.data_mut());
                // q = dL/dp with the clamp's dead zones respected, then the
                // softmax Jacobian: ds_j = p_j (q_j − Σ_i q_i p_i).
                let q: Vec<f64> = p
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &pi)| {
                        if i == target {
                            if pi > BCE_CLAMP {
                                -1.0 / pi
                            } else {
                                0.0
                            }
                        } else if 1.0 - pi > BCE_CLAMP {
                            1.0 / (1.0 - pi)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let c: f64 = q.iter().zip(p.data()).map(|(&a, &b)| a * b).sum();
                let mut ds = Tensor::zeros(p.shape());
                for ((d, &qi), &pi) in ds.data_mut().iter_mut().zip(&q).zip(p.data()) {
                    *d = gv * pi * (qi - c);
                }
                accumulate(&mut grads[scores.0], ds);
            })),
        )
    }

    /// KL divergence of a diagonal Gaussian from the standard normal,
    /// summed over all elements, with the variance carried as log σ²:
    /// `½ Σ (μ² + exp(lv) − lv − 1)`.
    pub fn gauss_kl(&self, mu: NodeId, logvar: NodeId) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            let m = &vals[mu.0];
            let lv = &vals[logvar.0];
            let mut kl = 0.0;
            for (&mi, &li) in m.data().iter().zip(lv.data()) {
                kl += mi * mi + li.exp() - li - 1.0;
            }
            Tensor::scalar(0.5 * kl)
        };
        self.push(
            out,
            Some(Box::new(move |vals, g, grads| {
                let gv = g.data()[0];
                let dm = vals[mu.0].scale(gv);
                let dl = vals[logvar.0].map(|li| 0.5 * gv * (li.exp() - 1.0));
                accumulate(&mut grads[mu.0], dm);
                accumulate(&mut grads[logvar.0], dl);
            })),
        )
    }

    /// Mean of scalar nodes (the batch objective).
    pub fn mean_scalars(&self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Error::Numerics("mean of zero scalars".into()));
        }
        let items: Vec<NodeId> = items.to_vec();
        let out = {
            let vals = self.vals.borrow();
            let sum: f64 = items.iter().map(|i| vals[i.0].data()[0]).sum();
            Tensor::scalar(sum / items.len() as f64)
        };
        let n = items.len() as f64;
        Ok(self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                let share = g.data()[0] / n;
                for i in &items {
                    accumulate(&mut grads[i.0], Tensor::scalar(share));
                }
            })),
        ))
    }

    /// `Σ a ⊙ w` for a constant weight tensor; reduces any node to a scalar
    /// (used by the per-operation gradient checks).
    pub fn sum_weighted(&self, a: NodeId, w: Tensor) -> NodeId {
        let out = {
            let vals = self.vals.borrow();
            Tensor::scalar(
                vals[a.0].data().iter().zip(w.data()).map(|(&x, &ww)| x * ww).sum(),
            )
        };
        self.push(
            out,
            Some(Box::new(move |_vals, g, grads| {
                accumulate(&mut grads[a.0], w.scale(g.data()[0]));
            })),
        )
    }
}
