//! Neural primitives and the finite-difference gradient checker.
//!
//! Everything here is a pure function of its inputs (plus an explicit seed
//! where randomness is involved); there is no hidden global RNG state. All
//! arithmetic is 64-bit: the gradient checker compares analytic derivatives
//! against central differences at tolerances that f32 cannot meet.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Additive logit penalty for masked attention positions. Large enough that
/// `exp` underflows to exactly 0 after the max shift, so masked positions
/// get zero weight, not merely small weight.
pub const MASK_VALUE: f64 = -1e9;

/// Variance floor used by [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Stateless seed derivation: one run seed fans out into independent
/// streams (per user, per batch, per draw) without any shared RNG.
/// splitmix64 finalizer over the combined words.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible tensor of standard-normal draws, tagged with the
/// (seed, stream) pair that produced it.
#[derive(Debug, Clone)]
pub struct GaussianSample {
    epsilon: Tensor,
    seed: u64,
    stream: u64,
}

impl GaussianSample {
    pub fn draw(shape: &[usize], seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stream));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        GaussianSample {
            epsilon: Tensor::new(shape, data).expect("shape/product always consistent"),
            seed,
            stream,
        }
    }

    /// All-zero epsilon: turns the reparameterized sample into the mean.
    pub fn zero(shape: &[usize]) -> Self {
        GaussianSample { epsilon: Tensor::zeros(shape), seed: 0, stream: 0 }
    }

    pub fn epsilon(&self) -> &Tensor {
        &self.epsilon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

/// Softmax along `axis` (0 = down columns, 1 = along rows; a vector only
/// has axis 0). Shift-invariant: the row max is subtracted before
/// exponentiation.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.check_finite("softmax input")?;
    match (x.rank(), axis) {
        (1, 0) => {
            let mut out = x.clone();
            softmax_slice(out.data_mut());
            Ok(out)
        }
        (2, 1) => {
            let mut out = x.clone();
            let c = out.cols();
            for r in 0..out.rows() {
                softmax_slice(&mut out.data_mut()[r * c..(r + 1) * c]);
            }
            Ok(out)
        }
        (2, 0) => {
            let t = x.transpose()?;
            let s = softmax(&t, 1)?;
            s.transpose()
        }
        (rank, axis) => Err(Error::Numerics(format!(
            "softmax axis {axis} invalid for rank-{rank} tensor"
        ))),
    }
}

pub(crate) fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// l2-normalize along `axis`. A slice whose norm falls below `eps` is
/// returned unchanged (the documented degenerate case; relevant for the
/// all-zero padding embedding).
pub fn l2_normalize(x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    match (x.rank(), axis) {
        (1, 0) => {
            let mut out = x.clone();
            l2_normalize_slice(out.data_mut(), eps);
            Ok(out)
        }
        (2, 1) => {
            let mut out = x.clone();
            let c = out.cols();
            for r in 0..out.rows() {
                l2_normalize_slice(&mut out.data_mut()[r * c..(r + 1) * c], eps);
            }
            Ok(out)
        }
        (2, 0) => {
            let t = x.transpose()?;
            let s = l2_normalize(&t, 1, eps)?;
            s.transpose()
        }
        (rank, axis) => Err(Error::Numerics(format!(
            "l2_normalize axis {axis} invalid for rank-{rank} tensor"
        ))),
    }
}

pub(crate) fn l2_normalize_slice(row: &mut [f64], eps: f64) {
    let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if norm >= eps {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

/// Row-wise layer normalization with learned gain and bias:
/// `y = gain ⊙ (x − mean) / sqrt(max(var, 1e-8)) + bias`, variance taken
/// as the population variance of the row.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, d) = x.dims2()?;
    if d < 2 {
        return Err(Error::Numerics(format!(
            "layer_norm needs last-axis extent >= 2, got {d}"
        )));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::Numerics(format!(
            "layer_norm gain/bias length must be {d}, got {}/{}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        layer_norm_slice(row, gain.data(), bias.data());
    }
    Ok(out)
}

pub(crate) fn layer_norm_slice(row: &mut [f64], gain: &[f64], bias: &[f64]) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let std = var.max(LAYER_NORM_EPS).sqrt();
    for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
        *v = g * (*v - mean) / std + b;
    }
}

/// Single-head scaled dot-product attention:
/// `D = softmax(QKᵀ/√d + mask)·V`, with `mask[q][k] != 0` marking key `k`
/// as disallowed for query `q` (the mask adds −1e9 to those logits).
///
/// A query with every key masked has no valid attention target and is an
/// error here; the model layer handles its padding queries before calling.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    Ok(scaled_dot_attention_weights(q, k, v, mask)?.0)
}

/// As [`scaled_dot_attention`] but also returns the attention-weight
/// matrix, for inspection and tests.
pub fn scaled_dot_attention_weights(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (tq, d) = q.dims2()?;
    let (tk, dk) = k.dims2()?;
    let (tv, _dv) = v.dims2()?;
    if d != dk || tk != tv {
        return Err(Error::Numerics(format!(
            "attention shape mismatch: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut logits = q.matmul_nt(k)?;
    let scale = 1.0 / (d as f64).sqrt();
    for v in logits.data_mut() {
        *v *= scale;
    }
    if let Some(m) = mask {
        if m.dims2()? != (tq, tk) {
            return Err(Error::Numerics(format!(
                "attention mask shape {:?} does not match {tq}x{tk}",
                m.shape()
            )));
        }
        for (l, &flag) in logits.data_mut().iter_mut().zip(m.data()) {
            if flag != 0.0 {
                *l += MASK_VALUE;
            }
        }
    }
    for qi in 0..tq {
        let all_masked = match mask {
            Some(m) => m.row(qi).iter().all(|&f| f != 0.0),
            None => false,
        };
        if all_masked {
            return Err(Error::Numerics(format!(
                "attention query {qi} has every key masked"
            )));
        }
        softmax_slice(logits.row_mut(qi));
    }
    let out = logits.matmul(v)?;
    Ok((out, logits))
}

/// Reparameterization trick: `z = μ + σ ⊙ ε`. `sigma` is the standard
/// deviation itself; the model derives it from its log-variance head as
/// `σ = exp(½ log σ²)` before calling.
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, sample: &GaussianSample) -> Result<Tensor> {
    if mu.shape() != sigma.shape() || mu.shape() != sample.epsilon().shape() {
        return Err(Error::Numerics(format!(
            "reparameterize shape mismatch: mu {:?}, sigma {:?}, eps {:?}",
            mu.shape(),
            sigma.shape(),
            sample.epsilon().shape()
        )));
    }
    let scaled = sigma.zip_map(sample.epsilon(), |s, e| s * e)?;
    mu.add(&scaled)
}

/// Outcome of a finite-difference sweep. Relative error uses the
/// denominator `max(|analytic|, |estimate|, 1e-8)`.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel: f64,
    pub mean_rel: f64,
    pub checked: usize,
    pub worst: Option<FdWorst>,
}

#[derive(Debug, Clone)]
pub struct FdWorst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub estimate: f64,
    pub rel: f64,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel < tol
    }
}

/// Central-difference gradient check: for every element of every parameter
/// tensor, compare `(f(θ+h) − f(θ−h)) / 2h` against the supplied analytic
/// gradient. `f` sees the perturbed parameter set in the same order as
/// `params`.
pub fn finite_diff_check<F>(
    f: F,
    params: &[Tensor],
    names: &[&str],
    analytic: &[Tensor],
    h: f64,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    finite_diff_check_multi(f, params, names, analytic, &[h])
}

/// [`finite_diff_check`] over several step sizes, scoring each coordinate
/// by its best step. The optimal step depends on the local third
/// derivative: large steps suffer truncation error on high-curvature
/// coordinates, small steps amplify floating-point cancellation on
/// small-gradient ones. A correct analytic gradient agrees with the
/// estimate at some step in the range; a wrong one fails at every step.
pub fn finite_diff_check_multi<F>(
    mut f: F,
    params: &[Tensor],
    names: &[&str],
    analytic: &[Tensor],
    steps: &[f64],
) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if steps.is_empty() {
        return Err(Error::Numerics("no finite-difference steps given".into()));
    }
    for &h in steps {
        if !(1e-6..=1e-4).contains(&h) {
            return Err(Error::Numerics(format!(
                "finite-difference step {h} outside [1e-6, 1e-4]"
            )));
        }
    }
    if params.len() != analytic.len() || params.len() != names.len() {
        return Err(Error::Numerics(
            "finite_diff_check wants one name and one gradient per parameter".into(),
        ));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0_f64;
    let mut sum_rel = 0.0_f64;
    let mut checked = 0usize;
    let mut worst: Option<FdWorst> = None;

    for (pi, param) in params.iter().enumerate() {
        if analytic[pi].shape() != param.shape() {
            return Err(Error::Numerics(format!(
                "gradient shape {:?} does not match parameter {} {:?}",
                analytic[pi].shape(),
                names[pi],
                param.shape()
            )));
        }
        for e in 0..param.len() {
            let orig = work[pi].data()[e];
            let a = analytic[pi].data()[e];
            let mut best: Option<(f64, f64)> = None;
            for &h in steps {
                work[pi].data_mut()[e] = orig + h;
                let f_plus = f(&work)?;
                work[pi].data_mut()[e] = orig - h;
                let f_minus = f(&work)?;
                work[pi].data_mut()[e] = orig;
                if !f_plus.is_finite() || !f_minus.is_finite() {
                    return Err(Error::Numerics(format!(
                        "non-finite loss while perturbing {}[{e}]",
                        names[pi]
                    )));
                }
                let estimate = (f_plus - f_minus) / (2.0 * h);
                let rel = (a - estimate).abs() / a.abs().max(estimate.abs()).max(1e-8);
                if best.is_none_or(|(r, _)| rel < r) {
                    best = Some((rel, estimate));
                }
            }
            let (rel, estimate) = best.expect("at least one step");
            sum_rel += rel;
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some(FdWorst {
                    param: names[pi].to_string(),
                    index: e,
                    analytic: a,
                    estimate,
                    rel,
                });
            }
        }
    }
    Ok(FdReport {
        max_rel,
        mean_rel: if checked > 0 { sum_rel / checked as f64 } else { 0.0 },
        checked,
        worst,
    })
}

#[cfg(test)]
// Test oracles below are deliberate literal loops; indexed form mirrors the math.
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_symmetry() {
        let out = softmax(&Tensor::from_vec(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_ln3_ln1() {
        // exp(ln 3) = 3, exp(ln 1) = 1 -> [3/4, 1/4]
        let out = softmax(&Tensor::from_vec(vec![3.0_f64.ln(), 1.0_f64.ln()]), 0).unwrap();
        assert_close(out.data()[0], 0.75, 1e-15);
        assert_close(out.data()[1], 0.25, 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let shifted = x.map(|v| v + 100.0);
        let a = softmax(&x, 0).unwrap();
        let b = softmax(&shifted, 0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.7).sin() * 3.0).collect())
            .unwrap();
        let s = softmax(&x, 1).unwrap();
        for r in 0..3 {
            let sum: f64 = s.row(r).iter().sum();
            assert_close(sum, 1.0, 1e-12);
            assert!(s.row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn softmax_axis0_matches_transposed_rows() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let cols = softmax(&x, 0).unwrap();
        for c in 0..3 {
            let sum = cols.at(0, c) + cols.at(1, c);
            assert_close(sum, 1.0, 1e-12);
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let out = l2_normalize(&Tensor::from_vec(vec![3.0, 4.0]), 0, 1e-12).unwrap();
        assert_close(out.data()[0], 0.6, 1e-15);
        assert_close(out.data()[1], 0.8, 1e-15);
    }

    #[test]
    fn l2_normalize_unit_vector_fixed_point() {
        let x = Tensor::from_vec(vec![0.6, 0.8]);
        let out = l2_normalize(&x, 0, 1e-12).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_vector_unchanged() {
        let x = Tensor::from_vec(vec![0.0, 0.0, 0.0]);
        let out = l2_normalize(&x, 0, 1e-12).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::new(&[1, 4], vec![7.0; 4]).unwrap();
        let gain = Tensor::from_vec(vec![1.0; 4]);
        let bias = Tensor::from_vec(vec![0.0; 4]);
        let out = layer_norm(&x, &gain, &bias).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_point_row() {
        // mean 2, population std 1 -> [-1, 1]
        let x = Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap();
        let gain = Tensor::from_vec(vec![1.0, 1.0]);
        let bias = Tensor::from_vec(vec![0.0, 0.0]);
        let out = layer_norm(&x, &gain, &bias).unwrap();
        assert_close(out.data()[0], -1.0, 1e-12);
        assert_close(out.data()[1], 1.0, 1e-12);
    }

    #[test]
    fn layer_norm_random_rows_have_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 16;
        let data: Vec<f64> = (0..5 * d).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0 + 1.0).collect();
        let x = Tensor::new(&[5, d], data).unwrap();
        let gain = Tensor::from_vec(vec![1.0; d]);
        let bias = Tensor::from_vec(vec![0.0; d]);
        let out = layer_norm(&x, &gain, &bias).unwrap();
        for r in 0..5 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert_close(mean, 0.0, 1e-9);
            assert_close(var, 1.0, 1e-9);
        }
    }

    #[test]
    fn attention_single_step_returns_v() {
        let q = Tensor::new(&[1, 4], vec![0.3, -0.5, 1.0, 0.0]).unwrap();
        let k = Tensor::new(&[1, 4], vec![1.0, 1.0, -1.0, 0.5]).unwrap();
        let v = Tensor::new(&[1, 3], vec![4.0, 5.0, 6.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn attention_identical_v_rows() {
        let q = Tensor::new(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.0, 0.0]).unwrap();
        let k = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.2, 0.2]).unwrap();
        let v = Tensor::from_rows(&vec![vec![2.0, -1.0]; 4]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        for r in 0..3 {
            assert_close(out.at(r, 0), 2.0, 1e-12);
            assert_close(out.at(r, 1), -1.0, 1e-12);
        }
    }

    #[test]
    fn attention_matches_three_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, d) = (4, 8);
        let mut rand_mat = |r: usize, c: usize| {
            Tensor::new(&[r, c], (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .unwrap()
        };
        let q = rand_mat(t, d);
        let k = rand_mat(t, d);
        let v = rand_mat(t, d);
        let got = scaled_dot_attention(&q, &k, &v, None).unwrap();

        // Literal evaluation: logits, row softmax, weighted sum, all loops.
        let scale = 1.0 / (d as f64).sqrt();
        let mut expect = Tensor::zeros(&[t, d]);
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.at(i, c) * k.at(j, c);
                }
                logits[j] = dot * scale;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..t {
                let w = exps[j] / sum;
                for c in 0..d {
                    *expect.at_mut(i, c) += w * v.at(j, c);
                }
            }
        }
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn attention_masked_weights_are_exactly_zero() {
        let q = Tensor::new(&[2, 2], vec![0.5, -0.5, 1.0, 0.3]).unwrap();
        let k = Tensor::new(&[3, 2], vec![0.1, 0.9, -0.4, 0.2, 0.7, 0.7]).unwrap();
        let v = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // Disallow key 2 for query 0 and keys 0,2 for query 1.
        let mask = Tensor::new(&[2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let (_, w) = scaled_dot_attention_weights(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(w.at(0, 2), 0.0);
        assert_eq!(w.at(1, 0), 0.0);
        assert_eq!(w.at(1, 2), 0.0);
        assert_close(w.at(1, 1), 1.0, 1e-15);
    }

    #[test]
    fn attention_fully_masked_query_is_error() {
        let q = Tensor::new(&[1, 2], vec![0.5, -0.5]).unwrap();
        let k = Tensor::new(&[2, 2], vec![0.1, 0.9, -0.4, 0.2]).unwrap();
        let v = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let mask = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert!(scaled_dot_attention(&q, &k, &v, Some(&mask)).is_err());
    }

    #[test]
    fn reparameterize_sigma_zero_gives_mu() {
        let mu = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let sigma = Tensor::zeros(&[3]);
        let sample = GaussianSample::draw(&[3], 1, 0);
        let z = reparameterize(&mu, &sigma, &sample).unwrap();
        assert!(z.max_abs_diff(&mu) < 1e-15);
    }

    #[test]
    fn reparameterize_unit_sigma_zero_mu_gives_epsilon() {
        let mu = Tensor::zeros(&[4]);
        let sigma = Tensor::full(&[4], 1.0);
        let sample = GaussianSample::draw(&[4], 9, 3);
        let z = reparameterize(&mu, &sigma, &sample).unwrap();
        assert!(z.max_abs_diff(sample.epsilon()) < 1e-15);
    }

    #[test]
    fn gaussian_sample_deterministic() {
        let a = GaussianSample::draw(&[2, 5], 123, 7);
        let b = GaussianSample::draw(&[2, 5], 123, 7);
        for (x, y) in a.epsilon().data().iter().zip(b.epsilon().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = GaussianSample::draw(&[2, 5], 123, 8);
        assert!(a.epsilon().max_abs_diff(c.epsilon()) > 0.0);
    }

    #[test]
    fn fd_check_square_function() {
        // f(t) = t^2, f'(3) = 6; central differences are exact for
        // quadratics up to rounding.
        let theta = Tensor::scalar(3.0);
        let grad = Tensor::scalar(6.0);
        let report = finite_diff_check(
            |p| Ok(p[0].data()[0] * p[0].data()[0]),
            &[theta],
            &["theta"],
            &[grad],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel < 1e-8, "max_rel {}", report.max_rel);
    }

    #[test]
    fn fd_check_softmax_cross_entropy() {
        // loss = -ln softmax(x)[t]; analytic gradient is p - onehot(t).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec((0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let target = 2usize;
        let p = softmax(&x, 0).unwrap();
        let mut grad = p.clone();
        grad.data_mut()[target] -= 1.0;
        let report = finite_diff_check(
            |params| {
                let p = softmax(&params[0], 0)?;
                Ok(-p.data()[target].ln())
            },
            &[x],
            &["logits"],
            &[grad],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel < 1e-6, "max_rel {}", report.max_rel);
    }

    #[test]
    fn fd_check_rejects_out_of_range_step() {
        let theta = Tensor::scalar(1.0);
        let grad = Tensor::scalar(2.0);
        let res = finite_diff_check(
            |p| Ok(p[0].data()[0] * p[0].data()[0]),
            &[theta],
            &["theta"],
            &[grad],
            1e-2,
        );
        assert!(res.is_err());
    }

    #[test]
    fn fd_check_flags_wrong_gradient() {
        let theta = Tensor::scalar(3.0);
        let wrong = Tensor::scalar(5.0);
        let report = finite_diff_check(
            |p| Ok(p[0].data()[0] * p[0].data()[0]),
            &[theta],
            &["theta"],
            &[wrong],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel > 0.1);
        assert_eq!(report.worst.unwrap().param, "theta");
    }

    #[test]
    fn mix_seed_spreads_streams() {
        let a = mix_seed(42, 0);
        let b = mix_seed(42, 1);
        let c = mix_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, mix_seed(42, 0));
    }
}
