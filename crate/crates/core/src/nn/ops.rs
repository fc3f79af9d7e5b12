//! Layer primitives with their backward passes. Matrices are row-major
//! slices; backward functions accumulate parameter gradients with `+=`.

use super::tensor::{gemm, Float, Tensor, View, ViewMut};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax<F: Float>(logits: &[F]) -> Vec<F> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Entries equal to `-inf` end up exactly zero.
pub fn softmax_in_place<F: Float>(x: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    assert!(max > F::neg_infinity(), "softmax over a row with no finite entry");
    let mut sum = F::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax<F: Float>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Normalized activations and inverse deviations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

/// Row-wise layer norm of a `rows x d` matrix into `out`.
pub fn layer_norm_forward<F: Float>(
    x: &[F],
    d: usize,
    gain: &[F],
    bias: &[F],
    out: &mut [F],
) -> LayerNormCache<F> {
    let rows = x.len() / d;
    let eps = F::of(LN_EPS);
    let inv_d = F::one() / F::of(d as f64);
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
    LayerNormCache { xhat, rstd }
}

/// Adds the input gradient into `dx`.
pub fn layer_norm_backward<F: Float>(
    dy: &[F],
    d: usize,
    cache: &LayerNormCache<F>,
    gain: &[F],
    dx: &mut [F],
    dgain: &mut [F],
    dbias: &mut [F],
) {
    let rows = dy.len() / d;
    let inv_d = F::one() / F::of(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for c in 0..d {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] += rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

/// Layer norm of a single vector.
pub fn layer_norm<F: Float>(x: &[F], gain: &[F], bias: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    layer_norm_forward(x, x.len(), gain, bias, &mut out);
    out
}

const GELU_A: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// `0.5 (1 + tanh(u))` written as `sigmoid(2u)`, which needs a single `exp`.
fn gelu_gate<F: Float>(x: F) -> F {
    let u = F::of(SQRT_2_OVER_PI) * (x + F::of(GELU_A) * x * x * x);
    F::one() / (F::one() + (-(u + u)).exp())
}

/// Tanh-approximated GELU.
pub fn gelu<F: Float>(x: F) -> F {
    x * gelu_gate(x)
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let s = gelu_gate(x);
    let du = F::of(SQRT_2_OVER_PI) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    s + x * F::of(2.0) * s * (F::one() - s) * du
}

/// `out = x @ w + b` for `x: rows x in`, `w: in x out`.
pub fn linear_forward<F: Float>(x: &[F], w: &Tensor<F>, b: &[F], out: &mut [F]) {
    let (din, dout) = (w.rows(), w.cols());
    let rows = x.len() / din;
    for r in 0..rows {
        out[r * dout..(r + 1) * dout].copy_from_slice(b);
    }
    gemm(F::one(), View::new(x, rows, din), w.view(), F::one(), ViewMut::new(out, rows, dout));
}

/// Writes `dx` (if requested) and accumulates `dw`, `db`.
pub fn linear_backward<F: Float>(
    x: &[F],
    w: &Tensor<F>,
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: &mut Tensor<F>,
    db: &mut [F],
) {
    let (din, dout) = (w.rows(), w.cols());
    let rows = dy.len() / dout;
    let dyv = View::new(dy, rows, dout);
    if let Some(dx) = dx {
        gemm(F::one(), dyv, w.view().t(), F::zero(), ViewMut::new(dx, rows, din));
    }
    gemm(F::one(), View::new(x, rows, din).t(), dyv, F::one(), dw.view_mut());
    for r in 0..rows {
        for (g, &v) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *g += v;
        }
    }
}

/// Which key positions each query position may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    Full,
    Causal,
    /// The first `n` positions see each other bidirectionally; later
    /// positions see the prefix plus themselves and earlier positions.
    Prefix(usize),
    /// Row-major `allow[i * cols + j]`.
    Explicit { cols: usize, allow: Vec<bool> },
}

impl Mask {
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::Full => true,
            Mask::Causal => j <= i,
            Mask::Prefix(n) => j < *n || (i >= *n && j <= i),
            Mask::Explicit { cols, allow } => allow[i * cols + j],
        }
    }
}

impl Mask {
    /// For every mask but `Explicit`, query `i` sees exactly keys `0..limit`.
    fn key_limit(&self, i: usize, tk: usize) -> Option<usize> {
        match self {
            Mask::Full => Some(tk),
            Mask::Causal => Some((i + 1).min(tk)),
            Mask::Prefix(n) if i < *n => Some((*n).min(tk)),
            Mask::Prefix(_) => Some((i + 1).min(tk)),
            Mask::Explicit { .. } => None,
        }
    }
}

fn axpy<F: Float>(a: F, x: &[F], y: &mut [F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// One attention head. `probs` receives the `tq x tk` attention weights,
/// exactly zero on masked keys. Query row `i` is treated as absolute
/// position `i + q_offset`. Each row only touches its visible keys, so a
/// row's result does not depend on keys it cannot see.
#[allow(clippy::too_many_arguments)]
fn attend_head<F: Float>(
    q: View<'_, F>,
    k: View<'_, F>,
    v: View<'_, F>,
    mask: &Mask,
    q_offset: usize,
    scale: F,
    probs: &mut [F],
    mut out: ViewMut<'_, F>,
) {
    let (tq, tk, dh, dv) = (q.rows, k.rows, q.cols, v.cols);
    let (qh, kt, vh) = (q.to_vec(), k.t().to_vec(), v.to_vec());
    let mut o = vec![F::zero(); dv];
    for i in 0..tq {
        let row = &mut probs[i * tk..(i + 1) * tk];
        row.fill(F::zero());
        let limit = mask.key_limit(i + q_offset, tk).unwrap_or(tk);
        for c in 0..dh {
            axpy(qh[i * dh + c] * scale, &kt[c * tk..c * tk + limit], &mut row[..limit]);
        }
        if let Mask::Explicit { .. } = mask {
            for (j, sv) in row.iter_mut().enumerate() {
                if !mask.allows(i + q_offset, j) {
                    *sv = F::neg_infinity();
                }
            }
        }
        softmax_in_place(&mut row[..limit]);
        o.fill(F::zero());
        for (j, &pv) in row[..limit].iter().enumerate() {
            axpy(pv, &vh[j * dv..(j + 1) * dv], &mut o);
        }
        for (c, &ov) in o.iter().enumerate() {
            out.set(i, c, ov);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attend_head_backward<F: Float>(
    q: View<'_, F>,
    k: View<'_, F>,
    v: View<'_, F>,
    probs: &[F],
    d_out: View<'_, F>,
    mask: &Mask,
    scale: F,
) -> [Vec<F>; 3] {
    let (tq, tk, dh) = (q.rows, k.rows, q.cols);
    let (qh, kh, vt, doh) = (q.to_vec(), k.to_vec(), v.t().to_vec(), d_out.to_vec());
    let mut dqh = vec![F::zero(); tq * dh];
    let mut dkh = vec![F::zero(); tk * dh];
    let mut dvh = vec![F::zero(); tk * dh];
    let mut ds = vec![F::zero(); tk];
    for i in 0..tq {
        let limit = mask.key_limit(i, tk).unwrap_or(tk);
        let p = &probs[i * tk..i * tk + limit];
        let g = &doh[i * dh..(i + 1) * dh];
        for (j, &pv) in p.iter().enumerate() {
            axpy(pv, g, &mut dvh[j * dh..(j + 1) * dh]);
        }
        let ds = &mut ds[..limit];
        ds.fill(F::zero());
        for (c, &gv) in g.iter().enumerate() {
            axpy(gv, &vt[c * tk..c * tk + limit], ds);
        }
        let dot: F = p.iter().zip(ds.iter()).map(|(&a, &b)| a * b).sum();
        for (dv, &pv) in ds.iter_mut().zip(p) {
            *dv = pv * (*dv - dot) * scale;
        }
        for (j, &sv) in ds.iter().enumerate() {
            axpy(sv, &kh[j * dh..(j + 1) * dh], &mut dqh[i * dh..(i + 1) * dh]);
            axpy(sv, &qh[i * dh..(i + 1) * dh], &mut dkh[j * dh..(j + 1) * dh]);
        }
    }
    [dqh, dkh, dvh]
}

/// Single-head scaled dot-product attention, `softmax(q k^T / sqrt(dk)) v`.
pub fn attention<F: Float>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, mask: &Mask) -> Result<Tensor<F>> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (tq, tk) = (q.rows(), k.rows());
    let mut probs = vec![F::zero(); tq * tk];
    let mut out = Tensor::zeros(&[tq, v.cols()]);
    let scale = F::one() / F::of(q.cols() as f64).sqrt();
    attend_head(q.view(), k.view(), v.view(), mask, 0, scale, &mut probs, out.view_mut());
    Ok(out)
}

/// Multi-head self-attention over a packed `t x 3d` projection `[q | k | v]`.
/// Writes `t x d` into `out` and returns the `heads x t x t` weights.
pub fn mha_forward<F: Float>(qkv: &[F], t: usize, d: usize, heads: usize, mask: &Mask, out: &mut [F]) -> Vec<F> {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let packed = View::new(qkv, t, 3 * d);
    let mut probs = vec![F::zero(); heads * t * t];
    for h in 0..heads {
        let o = ViewMut::new(&mut *out, t, d).cols(h * dh, dh);
        attend_head(
            packed.cols(h * dh, dh),
            packed.cols(d + h * dh, dh),
            packed.cols(2 * d + h * dh, dh),
            mask,
            0,
            scale,
            &mut probs[h * t * t..(h + 1) * t * t],
            o,
        );
    }
    probs
}

/// Gradient of [`mha_forward`] with respect to the packed projection.
#[allow(clippy::too_many_arguments)]
pub fn mha_backward<F: Float>(
    qkv: &[F],
    probs: &[F],
    d_out: &[F],
    t: usize,
    d: usize,
    heads: usize,
    mask: &Mask,
    d_qkv: &mut [F],
) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let packed = View::new(qkv, t, 3 * d);
    let dov = View::new(d_out, t, d);
    for h in 0..heads {
        let grads = attend_head_backward(
            packed.cols(h * dh, dh),
            packed.cols(d + h * dh, dh),
            packed.cols(2 * d + h * dh, dh),
            &probs[h * t * t..(h + 1) * t * t],
            dov.cols(h * dh, dh),
            mask,
            scale,
        );
        // scatter into the [q | k | v] slots of head h
        for (part, g) in grads.iter().enumerate() {
            for r in 0..t {
                let at = r * 3 * d + part * d + h * dh;
                d_qkv[at..at + dh].copy_from_slice(&g[r * dh..(r + 1) * dh]);
            }
        }
    }
}

/// Attention of `tq` new query rows against `tk` cached keys/values, where
/// query row `i` sits at absolute position `q_offset + i`. Inference only.
#[allow(clippy::too_many_arguments)]
pub fn mha_query<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    mask: &Mask,
    q_offset: usize,
    out: &mut [F],
) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut probs = vec![F::zero(); tq * tk];
    for h in 0..heads {
        attend_head(
            View::new(q, tq, d).cols(h * dh, dh),
            View::new(k, tk, d).cols(h * dh, dh),
            View::new(v, tk, d).cols(h * dh, dh),
            mask,
            q_offset,
            scale,
            &mut probs,
            ViewMut::new(&mut *out, tq, d).cols(h * dh, dh),
        );
    }
}

/// Mean negative log-likelihood over unmasked rows of `logits` (`n x vocab`)
/// and its gradient, `(softmax - onehot) / count` on unmasked rows. An
/// all-masked input has loss 0.
pub fn cross_entropy_masked<F: Float>(
    logits: &[F],
    vocab: usize,
    targets: &[usize],
    loss_mask: &[bool],
) -> Result<(F, Vec<F>)> {
    let n = targets.len();
    if logits.len() != n * vocab || loss_mask.len() != n {
        return Err(Error::Shape(format!(
            "cross entropy over {} logits, {n} targets, {} mask entries, vocab {vocab}",
            logits.len(),
            loss_mask.len()
        )));
    }
    if let Some(&bad) = targets.iter().zip(loss_mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, vocab });
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    let mut grad = vec![F::zero(); logits.len()];
    if count == 0 {
        return Ok((F::zero(), grad));
    }
    let inv = F::one() / F::of(count as f64);
    let mut total = F::zero();
    for (i, (&target, &on)) in targets.iter().zip(loss_mask).enumerate() {
        if !on {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let g = &mut grad[i * vocab..(i + 1) * vocab];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (gv, &x) in g.iter_mut().zip(row) {
            *gv = (x - max).exp();
            sum += *gv;
        }
        total += max + sum.ln() - row[target];
        for gv in g.iter_mut() {
            *gv = *gv / sum * inv;
        }
        g[target] -= inv;
    }
    Ok((total * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -400..=400 {
            let x = i as f64 / 40.0;
            let tanh_form = 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_A * x.powi(3))).tanh());
            assert!((gelu(x) - tanh_form).abs() < 1e-12, "{x}");
            let h = 1e-6;
            assert!((gelu_grad(x) - (gelu(x + h) - gelu(x - h)) / (2.0 * h)).abs() < 1e-7, "{x}");
        }
        assert_eq!(gelu(-100.0f32), 0.0);
        assert_eq!(gelu(100.0f32), 100.0);
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0f64; 4]), [0.25; 4]);
        let p = softmax(&[2.0f64, 1.0, 0.0]);
        for (a, b) in p.iter().zip([0.6652, 0.2447, 0.0900]) {
            assert!((a - b).abs() < 1e-4);
        }
        let shifted = softmax(&[2.0 + 1e3, 1.0 + 1e3, 1e3]);
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    fn ones_n(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn layer_norm_cases() {
        let ones = vec![1.0f64; 8];
        let zeros = vec![0.0f64; 8];
        assert!(layer_norm(&[3.0f64; 8], &ones, &zeros).iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = rand_vec(&mut rng, 32).iter().map(|v| 5.0 * v).collect();
        let y = layer_norm(&x, &ones_n(32), &vec![0.0; 32]);
        let mean = y.iter().sum::<f64>() / 32.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5, "variance {var}");

        // zero mean, unit variance already
        let unit: Vec<f64> = (0..32).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let again = layer_norm(&unit, &ones_n(32), &vec![0.0; 32]);
        for (a, b) in unit.iter().zip(&again) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::from_f64(&[3, 4], &rand_vec(&mut rng, 12)).unwrap();
        let k = Tensor::from_f64(&[3, 4], &rand_vec(&mut rng, 12)).unwrap();
        let v = Tensor::from_f64(&[3, 2], &rand_vec(&mut rng, 6)).unwrap();

        // one allowed key per row picks that value row
        let allow = vec![false, true, false, false, false, true, true, false, false];
        let out: Tensor<f64> = attention(&q, &k, &v, &Mask::Explicit { cols: 3, allow }).unwrap();
        assert_eq!(out.row(0), v.row(1));
        assert_eq!(out.row(1), v.row(2));
        assert_eq!(out.row(2), v.row(0));

        // identical keys give the mean of the values
        let k_same = Tensor::from_f64(&[3, 4], &[0.5; 12]).unwrap();
        let out = attention(&q, &k_same, &v, &Mask::Full).unwrap();
        for c in 0..2 {
            let mean = (0..3).map(|r| v.row(r)[c]).sum::<f64>() / 3.0;
            assert!((out.row(0)[c] - mean).abs() < 1e-12);
        }

        // causal: perturbing value row 2 leaves rows 0 and 1 bit-identical
        let base = attention(&q, &k, &v, &Mask::Causal).unwrap();
        let mut v2 = v.clone();
        v2.row_mut(2)[0] += 3.0;
        let pert = attention(&q, &k, &v2, &Mask::Causal).unwrap();
        assert_eq!(base.row(0), pert.row(0));
        assert_eq!(base.row(1), pert.row(1));
        assert_ne!(base.row(2), pert.row(2));
    }

    #[test]
    fn prefix_mask_layout() {
        let m = Mask::Prefix(2);
        assert!(m.allows(0, 1) && m.allows(1, 0));
        assert!(!m.allows(0, 2) && !m.allows(1, 3));
        assert!(m.allows(2, 0) && m.allows(2, 2) && !m.allows(2, 3));
        assert!(m.allows(4, 3));
    }

    #[test]
    fn cross_entropy_cases() {
        let v = 40;
        let logits = vec![0.0f64; 3 * v];
        let (l, _) = cross_entropy_masked(&logits, v, &[5, 6, 7], &[true, true, false]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);

        let mut sharp = vec![0.0f64; 2 * v];
        sharp[3] = 30.0;
        sharp[v + 9] = 30.0;
        let (l, _) = cross_entropy_masked(&sharp, v, &[3, 9], &[true, true]).unwrap();
        assert!(l < 1e-9);

        let (l, _) = cross_entropy_masked(&[0.0f64, 3f64.ln()], 2, &[1], &[true]).unwrap();
        assert!((l - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((l - 0.2877).abs() < 1e-4);

        let (l, g) = cross_entropy_masked(&logits, v, &[1, 2, 3], &[false; 3]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        assert!(matches!(
            cross_entropy_masked(&logits, v, &[1, 99, 3], &[true; 3]),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn fused_gradient_is_probs_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = 5;
        let logits = rand_vec(&mut rng, 3 * v);
        let targets = [1, 4, 0];
        let mask = [true, false, true];
        let (_, g) = cross_entropy_masked(&logits, v, &targets, &mask).unwrap();
        for r in 0..3 {
            let p = softmax(&logits[r * v..(r + 1) * v]);
            for c in 0..v {
                let expected = if mask[r] {
                    (p[c] - if c == targets[r] { 1.0 } else { 0.0 }) / 2.0
                } else {
                    0.0
                };
                assert!((g[r * v + c] - expected).abs() < 1e-15);
            }
        }
    }
}
