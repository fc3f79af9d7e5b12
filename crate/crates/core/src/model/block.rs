//! Pre-norm transformer block over a batch of equal-length sequences:
//! `x + attn(ln1(x))`, then `+ ff(ln2(.))` with a GELU feed-forward.

use super::params::BlockParams;
use crate::nn::ops::{
    gelu, gelu_grad, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, mha_backward,
    mha_forward, LayerNormCache, Mask,
};
use crate::nn::Float;

pub(crate) struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    h1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<Vec<F>>,
    attn: Vec<F>,
    ln2: LayerNormCache<F>,
    h2: Vec<F>,
    f1: Vec<F>,
    g: Vec<F>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub seqs: usize,
    pub t: usize,
    pub d: usize,
    pub heads: usize,
}

pub(crate) fn block_forward<F: Float>(
    p: &BlockParams<F>,
    x: &[F],
    layout: Layout,
    mask: &Mask,
) -> (Vec<F>, BlockCache<F>) {
    let Layout { seqs, t, d, heads } = layout;
    let rows = seqs * t;
    let ff = p.w_ff1.cols();

    let mut h1 = vec![F::zero(); rows * d];
    let ln1 = layer_norm_forward(x, d, p.ln1_g.data(), p.ln1_b.data(), &mut h1);
    let mut qkv = vec![F::zero(); rows * 3 * d];
    linear_forward(&h1, &p.w_qkv, &p.qkv_bias(), &mut qkv);
    let mut attn = vec![F::zero(); rows * d];
    let probs = (0..seqs)
        .map(|s| {
            mha_forward(
                &qkv[s * t * 3 * d..(s + 1) * t * 3 * d],
                t,
                d,
                heads,
                mask,
                &mut attn[s * t * d..(s + 1) * t * d],
            )
        })
        .collect();
    let mut x2 = vec![F::zero(); rows * d];
    linear_forward(&attn, &p.w_o, p.b_o.data(), &mut x2);
    for (o, &xi) in x2.iter_mut().zip(x) {
        *o += xi;
    }

    let mut h2 = vec![F::zero(); rows * d];
    let ln2 = layer_norm_forward(&x2, d, p.ln2_g.data(), p.ln2_b.data(), &mut h2);
    let mut f1 = vec![F::zero(); rows * ff];
    linear_forward(&h2, &p.w_ff1, p.b_ff1.data(), &mut f1);
    let g: Vec<F> = f1.iter().map(|&v| gelu(v)).collect();
    let mut y = vec![F::zero(); rows * d];
    linear_forward(&g, &p.w_ff2, p.b_ff2.data(), &mut y);
    for (o, &xi) in y.iter_mut().zip(&x2) {
        *o += xi;
    }

    let cache = BlockCache { ln1, h1, qkv, probs, attn, ln2, h2, f1, g };
    (y, cache)
}

/// Returns the input gradient; parameter gradients accumulate into `grads`.
pub(crate) fn block_backward<F: Float>(
    p: &BlockParams<F>,
    cache: &BlockCache<F>,
    dy: &[F],
    layout: Layout,
    mask: &Mask,
    grads: &mut BlockParams<F>,
) -> Vec<F> {
    let Layout { seqs, t, d, heads } = layout;
    let rows = seqs * t;
    let ff = p.w_ff1.cols();

    // feed-forward branch; the residual passes dy straight through
    let mut dg = vec![F::zero(); rows * ff];
    linear_backward(&cache.g, &p.w_ff2, dy, Some(&mut dg), &mut grads.w_ff2, grads.b_ff2.data_mut());
    for (v, &f) in dg.iter_mut().zip(&cache.f1) {
        *v *= gelu_grad(f);
    }
    let mut dh2 = vec![F::zero(); rows * d];
    linear_backward(&cache.h2, &p.w_ff1, &dg, Some(&mut dh2), &mut grads.w_ff1, grads.b_ff1.data_mut());
    let mut dx2 = dy.to_vec();
    layer_norm_backward(
        &dh2,
        d,
        &cache.ln2,
        p.ln2_g.data(),
        &mut dx2,
        grads.ln2_g.data_mut(),
        grads.ln2_b.data_mut(),
    );

    // attention branch
    let mut dattn = vec![F::zero(); rows * d];
    linear_backward(&cache.attn, &p.w_o, &dx2, Some(&mut dattn), &mut grads.w_o, grads.b_o.data_mut());
    let mut dqkv = vec![F::zero(); rows * 3 * d];
    for s in 0..seqs {
        mha_backward(
            &cache.qkv[s * t * 3 * d..(s + 1) * t * 3 * d],
            &cache.probs[s],
            &dattn[s * t * d..(s + 1) * t * d],
            t,
            d,
            heads,
            mask,
            &mut dqkv[s * t * 3 * d..(s + 1) * t * 3 * d],
        );
    }
    let mut dh1 = vec![F::zero(); rows * d];
    let mut db = vec![F::zero(); 3 * d];
    linear_backward(&cache.h1, &p.w_qkv, &dqkv, Some(&mut dh1), &mut grads.w_qkv, &mut db);
    grads.add_qkv_bias_grad(&db);
    let mut dx = dx2;
    layer_norm_backward(
        &dh1,
        d,
        &cache.ln1,
        p.ln1_g.data(),
        &mut dx,
        grads.ln1_g.data_mut(),
        grads.ln1_b.data_mut(),
    );
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use crate::nn::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_gradients() {
        let cfg = ModelConfig { d_model: 8, heads: 2, ff_dim: 12, ..ModelConfig::tiny(10) };
        let base = ModelParams::<f64>::init(&cfg, 9).dec_blocks[0].clone();
        let layout = Layout { seqs: 2, t: 5, d: 8, heads: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = Mask::Prefix(2);

        let n_block: usize = base.tensors().iter().map(|(_, t)| t.len()).sum();
        let f = |w: &[f64]| {
            let mut p = base.clone();
            let mut off = 0;
            for (_, t) in p.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&w[off..off + n]);
                off += n;
            }
            let xs = &w[n_block..];
            let (y, cache) = block_forward(&p, xs, layout, &mask);
            let loss: f64 = y.iter().zip(&probe).map(|(a, b)| a * b).sum();
            let mut grads = p.clone();
            for (_, t) in grads.tensors_mut() {
                t.fill(0.0);
            }
            let dx = block_backward(&p, &cache, &probe, layout, &mask, &mut grads);
            let mut g: Vec<f64> = grads.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            g.extend(dx);
            (loss, g)
        };
        let mut w: Vec<f64> = base.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        // larger weights than the init so every path carries signal
        w.iter_mut().for_each(|v| *v = *v * 4.0 + rng.random_range(-0.2..0.2));
        w.extend(x);
        let r = grad_check(f, &w, 1e-5, None);
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
