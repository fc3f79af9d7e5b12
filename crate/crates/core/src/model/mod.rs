//! Vision-text captioner: patch-embedded image tokens and a linearly
//! projected box token form an unmasked prefix; text tokens after it are
//! causally masked. Logits are produced for text positions only.

mod block;
pub mod config;
pub mod params;

pub use config::ModelConfig;
pub use params::{BlockParams, ModelParams};

use block::{block_backward, block_forward, BlockCache, Layout};

use crate::dataset::vocab::{EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::ops::{
    cross_entropy_masked, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, mha_query,
    LayerNormCache, Mask,
};
use crate::nn::{grad_check_against, Float, GradCheckReport, Tensor};
use crate::world::{BBox, Image};

/// One training example: an index into the batch's image list, a box and a
/// padded token sequence starting with its length token.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: usize,
    pub bbox: BBox,
    pub tokens: Vec<usize>,
}

/// Patch rows of an image, `n x patch_dim`, each patch flattened `(y, x, c)`.
pub fn patchify<F: Float>(cfg: &ModelConfig, image: &Image) -> Result<Vec<F>> {
    let side = cfg.image_size;
    if image.data.len() != side * side * config::CHANNELS {
        return Err(Error::Shape(format!(
            "image has {} values, model expects {side}x{side}x{}",
            image.data.len(),
            config::CHANNELS
        )));
    }
    let (p, per_row) = (cfg.patch, side / cfg.patch);
    let mut out = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for py in 0..per_row {
        for px in 0..per_row {
            for y in py * p..(py + 1) * p {
                let start = (y * side + px * p) * config::CHANNELS;
                out.extend(image.data[start..start + p * config::CHANNELS].iter().map(|&v| F::of(v as f64)));
            }
        }
    }
    Ok(out)
}

fn box_features<F: Float>(bbox: &BBox) -> [F; 4] {
    bbox.as_array().map(F::of)
}

/// Box token: a single affine map of `(cx, cy, w, h)`.
pub fn embed_box<F: Float>(params: &ModelParams<F>, bbox: &BBox) -> Vec<F> {
    let mut out = vec![F::zero(); params.box_b.len()];
    linear_forward(&box_features::<F>(bbox), &params.box_w, params.box_b.data(), &mut out);
    out
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.len() > cfg.max_len {
        return Err(Error::Shape(format!("{} tokens exceed max_len {}", tokens.len(), cfg.max_len)));
    }
    match tokens.iter().find(|&&t| t >= cfg.vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab: cfg.vocab }),
        None => Ok(()),
    }
}

struct EncoderCache<F> {
    patches: Vec<F>,
    blocks: Vec<BlockCache<F>>,
    ln: LayerNormCache<F>,
}

/// Encodes `images` jointly; returns `(images * n) x d` features.
fn encoder_forward<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    images: &[&Image],
) -> Result<(Vec<F>, EncoderCache<F>)> {
    let (n, d) = (cfg.n_patches(), cfg.d_model);
    let mut patches = Vec::with_capacity(images.len() * n * cfg.patch_dim());
    for img in images {
        patches.extend(patchify::<F>(cfg, img)?);
    }
    let mut x = vec![F::zero(); images.len() * n * d];
    linear_forward(&patches, &params.patch_w, params.patch_b.data(), &mut x);
    for row in x.chunks_exact_mut(n * d) {
        for (v, &pos) in row.iter_mut().zip(params.vis_pos.data()) {
            *v += pos;
        }
    }
    let layout = Layout { seqs: images.len(), t: n, d, heads: cfg.heads };
    let mut blocks = Vec::with_capacity(params.enc_blocks.len());
    for bp in &params.enc_blocks {
        let (y, cache) = block_forward(bp, &x, layout, &Mask::Full);
        blocks.push(cache);
        x = y;
    }
    let mut out = vec![F::zero(); x.len()];
    let ln = layer_norm_forward(&x, d, params.enc_ln_g.data(), params.enc_ln_b.data(), &mut out);
    Ok((out, EncoderCache { patches, blocks, ln }))
}

fn encoder_backward<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    cache: &EncoderCache<F>,
    d_out: &[F],
    images: usize,
    grads: &mut ModelParams<F>,
) {
    let (n, d) = (cfg.n_patches(), cfg.d_model);
    let mut dx = vec![F::zero(); d_out.len()];
    layer_norm_backward(
        d_out,
        d,
        &cache.ln,
        params.enc_ln_g.data(),
        &mut dx,
        grads.enc_ln_g.data_mut(),
        grads.enc_ln_b.data_mut(),
    );
    let layout = Layout { seqs: images, t: n, d, heads: cfg.heads };
    for (i, bp) in params.enc_blocks.iter().enumerate().rev() {
        dx = block_backward(bp, &cache.blocks[i], &dx, layout, &Mask::Full, &mut grads.enc_blocks[i]);
    }
    for row in dx.chunks_exact(n * d) {
        for (g, &v) in grads.vis_pos.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    linear_backward(&cache.patches, &params.patch_w, &dx, None, &mut grads.patch_w, grads.patch_b.data_mut());
}

/// Batched decoder pass state kept for the backward pass.
struct DecoderCache<F> {
    blocks: Vec<BlockCache<F>>,
    ln: LayerNormCache<F>,
    text_hidden: Vec<F>,
}

/// Runs the decoder over `examples`, each with `text_len` input tokens.
/// Returns `(examples * text_len) x vocab` logits.
fn decoder_forward<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    vision: &[F],
    examples: &[Example],
    text_len: usize,
) -> (Vec<F>, DecoderCache<F>) {
    let (n, d, prefix) = (cfg.n_patches(), cfg.d_model, cfg.prefix_len());
    let t = prefix + text_len;
    let mut x = vec![F::zero(); examples.len() * t * d];
    for (e, ex) in examples.iter().enumerate() {
        let seq = &mut x[e * t * d..(e + 1) * t * d];
        seq[..n * d].copy_from_slice(&vision[ex.image * n * d..(ex.image + 1) * n * d]);
        seq[n * d..prefix * d].copy_from_slice(&embed_box(params, &ex.bbox));
        for (j, &tok) in ex.tokens[..text_len].iter().enumerate() {
            let row = &mut seq[(prefix + j) * d..(prefix + j + 1) * d];
            for ((v, &emb), &pos) in row.iter_mut().zip(params.tok_emb.row(tok)).zip(params.txt_pos.row(j)) {
                *v = emb + pos;
            }
        }
    }
    let layout = Layout { seqs: examples.len(), t, d, heads: cfg.heads };
    let mask = Mask::Prefix(prefix);
    let mut blocks = Vec::with_capacity(params.dec_blocks.len());
    for bp in &params.dec_blocks {
        let (y, cache) = block_forward(bp, &x, layout, &mask);
        blocks.push(cache);
        x = y;
    }
    let mut text = Vec::with_capacity(examples.len() * text_len * d);
    for e in 0..examples.len() {
        text.extend_from_slice(&x[(e * t + prefix) * d..(e + 1) * t * d]);
    }
    let mut hidden = vec![F::zero(); text.len()];
    let ln = layer_norm_forward(&text, d, params.dec_ln_g.data(), params.dec_ln_b.data(), &mut hidden);
    let mut logits = vec![F::zero(); examples.len() * text_len * cfg.vocab];
    linear_forward(&hidden, &params.out_w, params.out_b.data(), &mut logits);
    (logits, DecoderCache { blocks, ln, text_hidden: hidden })
}

/// Returns the gradient with respect to the vision features.
fn decoder_backward<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    cache: &DecoderCache<F>,
    examples: &[Example],
    text_len: usize,
    dlogits: &[F],
    vision_rows: usize,
    grads: &mut ModelParams<F>,
) -> Vec<F> {
    let (n, d, prefix) = (cfg.n_patches(), cfg.d_model, cfg.prefix_len());
    let t = prefix + text_len;
    let mut dhidden = vec![F::zero(); cache.text_hidden.len()];
    linear_backward(
        &cache.text_hidden,
        &params.out_w,
        dlogits,
        Some(&mut dhidden),
        &mut grads.out_w,
        grads.out_b.data_mut(),
    );
    let mut dtext = vec![F::zero(); dhidden.len()];
    layer_norm_backward(
        &dhidden,
        d,
        &cache.ln,
        params.dec_ln_g.data(),
        &mut dtext,
        grads.dec_ln_g.data_mut(),
        grads.dec_ln_b.data_mut(),
    );
    let mut dx = vec![F::zero(); examples.len() * t * d];
    for e in 0..examples.len() {
        dx[(e * t + prefix) * d..(e + 1) * t * d].copy_from_slice(&dtext[e * text_len * d..(e + 1) * text_len * d]);
    }
    let layout = Layout { seqs: examples.len(), t, d, heads: cfg.heads };
    let mask = Mask::Prefix(prefix);
    for (i, bp) in params.dec_blocks.iter().enumerate().rev() {
        dx = block_backward(bp, &cache.blocks[i], &dx, layout, &mask, &mut grads.dec_blocks[i]);
    }

    let mut dvision = vec![F::zero(); vision_rows * d];
    for (e, ex) in examples.iter().enumerate() {
        let seq = &dx[e * t * d..(e + 1) * t * d];
        for (g, &v) in dvision[ex.image * n * d..(ex.image + 1) * n * d].iter_mut().zip(&seq[..n * d]) {
            *g += v;
        }
        let dbox = &seq[n * d..prefix * d];
        let feats = box_features::<F>(&ex.bbox);
        for (k, &f) in feats.iter().enumerate() {
            for (g, &v) in grads.box_w.row_mut(k).iter_mut().zip(dbox) {
                *g += f * v;
            }
        }
        for (g, &v) in grads.box_b.data_mut().iter_mut().zip(dbox) {
            *g += v;
        }
        for (j, &tok) in ex.tokens[..text_len].iter().enumerate() {
            let row = &seq[(prefix + j) * d..(prefix + j + 1) * d];
            for (g, &v) in grads.tok_emb.row_mut(tok).iter_mut().zip(row) {
                *g += v;
            }
            for (g, &v) in grads.txt_pos.row_mut(j).iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    dvision
}

fn check_batch(cfg: &ModelConfig, images: &[&Image], examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Empty("batch has no examples"));
    }
    for ex in examples {
        if ex.image >= images.len() {
            return Err(Error::Shape(format!("example refers to image {} of {}", ex.image, images.len())));
        }
        if ex.tokens.len() != cfg.max_len {
            return Err(Error::Shape(format!(
                "example has {} tokens, expected padded length {}",
                ex.tokens.len(),
                cfg.max_len
            )));
        }
        check_tokens(cfg, &ex.tokens)?;
    }
    Ok(())
}

/// Inputs are `tokens[..M-1]`, targets `tokens[1..]`. Targets count up to
/// and including the first EOS and never when PAD; position 0 only counts
/// with `loss_on_first`.
fn targets_and_mask(cfg: &ModelConfig, examples: &[Example]) -> (Vec<usize>, Vec<bool>) {
    let text_len = cfg.max_len - 1;
    let mut targets = Vec::with_capacity(examples.len() * text_len);
    let mut mask = Vec::with_capacity(examples.len() * text_len);
    for ex in examples {
        let end = ex.tokens[1..].iter().position(|&t| t == EOS).unwrap_or(text_len);
        for j in 0..text_len {
            let target = ex.tokens[j + 1];
            targets.push(target);
            mask.push(target != PAD && j <= end && (j > 0 || cfg.loss_on_first));
        }
    }
    (targets, mask)
}

/// Training-path logits, `(examples * (M-1)) x vocab`.
pub fn forward_logits<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    images: &[&Image],
    examples: &[Example],
) -> Result<Tensor<F>> {
    check_batch(cfg, images, examples)?;
    let text_len = cfg.max_len - 1;
    let (vision, _) = encoder_forward(params, cfg, images)?;
    let (logits, _) = decoder_forward(params, cfg, &vision, examples, text_len);
    Tensor::new(&[examples.len() * text_len, cfg.vocab], logits)
}

/// Mean masked next-token cross-entropy over the batch.
pub fn flexcap_loss<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    images: &[&Image],
    examples: &[Example],
) -> Result<F> {
    let logits = forward_logits(params, cfg, images, examples)?;
    let (targets, mask) = targets_and_mask(cfg, examples);
    Ok(cross_entropy_masked(logits.data(), cfg.vocab, &targets, &mask)?.0)
}

/// Loss and its gradient with respect to every parameter.
pub fn flexcap_loss_and_grad<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    images: &[&Image],
    examples: &[Example],
) -> Result<(F, ModelParams<F>)> {
    check_batch(cfg, images, examples)?;
    let text_len = cfg.max_len - 1;
    let (vision, enc_cache) = encoder_forward(params, cfg, images)?;
    let (logits, dec_cache) = decoder_forward(params, cfg, &vision, examples, text_len);
    let (targets, mask) = targets_and_mask(cfg, examples);
    let (loss, dlogits) = cross_entropy_masked(&logits, cfg.vocab, &targets, &mask)?;
    let mut grads = ModelParams::zeros(cfg);
    let dvision = decoder_backward(
        params,
        cfg,
        &dec_cache,
        examples,
        text_len,
        &dlogits,
        images.len() * cfg.n_patches(),
        &mut grads,
    );
    encoder_backward(params, cfg, &enc_cache, &dvision, images.len(), &mut grads);
    Ok((loss, grads))
}

/// Vision features of one image, `n x d`.
pub fn encode_image<F: Float>(params: &ModelParams<F>, cfg: &ModelConfig, image: &Image) -> Result<Tensor<F>> {
    let (out, _) = encoder_forward(params, cfg, &[image])?;
    Tensor::new(&[cfg.n_patches(), cfg.d_model], out)
}

/// Per-layer keys and values of the vision+box prefix. The prefix never
/// attends to text, so it is computed once per (image, box).
#[derive(Debug, Clone)]
pub struct PrefixState<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
}

pub fn prefix_state<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    vision: &Tensor<F>,
    box_token: &[F],
) -> Result<PrefixState<F>> {
    let (n, d, prefix) = (cfg.n_patches(), cfg.d_model, cfg.prefix_len());
    if vision.shape() != [n, d] || box_token.len() != d {
        return Err(Error::Shape(format!(
            "prefix from vision {:?} and box token of {}",
            vision.shape(),
            box_token.len()
        )));
    }
    let mut x = Vec::with_capacity(prefix * d);
    x.extend_from_slice(vision.data());
    x.extend_from_slice(box_token);
    let layout = Layout { seqs: 1, t: prefix, d, heads: cfg.heads };
    let mut keys = Vec::with_capacity(params.dec_blocks.len());
    let mut values = Vec::with_capacity(params.dec_blocks.len());
    for bp in &params.dec_blocks {
        let mut h1 = vec![F::zero(); prefix * d];
        layer_norm_forward(&x, d, bp.ln1_g.data(), bp.ln1_b.data(), &mut h1);
        let mut kv = vec![F::zero(); prefix * 2 * d];
        let w_kv = bp.w_qkv.view().cols(d, 2 * d);
        let bias = bp.qkv_bias();
        for r in 0..prefix {
            kv[r * 2 * d..(r + 1) * 2 * d].copy_from_slice(&bias[d..]);
        }
        crate::nn::tensor::gemm(
            F::one(),
            crate::nn::tensor::View::new(&h1, prefix, d),
            w_kv,
            F::one(),
            crate::nn::tensor::ViewMut::new(&mut kv, prefix, 2 * d),
        );
        keys.push(kv.chunks_exact(2 * d).flat_map(|r| r[..d].to_vec()).collect());
        values.push(kv.chunks_exact(2 * d).flat_map(|r| r[d..].to_vec()).collect());
        let (y, _) = block_forward(bp, &x, layout, &Mask::Full);
        x = y;
    }
    Ok(PrefixState { keys, values })
}

/// Logits for each position of `tokens` given a prefix state, `len x vocab`.
pub fn text_logits<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    state: &PrefixState<F>,
    tokens: &[usize],
) -> Result<Tensor<F>> {
    check_tokens(cfg, tokens)?;
    let (d, prefix, len) = (cfg.d_model, cfg.prefix_len(), tokens.len());
    if len == 0 {
        return Tensor::new(&[0, cfg.vocab], vec![]);
    }
    let mut x = vec![F::zero(); len * d];
    for (j, &tok) in tokens.iter().enumerate() {
        for ((v, &e), &p) in x[j * d..(j + 1) * d].iter_mut().zip(params.tok_emb.row(tok)).zip(params.txt_pos.row(j)) {
            *v = e + p;
        }
    }
    let mask = Mask::Prefix(prefix);
    for (layer, bp) in params.dec_blocks.iter().enumerate() {
        let mut h1 = vec![F::zero(); len * d];
        layer_norm_forward(&x, d, bp.ln1_g.data(), bp.ln1_b.data(), &mut h1);
        let mut qkv = vec![F::zero(); len * 3 * d];
        linear_forward(&h1, &bp.w_qkv, &bp.qkv_bias(), &mut qkv);
        let mut q = Vec::with_capacity(len * d);
        let mut k = state.keys[layer].clone();
        let mut v = state.values[layer].clone();
        for row in qkv.chunks_exact(3 * d) {
            q.extend_from_slice(&row[..d]);
            k.extend_from_slice(&row[d..2 * d]);
            v.extend_from_slice(&row[2 * d..]);
        }
        let mut attn = vec![F::zero(); len * d];
        mha_query(&q, &k, &v, len, prefix + len, d, cfg.heads, &mask, prefix, &mut attn);
        let mut x2 = vec![F::zero(); len * d];
        linear_forward(&attn, &bp.w_o, bp.b_o.data(), &mut x2);
        for (o, &xi) in x2.iter_mut().zip(&x) {
            *o += xi;
        }
        let mut h2 = vec![F::zero(); len * d];
        layer_norm_forward(&x2, d, bp.ln2_g.data(), bp.ln2_b.data(), &mut h2);
        let mut f1 = vec![F::zero(); len * bp.w_ff1.cols()];
        linear_forward(&h2, &bp.w_ff1, bp.b_ff1.data(), &mut f1);
        f1.iter_mut().for_each(|v| *v = crate::nn::ops::gelu(*v));
        let mut y = vec![F::zero(); len * d];
        linear_forward(&f1, &bp.w_ff2, bp.b_ff2.data(), &mut y);
        for (o, &xi) in y.iter_mut().zip(&x2) {
            *o += xi;
        }
        x = y;
    }
    let mut hidden = vec![F::zero(); len * d];
    layer_norm_forward(&x, d, params.dec_ln_g.data(), params.dec_ln_b.data(), &mut hidden);
    let mut logits = vec![F::zero(); len * cfg.vocab];
    linear_forward(&hidden, &params.out_w, params.out_b.data(), &mut logits);
    Tensor::new(&[len, cfg.vocab], logits)
}

/// Logits at every text position for the given vision features, box token
/// and (unpadded or padded) token sequence.
pub fn decode_logits<F: Float>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    vision: &Tensor<F>,
    box_token: &[F],
    tokens: &[usize],
) -> Result<Tensor<F>> {
    check_tokens(cfg, tokens)?;
    let state = prefix_state(params, cfg, vision, box_token)?;
    text_logits(params, cfg, &state, tokens)
}

/// Finite-difference check of [`flexcap_loss_and_grad`] in 64-bit precision
/// over all parameters, or over `coords` of the flattened parameter vector.
pub fn check_loss_gradient(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    images: &[&Image],
    examples: &[Example],
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    check_batch(cfg, images, examples)?;
    let (_, grads) = flexcap_loss_and_grad(params, cfg, images, examples)?;
    let mut work = params.clone();
    let loss = |w: &[f64]| {
        work.assign_flat(w).expect("flat length matches");
        flexcap_loss(&work, cfg, images, examples).expect("batch already checked")
    };
    Ok(grad_check_against(loss, &grads.flatten(), &params.flatten(), eps, coords))
}
