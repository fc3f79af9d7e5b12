use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Float, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    /// `d x 3d`, packed `[q | k | v]`.
    pub w_qkv: Tensor<F>,
    /// Query and value biases, `[q | v]`. A key bias only shifts every score
    /// of a query by the same amount, so it is left out.
    pub b_qv: Tensor<F>,
    pub w_o: Tensor<F>,
    pub b_o: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w_ff1: Tensor<F>,
    pub b_ff1: Tensor<F>,
    pub w_ff2: Tensor<F>,
    pub b_ff2: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub patch_w: Tensor<F>,
    pub patch_b: Tensor<F>,
    pub vis_pos: Tensor<F>,
    pub enc_blocks: Vec<BlockParams<F>>,
    pub enc_ln_g: Tensor<F>,
    pub enc_ln_b: Tensor<F>,
    pub box_w: Tensor<F>,
    pub box_b: Tensor<F>,
    pub tok_emb: Tensor<F>,
    pub txt_pos: Tensor<F>,
    pub dec_blocks: Vec<BlockParams<F>>,
    pub dec_ln_g: Tensor<F>,
    pub dec_ln_b: Tensor<F>,
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Initializer {
    rng: Option<ChaCha8Rng>,
    std: f64,
}

impl Initializer {
    fn make<F: Float>(&mut self, shape: &[usize], init: Init) -> Tensor<F> {
        match (init, self.rng.as_mut()) {
            (Init::Normal, Some(rng)) => {
                let std = self.std;
                let normal = Normal::new(0.0, std).expect("valid std");
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break F::of(v);
                        }
                    })
                    .collect();
                Tensor::new(shape, data).expect("shape matches data")
            }
            (Init::Ones, _) => Tensor::full(shape, F::one()),
            _ => Tensor::zeros(shape),
        }
    }

    fn block<F: Float>(&mut self, d: usize, ff: usize) -> BlockParams<F> {
        BlockParams {
            ln1_g: self.make(&[d], Init::Ones),
            ln1_b: self.make(&[d], Init::Zeros),
            w_qkv: self.make(&[d, 3 * d], Init::Normal),
            b_qv: self.make(&[2 * d], Init::Zeros),
            w_o: self.make(&[d, d], Init::Normal),
            b_o: self.make(&[d], Init::Zeros),
            ln2_g: self.make(&[d], Init::Ones),
            ln2_b: self.make(&[d], Init::Zeros),
            w_ff1: self.make(&[d, ff], Init::Normal),
            b_ff1: self.make(&[ff], Init::Zeros),
            w_ff2: self.make(&[ff, d], Init::Normal),
            b_ff2: self.make(&[d], Init::Zeros),
        }
    }

    fn params<F: Float>(&mut self, cfg: &ModelConfig) -> ModelParams<F> {
        let (d, ff) = (cfg.d_model, cfg.ff_dim);
        let patch_w = self.make(&[cfg.patch_dim(), d], Init::Normal);
        let patch_b = self.make(&[d], Init::Zeros);
        let vis_pos = self.make(&[cfg.n_patches(), d], Init::Normal);
        let enc_blocks = (0..cfg.enc_layers).map(|_| self.block(d, ff)).collect();
        let enc_ln_g = self.make(&[d], Init::Ones);
        let enc_ln_b = self.make(&[d], Init::Zeros);
        let box_w = self.make(&[4, d], Init::Normal);
        let box_b = self.make(&[d], Init::Normal);
        let tok_emb = self.make(&[cfg.vocab, d], Init::Normal);
        let txt_pos = self.make(&[cfg.max_len, d], Init::Normal);
        let dec_blocks = (0..cfg.dec_layers).map(|_| self.block(d, ff)).collect();
        let dec_ln_g = self.make(&[d], Init::Ones);
        let dec_ln_b = self.make(&[d], Init::Zeros);
        let out_w = self.make(&[d, cfg.vocab], Init::Normal);
        let out_b = self.make(&[cfg.vocab], Init::Zeros);
        ModelParams {
            patch_w,
            patch_b,
            vis_pos,
            enc_blocks,
            enc_ln_g,
            enc_ln_b,
            box_w,
            box_b,
            tok_emb,
            txt_pos,
            dec_blocks,
            dec_ln_g,
            dec_ln_b,
            out_w,
            out_b,
        }
    }
}

impl<F: Float> ModelParams<F> {
    /// Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit
    /// layer-norm gains. The box bias is drawn like a weight: with a zero
    /// bias the decoder's first layer norm sees only the direction of
    /// `(cx, cy, w, h)`, and a small box near the origin looks like a large
    /// one further out.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        Self::init_with_std(cfg, seed, INIT_STD)
    }

    /// Same layout with a different weight std. Gradient checks use a larger
    /// std so no path is starved of signal.
    pub fn init_with_std(cfg: &ModelConfig, seed: u64, std: f64) -> Self {
        Initializer { rng: Some(ChaCha8Rng::seed_from_u64(seed)), std }.params(cfg)
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut z: Self = Initializer { rng: None, std: 0.0 }.params(cfg);
        for (_, t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("vis_pos".into(), &self.vis_pos),
        ];
        for (i, b) in self.enc_blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("enc{i}.{n}"), t)));
        }
        out.extend([
            ("enc_ln_g".into(), &self.enc_ln_g),
            ("enc_ln_b".into(), &self.enc_ln_b),
            ("box_w".into(), &self.box_w),
            ("box_b".into(), &self.box_b),
            ("tok_emb".into(), &self.tok_emb),
            ("txt_pos".into(), &self.txt_pos),
        ]);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("dec{i}.{n}"), t)));
        }
        out.extend([
            ("dec_ln_g".into(), &self.dec_ln_g),
            ("dec_ln_b".into(), &self.dec_ln_b),
            ("out_w".into(), &self.out_w),
            ("out_b".into(), &self.out_b),
        ]);
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![
            ("patch_w".into(), &mut self.patch_w),
            ("patch_b".into(), &mut self.patch_b),
            ("vis_pos".into(), &mut self.vis_pos),
        ];
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("enc{i}.{n}"), t)));
        }
        out.extend([
            ("enc_ln_g".to_string(), &mut self.enc_ln_g),
            ("enc_ln_b".to_string(), &mut self.enc_ln_b),
            ("box_w".to_string(), &mut self.box_w),
            ("box_b".to_string(), &mut self.box_b),
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("txt_pos".to_string(), &mut self.txt_pos),
        ]);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("dec{i}.{n}"), t)));
        }
        out.extend([
            ("dec_ln_g".to_string(), &mut self.dec_ln_g),
            ("dec_ln_b".to_string(), &mut self.dec_ln_b),
            ("out_w".to_string(), &mut self.out_w),
            ("out_b".to_string(), &mut self.out_b),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// All values concatenated in [`ModelParams::tensors`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64())).collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let total = self.num_params();
        if values.len() != total {
            return Err(Error::Shape(format!("expected {total} values, got {}", values.len())));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            for (dst, &src) in t.data_mut().iter_mut().zip(&values[offset..offset + n]) {
                *dst = F::of(src);
            }
            offset += n;
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        let cast_block = |b: &BlockParams<F>| BlockParams {
            ln1_g: b.ln1_g.cast(),
            ln1_b: b.ln1_b.cast(),
            w_qkv: b.w_qkv.cast(),
            b_qv: b.b_qv.cast(),
            w_o: b.w_o.cast(),
            b_o: b.b_o.cast(),
            ln2_g: b.ln2_g.cast(),
            ln2_b: b.ln2_b.cast(),
            w_ff1: b.w_ff1.cast(),
            b_ff1: b.b_ff1.cast(),
            w_ff2: b.w_ff2.cast(),
            b_ff2: b.b_ff2.cast(),
        };
        ModelParams {
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            vis_pos: self.vis_pos.cast(),
            enc_blocks: self.enc_blocks.iter().map(cast_block).collect(),
            enc_ln_g: self.enc_ln_g.cast(),
            enc_ln_b: self.enc_ln_b.cast(),
            box_w: self.box_w.cast(),
            box_b: self.box_b.cast(),
            tok_emb: self.tok_emb.cast(),
            txt_pos: self.txt_pos.cast(),
            dec_blocks: self.dec_blocks.iter().map(cast_block).collect(),
            dec_ln_g: self.dec_ln_g.cast(),
            dec_ln_b: self.dec_ln_b.cast(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }

    /// Global L2 norm over all tensors.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for (_, t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
        }
    }
}

impl<F: Float> BlockParams<F> {
    /// Full `[q | 0 | v]` bias of the packed projection.
    pub(crate) fn qkv_bias(&self) -> Vec<F> {
        let d = self.b_qv.len() / 2;
        let mut b = Vec::with_capacity(3 * d);
        b.extend_from_slice(&self.b_qv.data()[..d]);
        b.extend(std::iter::repeat_n(F::zero(), d));
        b.extend_from_slice(&self.b_qv.data()[d..]);
        b
    }

    /// Adds the q and v parts of a packed `3d` bias gradient.
    pub(crate) fn add_qkv_bias_grad(&mut self, db: &[F]) {
        let d = self.b_qv.len() / 2;
        let g = self.b_qv.data_mut();
        for i in 0..d {
            g[i] += db[i];
            g[d + i] += db[2 * d + i];
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<F>)> {
        vec![
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_qkv", &self.w_qkv),
            ("b_qv", &self.b_qv),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        vec![
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("w_qkv", &mut self.w_qkv),
            ("b_qv", &mut self.b_qv),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w_ff1", &mut self.w_ff1),
            ("b_ff1", &mut self.b_ff1),
            ("w_ff2", &mut self.w_ff2),
            ("b_ff2", &mut self.b_ff2),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::new(40)
    }

    #[test]
    fn seeded_init() {
        let a = ModelParams::<f32>::init(&cfg(), 1);
        assert_eq!(a, ModelParams::<f32>::init(&cfg(), 1));
        assert_ne!(a, ModelParams::<f32>::init(&cfg(), 2));
        assert!(a.is_finite());
    }

    #[test]
    fn init_statistics() {
        let p = ModelParams::<f64>::init(&cfg(), 3);
        for (name, t) in p.tensors() {
            if t.len() < 1000 {
                continue;
            }
            let n = t.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((0.015..=0.025).contains(&std), "{name}: std {std}");
        }
        assert!(p.dec_blocks[0].ln1_g.data().iter().all(|&g| g == 1.0));
        assert!(p.out_b.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let p = ModelParams::<f64>::init(&ModelConfig::tiny(40), 4);
        let mut q = ModelParams::<f64>::zeros(&ModelConfig::tiny(40));
        q.assign_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.dedup();
        assert_eq!(names, dedup);
    }
}
