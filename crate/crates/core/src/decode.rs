//! Greedy and nucleus decoding with a length token and optional text prefix.
//! PAD, BOS and length tokens are never emitted: their logits are set to
//! `-inf` before any choice is made.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::dataset::vocab::{len_of_token, Vocab, BOS, EOS, FIRST_WORD, PAD};
use crate::error::{Error, Result};
use crate::model::{embed_box, encode_image, prefix_state, text_logits, ModelConfig, ModelParams, PrefixState};
use crate::nn::ops::log_softmax;
use crate::nn::Tensor;
use crate::world::{BBox, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub p: f64,
    pub temperature: f64,
    pub samples: usize,
    pub seed: u64,
    /// `LEN_K` followed by optional forced words.
    pub prefix: Vec<usize>,
}

impl DecodeConfig {
    pub fn greedy(prefix: Vec<usize>) -> Self {
        Self { mode: DecodeMode::Greedy, p: 0.9, temperature: 1.0, samples: 1, seed: 0, prefix }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("nucleus p must be in (0, 1], got {}", self.p)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        check_prefix(&self.prefix, cfg)
    }
}

fn check_prefix(prefix: &[usize], cfg: &ModelConfig) -> Result<()> {
    if prefix.first().and_then(|&t| len_of_token(t)).is_none() {
        return Err(Error::Config("decoding prefix must start with a length token".into()));
    }
    if prefix.len() >= cfg.max_len {
        return Err(Error::Config(format!("prefix of {} tokens leaves no room below {}", prefix.len(), cfg.max_len)));
    }
    if let Some(&bad) = prefix[1..].iter().find(|&&t| t >= cfg.vocab || t < FIRST_WORD) {
        return Err(Error::Config(format!("prefix token {bad} is not a word")));
    }
    Ok(())
}

fn is_structural(id: usize) -> bool {
    id == PAD || id == BOS || len_of_token(id).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Eos,
    MaxSteps,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Eos => "eos",
            Termination::MaxSteps => "max_steps",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub bbox: BBox,
    pub prefix: Vec<usize>,
    /// Generated word ids after the prefix, EOS excluded.
    pub words: Vec<usize>,
    pub terminated_by: Termination,
    /// Sum of the chosen tokens' log-probabilities (EOS included) under the
    /// masked softmax at temperature 1.
    pub logprob: f64,
}

impl DecodeResult {
    /// Number of tokens scored in `logprob`.
    pub fn scored_tokens(&self) -> usize {
        self.words.len() + (self.terminated_by == Termination::Eos) as usize
    }

    /// `logprob` per scored token.
    pub fn confidence(&self) -> f64 {
        self.logprob / self.scored_tokens().max(1) as f64
    }

    pub fn to_json(&self, vocab: &Vocab) -> Result<serde_json::Value> {
        Ok(json!({
            "box": self.bbox.as_array(),
            "prefix": vocab.detokenize(&self.prefix)?.join(" "),
            "words": vocab.detokenize(&self.words)?.join(" "),
            "terminated_by": self.terminated_by.as_str(),
            "logprob": self.logprob,
        }))
    }
}

/// Temperature-scaled softmax restricted to the nucleus: tokens sorted by
/// probability (ties to the lower id) are included until the cumulative
/// mass reaches `p`; the result is renormalized. `-inf` logits never enter.
pub fn next_token_dist(logits: &[f64], temperature: f64, p: f64) -> (Vec<usize>, Vec<f64>) {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| weights[i] > 0.0 || i == argmax(logits)).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let (mut ids, mut probs, mut cum) = (Vec::new(), Vec::new(), 0.0);
    for i in order {
        let prob = weights[i] / total;
        ids.push(i);
        probs.push(prob);
        cum += prob;
        if cum >= p {
            break;
        }
    }
    let mass: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|v| *v /= mass);
    (ids, probs)
}

/// Index of the largest value, ties to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws from `(ids, probs)` with a uniform variate `u` in `[0, 1)`.
pub fn pick(ids: &[usize], probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (&id, &p) in ids.iter().zip(probs) {
        cum += p;
        if u < cum {
            return id;
        }
    }
    *ids.last().expect("nucleus is never empty")
}

/// A box prepared for decoding: the cached vision+box prefix.
#[derive(Debug, Clone)]
pub struct Region {
    pub bbox: BBox,
    state: PrefixState<f32>,
}

/// Decoder over fixed parameters.
pub struct Captioner<'a> {
    pub params: &'a ModelParams<f32>,
    pub cfg: &'a ModelConfig,
}

impl<'a> Captioner<'a> {
    pub fn new(params: &'a ModelParams<f32>, cfg: &'a ModelConfig) -> Self {
        Self { params, cfg }
    }

    pub fn encode(&self, image: &Image) -> Result<Tensor<f32>> {
        encode_image(self.params, self.cfg, image)
    }

    pub fn region(&self, vision: &Tensor<f32>, bbox: BBox) -> Result<Region> {
        let token = embed_box(self.params, &bbox);
        Ok(Region { bbox, state: prefix_state(self.params, self.cfg, vision, &token)? })
    }

    /// Masked logits for the token after `seq`.
    fn next_logits(&self, region: &Region, seq: &[usize]) -> Result<Vec<f64>> {
        let logits = text_logits(self.params, self.cfg, &region.state, seq)?;
        let last = logits.row(seq.len() - 1);
        Ok(last
            .iter()
            .enumerate()
            .map(|(id, &l)| if is_structural(id) { f64::NEG_INFINITY } else { l as f64 })
            .collect())
    }

    /// Generic rollout; `choose` maps masked logits to the next token.
    fn rollout<C>(&self, region: &Region, prefix: &[usize], mut choose: C) -> Result<DecodeResult>
    where
        C: FnMut(&[f64]) -> usize,
    {
        check_prefix(prefix, self.cfg)?;
        let mut seq = prefix.to_vec();
        let mut logprob = 0.0;
        let mut terminated_by = Termination::MaxSteps;
        while seq.len() < self.cfg.max_len {
            let logits = self.next_logits(region, &seq)?;
            let token = choose(&logits);
            logprob += log_softmax(&logits)[token];
            if token == EOS {
                terminated_by = Termination::Eos;
                break;
            }
            seq.push(token);
        }
        Ok(DecodeResult {
            bbox: region.bbox,
            prefix: prefix.to_vec(),
            words: seq[prefix.len()..].to_vec(),
            terminated_by,
            logprob,
        })
    }

    pub fn greedy(&self, region: &Region, prefix: &[usize]) -> Result<DecodeResult> {
        self.rollout(region, prefix, argmax)
    }

    /// `k` rollouts; rollout `r` draws from its own ChaCha stream `r` of `seed`.
    pub fn nucleus(&self, region: &Region, prefix: &[usize], p: f64, temperature: f64, k: usize, seed: u64) -> Result<Vec<DecodeResult>> {
        self.nucleus_traced(region, prefix, p, temperature, k, seed, |_, _| {})
    }

    /// [`Captioner::nucleus`] that reports every step's nucleus and choice.
    #[allow(clippy::too_many_arguments)]
    pub fn nucleus_traced<T>(
        &self,
        region: &Region,
        prefix: &[usize],
        p: f64,
        temperature: f64,
        k: usize,
        seed: u64,
        mut trace: T,
    ) -> Result<Vec<DecodeResult>>
    where
        T: FnMut(&[usize], usize),
    {
        (0..k)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                self.rollout(region, prefix, |logits| {
                    let (ids, probs) = next_token_dist(logits, temperature, p);
                    let token = pick(&ids, &probs, rng.random::<f64>());
                    trace(&ids, token);
                    token
                })
            })
            .collect()
    }

    /// Runs `config` on one image and box.
    pub fn decode(&self, image: &Image, bbox: BBox, config: &DecodeConfig) -> Result<Vec<DecodeResult>> {
        config.validate(self.cfg)?;
        let region = self.region(&self.encode(image)?, bbox)?;
        match config.mode {
            DecodeMode::Greedy => Ok(vec![self.greedy(&region, &config.prefix)?]),
            DecodeMode::Nucleus => {
                self.nucleus(&region, &config.prefix, config.p, config.temperature, config.samples, config.seed)
            }
        }
    }
}
