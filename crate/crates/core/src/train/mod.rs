//! Training loop: box-capped batch sampling, warmup + cosine schedule,
//! global-norm clipping and AdamW.

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetShard, Triplet};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{flexcap_loss_and_grad, Example, ModelConfig, ModelParams};
use crate::nn::{AdamW, AdamWConfig};
use crate::world::{render, Image, Scene};

const INIT_STREAM: u64 = 10;
const SAMPLE_STREAM: u64 = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub max_boxes: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 32,
            lr: 3e-4,
            warmup: 200,
            weight_decay: 0.05,
            max_boxes: 8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.max_boxes == 0 {
            return Err(Error::Config("steps, batch and max_boxes must be positive".into()));
        }
        if self.warmup >= self.steps {
            return Err(Error::Config(format!("warmup {} must be below steps {}", self.warmup, self.steps)));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then cosine decay to 0 at `steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let (peak, warmup, steps) = (config.lr, config.warmup, config.steps);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let progress = ((step - warmup) as f64 / (steps - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Triplets of a shard grouped by scene and then by box, in shard order.
#[derive(Debug, Clone)]
pub struct BoxIndex {
    scenes: Vec<(u64, Vec<Vec<usize>>)>,
}

impl BoxIndex {
    pub fn new(shard: &DatasetShard) -> Self {
        let mut by_scene: BTreeMap<u64, Vec<Vec<usize>>> = BTreeMap::new();
        for (i, t) in shard.triplets.iter().enumerate() {
            let boxes = by_scene.entry(t.scene).or_default();
            match boxes.iter_mut().find(|b| shard.triplets[b[0]].bbox == t.bbox) {
                Some(b) => b.push(i),
                None => boxes.push(vec![i]),
            }
        }
        Self { scenes: by_scene.into_iter().collect() }
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Draws distinct scenes uniformly at random; from each takes up to
/// `max_boxes` distinct boxes in random order and one uniformly chosen
/// caption per box, until `batch` triplet indices are collected. Returned in
/// draw order.
pub fn sample_batch<R: Rng>(index: &BoxIndex, rng: &mut R, batch: usize, max_boxes: usize) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(Error::Empty("shard has no triplets"));
    }
    let mut out = Vec::with_capacity(batch);
    let mut order: Vec<usize> = Vec::new();
    while out.len() < batch {
        if order.is_empty() {
            order = (0..index.scenes.len()).collect();
            order.shuffle(rng);
            order.reverse();
        }
        let scene = order.pop().expect("refilled above");
        let mut boxes: Vec<&Vec<usize>> = index.scenes[scene].1.iter().collect();
        boxes.shuffle(rng);
        for captions in boxes.into_iter().take(max_boxes.min(batch - out.len())) {
            out.push(captions[rng.random_range(0..captions.len())]);
        }
    }
    Ok(out)
}

/// Renders each distinct scene of `triplets` once and builds model examples.
pub fn make_batch(shard: &DatasetShard, triplets: &[&Triplet]) -> Result<(Vec<Image>, Vec<Example>)> {
    let mut slots: Vec<u64> = Vec::new();
    let mut images = Vec::new();
    let mut examples = Vec::with_capacity(triplets.len());
    for t in triplets {
        let slot = match slots.iter().position(|&s| s == t.scene) {
            Some(i) => i,
            None => {
                let scene: &Scene = shard
                    .scene(t.scene)
                    .ok_or_else(|| Error::Shape(format!("triplet refers to missing scene {}", t.scene)))?;
                images.push(render(scene));
                slots.push(t.scene);
                slots.len() - 1
            }
        };
        examples.push(Example { image: slot, bbox: t.bbox, tokens: t.tokens.clone() });
    }
    Ok((images, examples))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Optimizer state around a parameter set.
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    opt: AdamW<f32>,
    rng: ChaCha8Rng,
    index: BoxIndex,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig, shard: &DatasetShard) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if let Some(t) = shard.triplets.iter().find(|t| t.tokens.len() != model.max_len) {
            return Err(Error::Shape(format!(
                "shard sequences have length {}, model max_len is {}",
                t.tokens.len(),
                model.max_len
            )));
        }
        let params = ModelParams::init(&model, derive_seed(config.seed, INIT_STREAM));
        let tensors = params.tensors();
        let shapes: Vec<&[usize]> = tensors.iter().map(|(_, t)| t.shape()).collect();
        let decay = tensors.iter().map(|(_, t)| t.rank() >= 2).collect();
        let adam = AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() };
        let opt = AdamW::new(&shapes, adam).with_decay_mask(decay);
        let index = BoxIndex::new(shard);
        if index.is_empty() {
            return Err(Error::Empty("shard has no triplets"));
        }
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SAMPLE_STREAM));
        Ok(Self { model, config, params, opt, rng, index, step: 0 })
    }

    /// One sample → loss → clip → AdamW update. Step `i` (0-based) uses
    /// `lr_at(i + 1)` so the first update is non-zero.
    pub fn step(&mut self, shard: &DatasetShard) -> Result<StepRecord> {
        let picks = sample_batch(&self.index, &mut self.rng, self.config.batch, self.config.max_boxes)?;
        let triplets: Vec<&Triplet> = picks.iter().map(|&i| &shard.triplets[i]).collect();
        let (images, examples) = make_batch(shard, &triplets)?;
        let image_refs: Vec<&Image> = images.iter().collect();
        let (loss, mut grads) = flexcap_loss_and_grad(&self.params, &self.model, &image_refs, &examples)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let grad_norm = grads.global_norm();
        if grad_norm > self.config.clip_norm {
            grads.scale((self.config.clip_norm / grad_norm) as f32);
        }
        let lr = lr_at(self.step + 1, &self.config);
        let grad_tensors = grads.tensors();
        let grad_refs: Vec<_> = grad_tensors.iter().map(|(_, t)| *t).collect();
        let mut params = self.params.tensors_mut();
        let mut param_refs: Vec<_> = params.iter_mut().map(|(_, t)| &mut **t).collect();
        self.opt.step(&mut param_refs, &grad_refs, lr)?;
        let record = StepRecord { step: self.step, loss, lr, grad_norm };
        self.step += 1;
        Ok(record)
    }
}

/// Runs `config.steps` updates. `on_step` sees every record and the current
/// parameters, and may fail to abort the run.
pub fn train<C>(model: ModelConfig, config: TrainConfig, shard: &DatasetShard, mut on_step: C) -> Result<ModelParams<f32>>
where
    C: FnMut(&StepRecord, &ModelParams<f32>) -> Result<()>,
{
    let mut trainer = Trainer::new(model, config, shard)?;
    for _ in 0..trainer.config.steps {
        let record = trainer.step(shard)?;
        on_step(&record, &trainer.params)?;
    }
    Ok(trainer.params)
}

/// Loss curve as CSV `step,loss,lr`.
pub fn write_loss_curve(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss,lr")?;
    for r in records {
        writeln!(w, "{},{:.6},{:.8e}", r.step, r.loss, r.lr)?;
    }
    w.flush()?;
    Ok(())
}
