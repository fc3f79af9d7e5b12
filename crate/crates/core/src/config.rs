//! Flat `key = value` run configuration shared by every CLI subcommand.
//!
//! Values start from the library defaults, then a config file, then
//! command-line overrides. Unknown keys are rejected at every layer.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{Aggregation, DatasetConfig, PrefixRule, Vocab};
use crate::decode::DecodeMode;
use crate::error::{Error, Result};
use crate::eval::{DenseEvalConfig, RegionConfig};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::world::WorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelSize {
    #[default]
    Default,
    Tiny,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub model_size: ModelSize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode_mode: DecodeMode,
    pub decode_p: f64,
    pub decode_temperature: f64,
    pub decode_samples: usize,
    pub eval_lengths: Vec<usize>,
    pub region: RegionConfig,
    pub dense: DenseEvalConfig,
    pub stats_aggregation: Aggregation,
    pub stats_rule: PrefixRule,
    /// Longest caption length used when building prompts from a model.
    pub prompt_max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            dataset: DatasetConfig::default(),
            model_size: ModelSize::Default,
            model: ModelConfig::new(Vocab::standard().len()),
            train: TrainConfig::default(),
            decode_mode: DecodeMode::Greedy,
            decode_p: 0.9,
            decode_temperature: 1.0,
            decode_samples: 1,
            eval_lengths: vec![1, 2, 3, 4],
            region: RegionConfig::default(),
            dense: DenseEvalConfig::default(),
            stats_aggregation: Aggregation::PerImageMean,
            stats_rule: PrefixRule::ProperPrefix,
            prompt_max_len: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub const KEYS: &[&str] = &[
    "seed",
    "world.min_objects",
    "world.max_objects",
    "world.shapes",
    "world.colors",
    "dataset.n_max",
    "dataset.p_attr",
    "dataset.threshold",
    "model.size",
    "model.d_model",
    "model.enc_layers",
    "model.dec_layers",
    "model.heads",
    "model.ff_dim",
    "model.loss_on_first",
    "train.steps",
    "train.batch",
    "train.lr",
    "train.warmup",
    "train.weight_decay",
    "train.max_boxes",
    "train.clip_norm",
    "train.checkpoint_every",
    "decode.mode",
    "decode.p",
    "decode.temperature",
    "decode.samples",
    "eval.lengths",
    "region.samples",
    "region.lengths",
    "region.p",
    "region.temperature",
    "dense.iou_thresholds",
    "dense.sim_thresholds",
    "stats.aggregation",
    "stats.rule",
    "prompt.max_len",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "world.min_objects" => self.world.min_objects = parse(key, v)?,
            "world.max_objects" => self.world.max_objects = parse(key, v)?,
            "world.shapes" => self.world.shapes = parse(key, v)?,
            "world.colors" => self.world.colors = parse(key, v)?,
            "dataset.n_max" => self.dataset.n_max = parse(key, v)?,
            "dataset.p_attr" => self.dataset.p_attr = parse(key, v)?,
            "dataset.threshold" => self.dataset.threshold = parse(key, v)?,
            "model.size" => {
                self.model_size = match v {
                    "default" => ModelSize::Default,
                    "tiny" => ModelSize::Tiny,
                    _ => return Err(Error::Config(format!("{key}: expected default or tiny, got `{v}`"))),
                };
                let vocab = self.model.vocab;
                self.model = match self.model_size {
                    ModelSize::Default => ModelConfig::new(vocab),
                    ModelSize::Tiny => ModelConfig::tiny(vocab),
                };
            }
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.enc_layers" => self.model.enc_layers = parse(key, v)?,
            "model.dec_layers" => self.model.dec_layers = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.ff_dim" => self.model.ff_dim = parse(key, v)?,
            "model.loss_on_first" => self.model.loss_on_first = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.warmup" => self.train.warmup = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.max_boxes" => self.train.max_boxes = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "decode.mode" => {
                self.decode_mode = match v {
                    "greedy" => DecodeMode::Greedy,
                    "nucleus" => DecodeMode::Nucleus,
                    _ => return Err(Error::Config(format!("{key}: expected greedy or nucleus, got `{v}`"))),
                }
            }
            "decode.p" => self.decode_p = parse(key, v)?,
            "decode.temperature" => self.decode_temperature = parse(key, v)?,
            "decode.samples" => self.decode_samples = parse(key, v)?,
            "eval.lengths" => self.eval_lengths = parse_list(key, v)?,
            "region.samples" => self.region.samples = parse(key, v)?,
            "region.lengths" => self.region.lengths = parse_list(key, v)?,
            "region.p" => self.region.p = parse(key, v)?,
            "region.temperature" => self.region.temperature = parse(key, v)?,
            "dense.iou_thresholds" => self.dense.iou_thresholds = parse_list(key, v)?,
            "dense.sim_thresholds" => self.dense.sim_thresholds = parse_list(key, v)?,
            "stats.aggregation" => {
                self.stats_aggregation = match v {
                    "per-image" => Aggregation::PerImageMean,
                    "pooled" => Aggregation::Pooled,
                    _ => return Err(Error::Config(format!("{key}: expected per-image or pooled, got `{v}`"))),
                }
            }
            "stats.rule" => {
                self.stats_rule = match v {
                    "proper-prefix" => PrefixRule::ProperPrefix,
                    "shared-leading-word" => PrefixRule::SharedLeadingWord,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected proper-prefix or shared-leading-word, got `{v}`"
                        )))
                    }
                }
            }
            "prompt.max_len" => self.prompt_max_len = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of `key`, formatted so that `set` reads it back.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "world.min_objects" => self.world.min_objects.to_string(),
            "world.max_objects" => self.world.max_objects.to_string(),
            "world.shapes" => self.world.shapes.to_string(),
            "world.colors" => self.world.colors.to_string(),
            "dataset.n_max" => self.dataset.n_max.to_string(),
            "dataset.p_attr" => self.dataset.p_attr.to_string(),
            "dataset.threshold" => self.dataset.threshold.to_string(),
            "model.size" => match self.model_size {
                ModelSize::Default => "default".into(),
                ModelSize::Tiny => "tiny".into(),
            },
            "model.d_model" => self.model.d_model.to_string(),
            "model.enc_layers" => self.model.enc_layers.to_string(),
            "model.dec_layers" => self.model.dec_layers.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.ff_dim" => self.model.ff_dim.to_string(),
            "model.loss_on_first" => self.model.loss_on_first.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.warmup" => self.train.warmup.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.max_boxes" => self.train.max_boxes.to_string(),
            "train.clip_norm" => self.train.clip_norm.to_string(),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "decode.mode" => match self.decode_mode {
                DecodeMode::Greedy => "greedy".into(),
                DecodeMode::Nucleus => "nucleus".into(),
            },
            "decode.p" => self.decode_p.to_string(),
            "decode.temperature" => self.decode_temperature.to_string(),
            "decode.samples" => self.decode_samples.to_string(),
            "eval.lengths" => join(&self.eval_lengths),
            "region.samples" => self.region.samples.to_string(),
            "region.lengths" => join(&self.region.lengths),
            "region.p" => self.region.p.to_string(),
            "region.temperature" => self.region.temperature.to_string(),
            "dense.iou_thresholds" => join(&self.dense.iou_thresholds),
            "dense.sim_thresholds" => join(&self.dense.sim_thresholds),
            "stats.aggregation" => match self.stats_aggregation {
                Aggregation::PerImageMean => "per-image".into(),
                Aggregation::Pooled => "pooled".into(),
            },
            "stats.rule" => match self.stats_rule {
                PrefixRule::ProperPrefix => "proper-prefix".into(),
                PrefixRule::SharedLeadingWord => "shared-leading-word".into(),
            },
            "prompt.max_len" => self.prompt_max_len.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            self.set(key.trim(), value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, path)
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(key.trim(), value)
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).expect("listed key"))).collect()
    }

    /// Copies the run seed into the per-module configs.
    pub fn seeded(mut self) -> Self {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.region.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval_lengths.is_empty() || self.region.lengths.is_empty() {
            return Err(Error::Config("length lists must be non-empty".into()));
        }
        if self.prompt_max_len == 0 {
            return Err(Error::Config("prompt.max_len must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let base = RunConfig::default();
        for (key, value) in base.resolved() {
            let mut c = base.clone();
            c.set(key, &value).unwrap();
            assert_eq!(c, base, "{key}");
        }
    }

    #[test]
    fn file_layers_and_errors() {
        let mut c = RunConfig::default();
        let text = "# toy run\nseed = 7\nmodel.size=tiny  # small\n\ntrain.steps=40\neval.lengths=1, 2\n";
        c.apply_text(text, Path::new("toy.cfg")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.train.steps, 40);
        assert_eq!(c.eval_lengths, vec![1, 2]);
        c.apply_override("train.steps=50").unwrap();
        assert_eq!(c.train.steps, 50);

        let bad = c.apply_text("seed=1\nbogus=3\n", Path::new("x.cfg")).unwrap_err();
        assert!(matches!(bad, Error::Parse { line: 2, .. }), "{bad}");
        assert!(c.apply_text("seed\n", Path::new("x.cfg")).is_err());
        assert!(c.apply_override("seed=abc").is_err());
        assert!(c.apply_override("decode.mode=beam").is_err());
    }

    #[test]
    fn seed_propagates() {
        let mut c = RunConfig::default();
        c.set("seed", "9").unwrap();
        let c = c.seeded();
        assert_eq!((c.dataset.seed, c.train.seed, c.region.seed), (9, 9, 9));
    }
}
