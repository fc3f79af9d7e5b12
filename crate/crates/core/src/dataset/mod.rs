//! Localized-caption dataset pipeline: alt-text → n-grams → filter → box
//! matching → length-prefixed triplets.

pub mod matching;
pub mod ngram;
pub mod shard;
pub mod stats;
pub mod triplet;
pub mod vocab;

pub use matching::{match_ngrams, GrammarScorer, Scorer, DEFAULT_THRESHOLD};
pub use ngram::{extract_ngrams, filter_ngrams};
pub use shard::{read_shard, write_shard, DatasetShard};
pub use stats::{prefix_share_fraction, Aggregation, ConditioningMode, PrefixRule};
pub use triplet::{build_triplets, Triplet, MAX_LEN};
pub use vocab::Vocab;

use crate::derive_seed;
use crate::error::Result;
use crate::world::{alt_text, Scene, MAX_CAPTION_LEN};

const ALT_TEXT_STREAM: u64 = 1;
const ATTRIBUTE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_max: usize,
    pub max_len: usize,
    pub p_attr: f64,
    pub threshold: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_max: MAX_CAPTION_LEN,
            max_len: MAX_LEN,
            p_attr: 0.3,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Runs the full pipeline for one scene with the default grammar scorer.
pub fn scene_triplets(scene: &Scene, vocab: &Vocab, config: &DatasetConfig) -> Result<Vec<Triplet>> {
    scene_triplets_with(scene, vocab, config, &GrammarScorer)
}

/// The alt-text the pipeline extracts n-grams from for `scene`.
pub fn scene_alt_text(scene: &Scene, config: &DatasetConfig) -> String {
    alt_text(scene, derive_seed(config.seed ^ scene.seed, ALT_TEXT_STREAM))
}

pub fn scene_triplets_with(
    scene: &Scene,
    vocab: &Vocab,
    config: &DatasetConfig,
    scorer: &dyn Scorer,
) -> Result<Vec<Triplet>> {
    let text = scene_alt_text(scene, config);
    let ngrams = filter_ngrams(extract_ngrams(&text, config.n_max));
    let matches = match_ngrams(scene, &ngrams, scorer, config.threshold);
    build_triplets(
        scene,
        &matches,
        vocab,
        config.max_len,
        config.p_attr,
        derive_seed(config.seed ^ scene.seed, ATTRIBUTE_STREAM),
    )
}

/// Builds a shard from `scenes`; the output is ordered by scene seed.
pub fn build_dataset(scenes: &[Scene], config: &DatasetConfig) -> Result<DatasetShard> {
    let vocab = Vocab::standard();
    let mut ordered: Vec<&Scene> = scenes.iter().collect();
    ordered.sort_by_key(|s| s.seed);
    let mut shard = DatasetShard::default();
    for scene in ordered {
        shard.triplets.extend(scene_triplets(scene, &vocab, config)?);
        shard.scenes.push(scene.clone());
    }
    Ok(shard)
}
