//! Prefix-sharing statistic: how often two captions of the same box start the
//! same way, with and without length conditioning.

use std::collections::BTreeMap;

use super::shard::DatasetShard;
use super::vocab::{len_token, BOS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Every caption starts with BOS.
    BosToken,
    /// Every caption starts with its LEN_K token.
    LengthToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Mean over scenes of each scene's sharing ratio.
    #[default]
    PerImageMean,
    /// Sharing pairs over all pairs in the shard.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrefixRule {
    /// One conditioned sequence is a proper prefix of the other.
    #[default]
    ProperPrefix,
    /// Both conditioned sequences agree on the conditioning token and the
    /// first word.
    SharedLeadingWord,
}

fn shares(a: &[usize], b: &[usize], rule: PrefixRule) -> bool {
    match rule {
        PrefixRule::ProperPrefix => {
            let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
            short.len() < long.len() && long.starts_with(short)
        }
        PrefixRule::SharedLeadingWord => a.len() >= 2 && b.len() >= 2 && a[..2] == b[..2],
    }
}

/// Fraction of same-box caption pairs that share a prefix. Exact duplicate
/// captions of a box are collapsed before pairing. Returns 0 when no box has
/// two distinct captions.
pub fn prefix_share_fraction(
    shard: &DatasetShard,
    mode: ConditioningMode,
    aggregation: Aggregation,
    rule: PrefixRule,
) -> Result<f64> {
    if shard.triplets.is_empty() {
        return Err(Error::Empty("shard has no triplets"));
    }
    // scene -> box -> distinct conditioned sequences
    let mut groups: BTreeMap<u64, BTreeMap<[u64; 4], Vec<Vec<usize>>>> = BTreeMap::new();
    for t in &shard.triplets {
        let key = t.bbox.as_array().map(f64::to_bits);
        let cond = match mode {
            ConditioningMode::BosToken => BOS,
            ConditioningMode::LengthToken => len_token(t.len),
        };
        let mut seq = Vec::with_capacity(t.len + 1);
        seq.push(cond);
        seq.extend_from_slice(t.words());
        let captions = groups.entry(t.scene).or_default().entry(key).or_default();
        if !captions.contains(&seq) {
            captions.push(seq);
        }
    }

    let (mut shared_total, mut pairs_total) = (0usize, 0usize);
    let mut ratios = Vec::new();
    for boxes in groups.values() {
        let (mut shared, mut pairs) = (0usize, 0usize);
        for captions in boxes.values() {
            for i in 0..captions.len() {
                for j in i + 1..captions.len() {
                    pairs += 1;
                    if shares(&captions[i], &captions[j], rule) {
                        shared += 1;
                    }
                }
            }
        }
        if pairs > 0 {
            ratios.push(shared as f64 / pairs as f64);
        }
        shared_total += shared;
        pairs_total += pairs;
    }
    Ok(match aggregation {
        Aggregation::Pooled if pairs_total > 0 => shared_total as f64 / pairs_total as f64,
        Aggregation::PerImageMean if !ratios.is_empty() => ratios.iter().sum::<f64>() / ratios.len() as f64,
        _ => 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::triplet::{Triplet, MAX_LEN};
    use crate::dataset::vocab::Vocab;
    use crate::world::BBox;

    fn shard(captions: &[&str]) -> DatasetShard {
        let v = Vocab::standard();
        let b = BBox::new(0.2, 0.5, 0.15, 0.15);
        let triplets = captions
            .iter()
            .map(|c| {
                let words: Vec<&str> = c.split(' ').collect();
                Triplet::new(1, b, &v.tokenize(&words).unwrap(), MAX_LEN).unwrap()
            })
            .collect();
        DatasetShard { scenes: vec![], triplets }
    }

    fn frac(s: &DatasetShard, mode: ConditioningMode) -> f64 {
        prefix_share_fraction(s, mode, Aggregation::Pooled, PrefixRule::ProperPrefix).unwrap()
    }

    #[test]
    fn hand_cases() {
        let s = shard(&["circle", "circle at left"]);
        assert_eq!(frac(&s, ConditioningMode::BosToken), 1.0);
        assert_eq!(frac(&s, ConditioningMode::LengthToken), 0.0);
        assert_eq!(frac(&shard(&["circle"]), ConditioningMode::BosToken), 0.0);
    }

    #[test]
    fn duplicates_collapse() {
        let s = shard(&["circle", "circle", "red circle"]);
        // one distinct pair, which does not share
        assert_eq!(frac(&s, ConditioningMode::BosToken), 0.0);
    }

    #[test]
    fn leading_word_rule() {
        let s = shard(&["red circle", "red circle at left", "circle"]);
        let f = |m| prefix_share_fraction(&s, m, Aggregation::Pooled, PrefixRule::SharedLeadingWord).unwrap();
        assert!((f(ConditioningMode::BosToken) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(f(ConditioningMode::LengthToken), 0.0);
    }

    #[test]
    fn empty_shard_is_an_error() {
        let s = DatasetShard::default();
        assert!(prefix_share_fraction(&s, ConditioningMode::BosToken, Aggregation::Pooled, PrefixRule::ProperPrefix).is_err());
    }
}
