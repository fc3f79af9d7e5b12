//! Evaluation protocols: length compliance, region classification by
//! caption voting, dense-captioning mAP over an IoU x similarity grid, and
//! attribute extraction through text prefixes.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::vocab::{len_token, Vocab};
use crate::decode::Captioner;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::world::{caption_for, render, Attribute, BBox, Scene, Shape};

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Unigram F1 over multisets. Two empty sequences score 1.
pub fn token_f1<S: AsRef<str>>(pred: &[S], reference: &[S]) -> f64 {
    if pred.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    fn counts<S: AsRef<str>>(words: &[S]) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for w in words {
            *m.entry(w.as_ref()).or_default() += 1;
        }
        m
    }
    let (p, r) = (counts(pred), counts(reference));
    let overlap: usize = p.iter().map(|(w, &c)| c.min(r.get(w).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplianceRow {
    pub k: usize,
    pub mean_len: f64,
    pub accuracy: f64,
    /// Cases counted for this `k`.
    pub count: usize,
}

fn words_of(vocab: &Vocab, ids: &[usize]) -> Result<Vec<String>> {
    vocab.detokenize(ids)
}

/// Greedy captions for one seeded random object per scene at every `k` in
/// `lengths`. A `k` the grammar cannot express for that object is still
/// decoded but left out of the row.
pub fn eval_length_compliance(
    captioner: &Captioner,
    scenes: &[Scene],
    lengths: &[usize],
    seed: u64,
) -> Result<Vec<ComplianceRow>> {
    if scenes.is_empty() {
        return Err(Error::Empty("no test scenes"));
    }
    let mut sums: Vec<(usize, usize, usize)> = vec![(0, 0, 0); lengths.len()];
    for scene in scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, scene.seed));
        let object = rng.random_range(0..scene.objects.len());
        let vision = captioner.encode(&render(scene))?;
        let region = captioner.region(&vision, scene.objects[object].bbox())?;
        for (slot, &k) in lengths.iter().enumerate() {
            let result = captioner.greedy(&region, &[len_token(k)])?;
            if caption_for(scene, object, k).is_ok() {
                let (words, exact, count) = &mut sums[slot];
                *words += result.words.len();
                *exact += (result.words.len() == k) as usize;
                *count += 1;
            }
        }
    }
    Ok(lengths
        .iter()
        .zip(sums)
        .map(|(&k, (words, exact, count))| {
            let n = count.max(1) as f64;
            ComplianceRow { k, mean_len: words as f64 / n, accuracy: exact as f64 / n, count }
        })
        .collect())
}

/// Caption-voting settings for region classification.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionConfig {
    pub samples: usize,
    pub lengths: Vec<usize>,
    pub p: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { samples: 20, lengths: vec![1, 2, 3, 4], p: 0.9, temperature: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionReport {
    pub accuracy: f64,
    pub objects: usize,
    /// Objects where every sampled caption abstained.
    pub all_abstained: usize,
}

/// Plurality class over the first shape word of each caption; ties go to
/// the lower class id, and no votes at all yields class 0.
pub fn vote_shape<S: AsRef<str>>(captions: &[Vec<S>]) -> (Shape, usize) {
    let mut votes = [0usize; Shape::ALL.len()];
    for caption in captions {
        if let Some(shape) = caption.iter().find_map(|w| Shape::from_word(w.as_ref())) {
            votes[shape.index()] += 1;
        }
    }
    let total = votes.iter().sum();
    let best = (0..votes.len()).fold(0, |b, i| if votes[i] > votes[b] { i } else { b });
    (Shape::ALL[best], total)
}

/// Classifies every ground-truth object by voting over nucleus samples at
/// each length in `config.lengths`.
pub fn eval_region_classification(captioner: &Captioner, scenes: &[Scene], config: &RegionConfig) -> Result<RegionReport> {
    if scenes.is_empty() {
        return Err(Error::Empty("no test scenes"));
    }
    let vocab = Vocab::standard();
    let (mut correct, mut objects, mut all_abstained) = (0, 0, 0);
    for scene in scenes {
        let vision = captioner.encode(&render(scene))?;
        for (i, object) in scene.objects.iter().enumerate() {
            let region = captioner.region(&vision, object.bbox())?;
            let mut captions = Vec::new();
            for &k in &config.lengths {
                let seed = derive_seed(config.seed, derive_seed(scene.seed, (i * 16 + k) as u64));
                for r in captioner.nucleus(&region, &[len_token(k)], config.p, config.temperature, config.samples, seed)? {
                    captions.push(words_of(&vocab, &r.words)?);
                }
            }
            let (shape, votes) = vote_shape(&captions);
            correct += (shape == object.shape) as usize;
            all_abstained += (votes == 0) as usize;
            objects += 1;
        }
    }
    Ok(RegionReport { accuracy: correct as f64 / objects as f64, objects, all_abstained })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseEvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub sim_thresholds: Vec<f64>,
}

impl Default for DenseEvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            sim_thresholds: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensePrediction {
    pub image: u64,
    pub bbox: BBox,
    pub words: Vec<String>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTruth {
    pub image: u64,
    pub bbox: BBox,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseReport {
    pub map: f64,
    /// `grid[iou][sim]` average precision.
    pub grid: Vec<Vec<f64>>,
}

/// Area under the precision-recall curve with all-point interpolation;
/// `hits` is in descending-confidence order.
pub fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut tp = 0usize;
    for (i, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

fn match_cell(preds: &[&DensePrediction], truths: &[DenseTruth], min_iou: f64, min_sim: f64) -> Vec<bool> {
    let mut used = vec![false; truths.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, truth) in truths.iter().enumerate() {
                if used[g] || truth.image != p.image {
                    continue;
                }
                let overlap = p.bbox.iou(&truth.bbox);
                if best.is_none_or(|(_, o)| overlap > o) {
                    best = Some((g, overlap));
                }
            }
            match best {
                Some((g, overlap)) if overlap >= min_iou && token_f1(&p.words, &truths[g].words) >= min_sim => {
                    used[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Mean AP over every `(iou, similarity)` threshold pair. Predictions are
/// ranked by confidence (stable for ties). Each one is compared with the
/// unmatched truth of the same image that it overlaps most; it is a hit when
/// that pair clears both thresholds, and only then is the truth consumed.
/// Choosing the partner before thresholding keeps every cell's AP monotone
/// in the thresholds.
pub fn eval_dense_captioning(
    predictions: &[DensePrediction],
    truths: &[DenseTruth],
    config: &DenseEvalConfig,
) -> Result<DenseReport> {
    if truths.is_empty() {
        return Err(Error::Empty("no ground-truth regions"));
    }
    let mut ranked: Vec<&DensePrediction> = predictions.iter().collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let grid: Vec<Vec<f64>> = config
        .iou_thresholds
        .iter()
        .map(|&ti| {
            config
                .sim_thresholds
                .iter()
                .map(|&ts| average_precision(&match_cell(&ranked, truths, ti, ts), truths.len()))
                .collect()
        })
        .collect();
    let cells = (config.iou_thresholds.len() * config.sim_thresholds.len()).max(1);
    let map = grid.iter().flatten().sum::<f64>() / cells as f64;
    Ok(DenseReport { map, grid })
}

/// Distractor boxes added per image to the proposal set.
pub const DISTRACTORS: usize = 2;
const JITTER: f64 = 0.05;

/// Proposals for one scene: each ground-truth box with center and size
/// jitter of up to ±0.05, then random distractor boxes.
pub fn proposals(scene: &Scene, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, scene.seed));
    let mut jitter = |v: f64, lo: f64| (v + rng.random_range(-JITTER..=JITTER)).clamp(lo, 1.0);
    let mut out: Vec<BBox> = scene
        .objects
        .iter()
        .map(|o| {
            let b = o.bbox();
            BBox::new(jitter(b.cx, 0.0), jitter(b.cy, 0.0), jitter(b.w, 0.02), jitter(b.h, 0.02))
        })
        .collect();
    for _ in 0..DISTRACTORS {
        let w = rng.random_range(0.1..0.4);
        let h = rng.random_range(0.1..0.4);
        out.push(BBox::new(rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h));
    }
    out
}

/// Greedy `LEN_3` captions on [`proposals`], scored by mean token
/// log-probability, and the canonical three-word truths.
pub fn dense_inputs(captioner: &Captioner, scenes: &[Scene], seed: u64) -> Result<(Vec<DensePrediction>, Vec<DenseTruth>)> {
    let vocab = Vocab::standard();
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    for scene in scenes {
        let vision = captioner.encode(&render(scene))?;
        for bbox in proposals(scene, seed) {
            let r = captioner.greedy(&captioner.region(&vision, bbox)?, &[len_token(3)])?;
            preds.push(DensePrediction { image: scene.seed, bbox, words: words_of(&vocab, &r.words)?, confidence: r.confidence() });
        }
        for (i, o) in scene.objects.iter().enumerate() {
            let words = caption_for(scene, i, 3)?.iter().map(|w| w.to_string()).collect();
            truths.push(DenseTruth { image: scene.seed, bbox: o.bbox(), words });
        }
    }
    Ok((preds, truths))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixRow {
    pub attribute: Attribute,
    pub accuracy: f64,
    /// Completions that were exactly one word.
    pub single_word: f64,
    pub count: usize,
}

/// Greedy completion of `LEN_4 the <attribute> is` for every object; a case
/// is correct when the first generated word is the true attribute value.
pub fn eval_prefix_extraction(captioner: &Captioner, scenes: &[Scene]) -> Result<Vec<PrefixRow>> {
    if scenes.is_empty() {
        return Err(Error::Empty("no test scenes"));
    }
    let vocab = Vocab::standard();
    let mut tallies = [(0usize, 0usize, 0usize); 3];
    for scene in scenes {
        let vision = captioner.encode(&render(scene))?;
        for object in &scene.objects {
            let region = captioner.region(&vision, object.bbox())?;
            for (slot, attribute) in Attribute::ALL.iter().enumerate() {
                let mut prefix = vec![len_token(4)];
                prefix.extend(vocab.tokenize(&attribute.prompt_words())?);
                let r = captioner.greedy(&region, &prefix)?;
                let words = words_of(&vocab, &r.words)?;
                let (correct, single, count) = &mut tallies[slot];
                *correct += (words.first().map(String::as_str) == Some(attribute.value_of(object))) as usize;
                *single += (words.len() == 1) as usize;
                *count += 1;
            }
        }
    }
    Ok(Attribute::ALL
        .iter()
        .zip(tallies)
        .map(|(&attribute, (correct, single, count))| PrefixRow {
            attribute,
            accuracy: correct as f64 / count as f64,
            single_word: single as f64 / count as f64,
            count,
        })
        .collect())
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_compliance_csv(rows: &[ComplianceRow], path: &Path) -> Result<()> {
    let body = rows.iter().map(|r| format!("{},{:.6},{:.6},{}", r.k, r.mean_len, r.accuracy, r.count));
    write_lines(path, std::iter::once("k,mean_len,accuracy,count".to_string()).chain(body))
}

pub fn write_region_csv(report: &RegionReport, path: &Path) -> Result<()> {
    write_lines(
        path,
        [
            "accuracy,objects,all_abstained".to_string(),
            format!("{:.6},{},{}", report.accuracy, report.objects, report.all_abstained),
        ],
    )
}

/// One row per IoU threshold, one column per similarity threshold, and a
/// final `map` line.
pub fn write_dense_csv(report: &DenseReport, config: &DenseEvalConfig, path: &Path) -> Result<()> {
    let header = std::iter::once("iou".to_string())
        .chain(config.sim_thresholds.iter().map(|t| format!("sim_{t}")))
        .collect::<Vec<_>>()
        .join(",");
    let rows = config.iou_thresholds.iter().zip(&report.grid).map(|(t, row)| {
        std::iter::once(format!("{t}"))
            .chain(row.iter().map(|ap| format!("{ap:.6}")))
            .collect::<Vec<_>>()
            .join(",")
    });
    let footer = format!("map,{:.6}", report.map);
    write_lines(path, std::iter::once(header).chain(rows).chain(std::iter::once(footer)))
}

pub fn write_prefix_csv(rows: &[PrefixRow], path: &Path) -> Result<()> {
    let body = rows
        .iter()
        .map(|r| format!("{},{:.6},{:.6},{}", r.attribute.word(), r.accuracy, r.single_word, r.count));
    write_lines(path, std::iter::once("attribute,accuracy,single_word,count".to_string()).chain(body))
}

/// Counts of each distinct item, in first-seen order.
pub fn histogram<T: Eq + Hash + Clone>(items: impl IntoIterator<Item = T>) -> Vec<(T, usize)> {
    let mut order: Vec<T> = Vec::new();
    let mut counts: HashMap<T, usize> = HashMap::new();
    for item in items {
        let c = counts.entry(item.clone()).or_insert(0);
        if *c == 0 {
            order.push(item);
        }
        *c += 1;
    }
    order
        .into_iter()
        .map(|t| {
            let c = counts[&t];
            (t, c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn f1_cases() {
        assert_eq!(token_f1(&w("red circle"), &w("red circle")), 1.0);
        assert_eq!(token_f1(&w("red circle"), &w("blue square")), 0.0);
        assert!((token_f1(&w("red circle"), &w("large red circle")) - 0.8).abs() < 1e-9);
        assert_eq!(token_f1::<String>(&[], &[]), 1.0);
        assert_eq!(token_f1(&[], &w("x")), 0.0);
        // multiset: a repeated word only matches as often as it appears
        assert!((token_f1(&w("red red"), &w("red circle")) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iou_hand_value() {
        let a = BBox::new(0.25, 0.25, 0.5, 0.5);
        let b = BBox::new(0.5, 0.5, 0.5, 0.5);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-9);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(0.8, 0.8, 0.1, 0.1)), 0.0);
    }

    #[test]
    fn voting() {
        let caps = vec![w("red circle"), w("square"), w("big square near the circle"), w("red")];
        assert_eq!(vote_shape(&caps), (Shape::Square, 3));
        assert_eq!(vote_shape(&[w("square"), w("circle")]).0, Shape::Circle);
        assert_eq!(vote_shape(&[w("red"), w("blue")]), (Shape::ALL[0], 0));
    }

    fn truth(image: u64, b: BBox, s: &str) -> DenseTruth {
        DenseTruth { image, bbox: b, words: w(s) }
    }

    fn pred(image: u64, b: BBox, s: &str, confidence: f64) -> DensePrediction {
        DensePrediction { image, bbox: b, words: w(s), confidence }
    }

    #[test]
    fn dense_hand_cases() {
        let cfg = DenseEvalConfig::default();
        let gt = BBox::new(0.5, 0.5, 0.4, 0.4);
        let r = eval_dense_captioning(&[pred(1, gt, "small red circle", -0.1)], &[truth(1, gt, "small red circle")], &cfg).unwrap();
        assert_eq!(r.map, 1.0);

        // IoU 0.35: same center, area ratio 0.35; F1 0.12 from 3/47 overlap is
        // awkward, so build F1 directly: 1 shared word of 2 vs 15 words = 2/17
        let shrunk = BBox::new(0.5, 0.5, 0.4 * 0.35f64.sqrt(), 0.4 * 0.35f64.sqrt());
        assert!((shrunk.iou(&gt) - 0.35).abs() < 1e-9);
        let long = "a b c d e f g h i j k l m n circle";
        let f1 = token_f1(&w("red circle"), &w(long));
        assert!((f1 - 2.0 / 17.0).abs() < 1e-12 && f1 > 0.1 && f1 < 0.15);
        let r = eval_dense_captioning(&[pred(1, shrunk, "red circle", -0.2)], &[truth(1, gt, long)], &cfg).unwrap();
        assert!((r.map - 0.1).abs() < 1e-12, "{:?}", r.grid);
        for (i, row) in r.grid.iter().enumerate() {
            for (j, &ap) in row.iter().enumerate() {
                assert_eq!(ap, if i == 0 && j <= 2 { 1.0 } else { 0.0 });
            }
        }

        assert!(eval_dense_captioning(&[], &[], &cfg).is_err());
    }

    #[test]
    fn dense_matching_details() {
        let cfg = DenseEvalConfig { iou_thresholds: vec![0.5], sim_thresholds: vec![0.0] };
        let g1 = BBox::new(0.3, 0.3, 0.2, 0.2);
        let g2 = BBox::new(0.7, 0.7, 0.2, 0.2);
        let truths = [truth(1, g1, "a"), truth(1, g2, "b")];
        // a duplicate of g1 ranked above the real g2 hit is a false positive
        let preds = [pred(1, g1, "a", 0.9), pred(1, g1, "a", 0.8), pred(1, g2, "b", 0.7)];
        let r = eval_dense_captioning(&preds, &truths, &cfg).unwrap();
        // precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 → 0.5 * 1 + 0.5 * 2/3
        assert!((r.map - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        // a box from another image never matches
        let r = eval_dense_captioning(&[pred(2, g1, "a", 0.9)], &truths, &cfg).unwrap();
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn ap_all_point() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert!((average_precision(&[true, false, true], 4) - (0.25 + 0.25 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn proposals_are_seeded() {
        let scene = crate::world::generate_scene(3, &crate::world::WorldConfig::default()).unwrap();
        let a = proposals(&scene, 1);
        assert_eq!(a.len(), scene.objects.len() + DISTRACTORS);
        assert_eq!(a, proposals(&scene, 1));
        assert_ne!(a, proposals(&scene, 2));
        for (p, o) in a.iter().zip(&scene.objects) {
            let b = o.bbox();
            assert!((p.cx - b.cx).abs() <= JITTER + 1e-12 && (p.w - b.w).abs() <= JITTER + 1e-12);
        }
    }

    #[test]
    fn histogram_counts() {
        assert_eq!(histogram([3, 1, 3, 2, 3]), vec![(3, 3), (1, 1), (2, 1)]);
    }

    #[test]
    fn stricter_text_threshold_cannot_raise_ap() {
        // The first prediction overlaps b best but only weakly agrees with
        // its caption; the second matches b alone.
        let b = BBox::new(0.5, 0.5, 0.4, 0.4);
        let c = BBox::new(0.6, 0.5, 0.4, 0.4);
        let truths = vec![
            DenseTruth { image: 0, bbox: b, words: w("circle q w e r") },
            DenseTruth { image: 0, bbox: c, words: w("red circle") },
        ];
        let preds = vec![
            DensePrediction { image: 0, bbox: b, words: w("red circle"), confidence: 0.9 },
            DensePrediction { image: 0, bbox: b, words: w("q w e r z"), confidence: 0.8 },
        ];
        let ap = |sim| {
            let cfg = DenseEvalConfig { iou_thresholds: vec![0.3], sim_thresholds: vec![sim] };
            eval_dense_captioning(&preds, &truths, &cfg).unwrap().map
        };
        assert_eq!(ap(0.05), 0.5);
        assert!(ap(0.5) <= ap(0.05));
    }
}
