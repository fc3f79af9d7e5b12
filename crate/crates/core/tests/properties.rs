//! Property tests over the invariants each module promises.

use proptest::prelude::*;

use flexcap::dataset::ngram::{END_STOPWORDS, START_STOPWORDS, UNINFORMATIVE};
use flexcap::dataset::vocab::{len_token, FIRST_WORD};
use flexcap::dataset::{
    build_dataset, extract_ngrams, filter_ngrams, prefix_share_fraction, scene_alt_text, Aggregation,
    ConditioningMode, DatasetConfig, PrefixRule, Vocab,
};
use flexcap::decode::Captioner;
use flexcap::eval::{eval_dense_captioning, iou, token_f1, DenseEvalConfig, DensePrediction, DenseTruth};
use flexcap::model::{flexcap_loss, forward_logits, Example, ModelConfig, ModelParams};
use flexcap::train::{lr_at, TrainConfig};
use flexcap::world::{
    attribute_caption, caption_for, generate_scene, lexicon, region_word, render, Attribute, BBox, Region, Scene,
    WorldConfig,
};

fn any_box() -> impl Strategy<Value = BBox> {
    (0.05..0.95f64, 0.05..0.95f64, 0.01..0.6f64, 0.01..0.6f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn any_words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["red", "blue", "circle", "square", "at", "left", "the"]), 1..6)
        .prop_map(|ws| ws.into_iter().map(String::from).collect())
}

fn contains_run(haystack: &[&str], needle: &[&str]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn captions_have_requested_length(seed in 0u64..100_000, k in 1usize..=8) {
        let scene = generate_scene(seed, &WorldConfig::default()).unwrap();
        let lex = lexicon();
        for i in 0..scene.objects.len() {
            if let Ok(words) = caption_for(&scene, i, k) {
                prop_assert_eq!(words.len(), k);
                prop_assert!(words.iter().all(|w| lex.contains(w)));
            }
        }
    }

    #[test]
    fn region_word_uses_strict_thirds(cx in 0.0..=1.0f64, cy in 0.0..=1.0f64) {
        let r = region_word(cx, cy);
        prop_assert_eq!(r, region_word(cx, cy));
        let expected = if cx < 1.0 / 3.0 {
            Region::Left
        } else if cx > 2.0 / 3.0 {
            Region::Right
        } else if cy < 1.0 / 3.0 {
            Region::Top
        } else if cy > 2.0 / 3.0 {
            Region::Bottom
        } else {
            Region::Center
        };
        prop_assert_eq!(r, expected);
    }

    #[test]
    fn scenes_round_trip_through_json(seed in any::<u64>()) {
        let scene = generate_scene(seed, &WorldConfig::default()).unwrap();
        prop_assert_eq!(Scene::from_json(&scene.to_json_line()).unwrap(), scene);
    }

    #[test]
    fn filter_survivors_obey_every_rule(
        text in prop::collection::vec(
            prop::sample::select(vec!["a", "the", "red", "circle", "with", "of", "photo", "near", "square", "is", "to"]),
            1..12,
        )
    ) {
        for g in filter_ngrams(extract_ngrams(&text.join(" "), 8)) {
            prop_assert!(!g.iter().all(|w| UNINFORMATIVE.contains(&w.as_str())));
            prop_assert!(!START_STOPWORDS.contains(&g[0].as_str()));
            prop_assert!(!END_STOPWORDS.contains(&g[g.len() - 1].as_str()));
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in any_box(), b in any_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn token_f1_is_symmetric_and_bounded(a in any_words(), b in any_words()) {
        let (ab, ba) = (token_f1(&a, &b), token_f1(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(token_f1(&a, &a), 1.0);
    }

    #[test]
    fn lr_schedule_is_continuous_and_non_negative(
        warmup in 1usize..500,
        extra in 1usize..5000,
        lr in 1e-5..1e-2f64,
        step in 0usize..6000,
    ) {
        let tc = TrainConfig { steps: warmup + extra, warmup, lr, ..TrainConfig::default() };
        prop_assert!(lr_at(step, &tc) >= 0.0);
        let left = lr * (warmup as f64 - 1e-9) / warmup as f64;
        prop_assert!((lr_at(warmup, &tc) - lr).abs() < 1e-15);
        prop_assert!((left - lr_at(warmup, &tc)).abs() < 1e-9);
        // one step past the peak moves by at most the cosine's slope bound
        let slope = lr * std::f64::consts::PI / 2.0 / extra as f64;
        prop_assert!(lr_at(warmup + 1, &tc) >= lr - slope - 1e-15);
    }
}

/// Up to 6 predictions and 4 truths over two images, with distinct
/// confidences.
fn dense_instance() -> impl Strategy<Value = (Vec<DensePrediction>, Vec<DenseTruth>)> {
    let truth = (0u64..2, any_box(), any_words()).prop_map(|(image, bbox, words)| DenseTruth { image, bbox, words });
    let pred = (0u64..2, any_box(), any_words()).prop_map(|(image, bbox, words)| (image, bbox, words));
    (prop::collection::vec(pred, 0..6), prop::collection::vec(truth, 1..4)).prop_map(|(preds, truths)| {
        let preds = preds
            .into_iter()
            .enumerate()
            .map(|(i, (image, bbox, words))| DensePrediction { image, bbox, words, confidence: 1.0 - i as f64 * 0.1 })
            .collect();
        (preds, truths)
    })
}

fn cell(preds: &[DensePrediction], truths: &[DenseTruth], t_iou: f64, t_sim: f64) -> f64 {
    let cfg = DenseEvalConfig { iou_thresholds: vec![t_iou], sim_thresholds: vec![t_sim] };
    eval_dense_captioning(preds, truths, &cfg).unwrap().map
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dense_ap_ignores_prediction_order((preds, truths) in dense_instance(), seed in any::<u64>()) {
        let mut shuffled = preds.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        let cfg = DenseEvalConfig::default();
        prop_assert_eq!(
            eval_dense_captioning(&preds, &truths, &cfg).unwrap(),
            eval_dense_captioning(&shuffled, &truths, &cfg).unwrap()
        );
    }

    #[test]
    fn raising_a_threshold_never_raises_ap(
        (preds, truths) in dense_instance(),
        lo in 0.0..0.8f64,
        delta in 0.0..0.4f64,
        other in 0.0..0.6f64,
    ) {
        let hi = lo + delta;
        prop_assert!(cell(&preds, &truths, hi, other) <= cell(&preds, &truths, lo, other) + 1e-12);
        prop_assert!(cell(&preds, &truths, other, hi) <= cell(&preds, &truths, other, lo) + 1e-12);
    }
}

fn tiny() -> ModelConfig {
    ModelConfig::tiny(Vocab::standard().len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn later_tokens_never_change_earlier_logits(
        seed in 0u64..1000,
        tokens in prop::collection::vec(0usize..40, 12),
        j in 1usize..11,
        delta in 1usize..40,
    ) {
        let cfg = tiny();
        let params = ModelParams::<f32>::init_with_std(&cfg, seed, 0.2);
        let image = render(&generate_scene(seed, &WorldConfig::default()).unwrap());
        let bbox = BBox::new(0.4, 0.6, 0.3, 0.2);
        let mut changed = tokens.clone();
        // every position from j on is perturbed
        for t in &mut changed[j..] {
            *t = (*t + delta) % cfg.vocab;
        }
        let run = |tokens: Vec<usize>| {
            forward_logits(&params, &cfg, &[&image], &[Example { image: 0, bbox, tokens }]).unwrap().data().to_vec()
        };
        let (a, b) = (run(tokens), run(changed));
        prop_assert_eq!(&a[..j * cfg.vocab], &b[..j * cfg.vocab]);
    }

    #[test]
    fn loss_ignores_batch_order(seed in 0u64..1000, rot in 1usize..4) {
        let cfg = tiny();
        let params = ModelParams::<f64>::init_with_std(&cfg, seed, 0.1);
        let scenes: Vec<Scene> = (0..2).map(|i| generate_scene(seed + i, &WorldConfig::default()).unwrap()).collect();
        let images: Vec<_> = scenes.iter().map(render).collect();
        let refs: Vec<_> = images.iter().collect();
        let vocab = Vocab::standard();
        let mut batch = Vec::new();
        for (i, scene) in scenes.iter().enumerate() {
            for k in 1..=2 {
                let words = caption_for(scene, 0, k).unwrap();
                let mut tokens = vec![len_token(k)];
                tokens.extend(vocab.tokenize(&words).unwrap());
                tokens.push(flexcap::dataset::vocab::EOS);
                tokens.resize(cfg.max_len, flexcap::dataset::vocab::PAD);
                batch.push(Example { image: i, bbox: scene.objects[0].bbox(), tokens });
            }
        }
        let a = flexcap_loss(&params, &cfg, &refs, &batch).unwrap();
        batch.rotate_left(rot);
        let b = flexcap_loss(&params, &cfg, &refs, &batch).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn decoding_never_emits_structural_tokens(seed in 0u64..1000, bbox in any_box(), k in 1usize..=8) {
        let cfg = tiny();
        let params = ModelParams::<f32>::init_with_std(&cfg, seed, 0.5);
        let captioner = Captioner::new(&params, &cfg);
        let scene = generate_scene(seed, &WorldConfig::default()).unwrap();
        let vision = captioner.encode(&render(&scene)).unwrap();
        let region = captioner.region(&vision, bbox).unwrap();
        let greedy = captioner.greedy(&region, &[len_token(k)]).unwrap();
        prop_assert_eq!(&greedy, &captioner.greedy(&region, &[len_token(k)]).unwrap());
        let samples = captioner.nucleus(&region, &[len_token(k)], 0.9, 1.5, 4, seed).unwrap();
        for r in std::iter::once(&greedy).chain(&samples) {
            prop_assert!(r.words.iter().all(|&t| t >= FIRST_WORD && t < cfg.vocab));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn length_tokens_never_raise_prefix_sharing(first in 0u64..100_000, n in 5u64..40, dseed in 0u64..50) {
        let scenes: Vec<Scene> = (first..first + n).map(|s| generate_scene(s, &WorldConfig::default()).unwrap()).collect();
        let shard = build_dataset(&scenes, &DatasetConfig { seed: dseed, ..DatasetConfig::default() }).unwrap();
        for agg in [Aggregation::PerImageMean, Aggregation::Pooled] {
            for rule in [PrefixRule::ProperPrefix, PrefixRule::SharedLeadingWord] {
                let bos = prefix_share_fraction(&shard, ConditioningMode::BosToken, agg, rule).unwrap();
                let len = prefix_share_fraction(&shard, ConditioningMode::LengthToken, agg, rule).unwrap();
                prop_assert!(len <= bos, "{agg:?} {rule:?}: {len} > {bos}");
            }
        }
    }

    #[test]
    fn triplet_captions_come_from_alt_text_or_attribute_forms(first in 0u64..100_000, dseed in 0u64..50) {
        let config = DatasetConfig { seed: dseed, ..DatasetConfig::default() };
        let scenes: Vec<Scene> = (first..first + 8).map(|s| generate_scene(s, &WorldConfig::default()).unwrap()).collect();
        let shard = build_dataset(&scenes, &config).unwrap();
        let vocab = Vocab::standard();
        for t in &shard.triplets {
            let scene = shard.scene(t.scene).unwrap();
            let words = vocab.detokenize(t.words()).unwrap();
            let words: Vec<&str> = words.iter().map(String::as_str).collect();
            let alt = scene_alt_text(scene, &config);
            let alt: Vec<&str> = alt.split_whitespace().collect();
            let attribute = scene
                .objects
                .iter()
                .filter(|o| o.bbox() == t.bbox)
                .any(|o| Attribute::ALL.iter().any(|&a| attribute_caption(o, a) == words));
            prop_assert!(contains_run(&alt, &words) || attribute, "{words:?} not in {alt:?}");
        }
    }
}
