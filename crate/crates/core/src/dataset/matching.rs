//! N-gram to box matching. A rule-based scorer stands in for an open-vocabulary
//! detector; any [`Scorer`] can be plugged in.

use std::collections::HashSet;

use crate::world::{nearest_neighbor, Color, Region, Scene, Shape, Size};

pub const DEFAULT_THRESHOLD: f64 = 0.1;

pub trait Scorer {
    /// Similarity between an n-gram and one object of the scene.
    fn score(&self, scene: &Scene, object_index: usize, ngram: &[String]) -> f64;
}

/// Scores 1 when the n-gram is a grammatical description consistent with the
/// object, 0 otherwise.
///
/// Accepted shape: `[SIZE|COLOR]* SHAPE [at REGION] [near the [COLOR2] SHAPE2]`.
/// Every word before the shape must be a size or color word of the object;
/// anything after the shape must parse as the suffix above in full.
#[derive(Debug, Clone, Copy, Default)]
pub struct GrammarScorer;

impl Scorer for GrammarScorer {
    fn score(&self, scene: &Scene, object_index: usize, ngram: &[String]) -> f64 {
        if grammar_consistent(scene, object_index, ngram) {
            1.0
        } else {
            0.0
        }
    }
}

fn grammar_consistent(scene: &Scene, object_index: usize, ngram: &[String]) -> bool {
    let object = &scene.objects[object_index];
    let Some(shape_at) = ngram.iter().position(|w| Shape::from_word(w).is_some()) else {
        return false;
    };
    if Shape::from_word(&ngram[shape_at]) != Some(object.shape) {
        return false;
    }
    let modifiers_ok = ngram[..shape_at].iter().all(|w| {
        if let Some(c) = Color::from_word(w) {
            c == object.color
        } else if let Some(s) = Size::from_word(w) {
            s == object.size
        } else {
            false
        }
    });
    if !modifiers_ok {
        return false;
    }

    let mut rest = &ngram[shape_at + 1..];
    if rest.first().map(String::as_str) == Some("at") {
        match rest.get(1).and_then(|w| Region::from_word(w)) {
            Some(r) if r == object.region() => rest = &rest[2..],
            _ => return false,
        }
    }
    if rest.is_empty() {
        return true;
    }
    if rest.len() < 3 || rest[0] != "near" || rest[1] != "the" {
        return false;
    }
    let Some(neighbor) = nearest_neighbor(scene, object_index).map(|j| &scene.objects[j]) else {
        return false;
    };
    match &rest[2..] {
        [shape] => Shape::from_word(shape) == Some(neighbor.shape),
        [color, shape] => {
            Color::from_word(color) == Some(neighbor.color) && Shape::from_word(shape) == Some(neighbor.shape)
        }
        _ => false,
    }
}

/// Pairs every n-gram with every object it scores above `threshold` on.
/// Output follows n-gram order, then object order; exact repeats are dropped.
pub fn match_ngrams(
    scene: &Scene,
    ngrams: &[Vec<String>],
    scorer: &dyn Scorer,
    threshold: f64,
) -> Vec<(usize, Vec<String>)> {
    let mut seen: HashSet<(usize, &[String])> = HashSet::new();
    let mut out = Vec::new();
    for g in ngrams {
        for i in 0..scene.objects.len() {
            if scorer.score(scene, i, g) > threshold && seen.insert((i, g.as_slice())) {
                out.push((i, g.clone()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::ObjectSpec;

    fn scene() -> Scene {
        Scene {
            seed: 0,
            objects: vec![
                ObjectSpec { shape: Shape::Circle, color: Color::Red, size: Size::Small, cx: 0.2, cy: 0.5 },
                ObjectSpec { shape: Shape::Square, color: Color::Blue, size: Size::Large, cx: 0.75, cy: 0.5 },
            ],
        }
    }

    fn g(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn matched(text: &str) -> Vec<usize> {
        match_ngrams(&scene(), &[g(text)], &GrammarScorer, DEFAULT_THRESHOLD)
            .into_iter()
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn reference_cases() {
        assert_eq!(matched("red circle"), [0]);
        assert!(matched("red square").is_empty());
        assert_eq!(matched("circle near the square"), [0]);
    }

    #[test]
    fn suffix_rules() {
        assert_eq!(matched("small red circle at left"), [0]);
        assert!(matched("small red circle at right").is_empty());
        assert_eq!(matched("large blue square at right near the red circle"), [1]);
        assert!(matched("large blue square near the blue circle").is_empty());
        assert!(matched("circle and large blue square").is_empty());
        assert!(matched("left").is_empty());
    }

    #[test]
    fn multi_assignment_and_dedup() {
        let mut s = scene();
        s.objects[1].shape = Shape::Circle;
        s.objects[1].color = Color::Red;
        let m = match_ngrams(&s, &[g("red circle"), g("red circle")], &GrammarScorer, 0.1);
        assert_eq!(m.iter().map(|(i, _)| *i).collect::<Vec<_>>(), [0, 1]);
    }

    struct Half;
    impl Scorer for Half {
        fn score(&self, _: &Scene, _: usize, _: &[String]) -> f64 {
            0.5
        }
    }

    #[test]
    fn pluggable_scorer_uses_threshold() {
        assert_eq!(match_ngrams(&scene(), &[g("anything")], &Half, 0.1).len(), 2);
        assert!(match_ngrams(&scene(), &[g("anything")], &Half, 0.5).is_empty());
    }
}
