use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{len_of_token, len_token, Vocab, EOS, PAD};
use crate::error::{Error, Result};
use crate::world::{attribute_caption, Attribute, BBox, Scene, MAX_CAPTION_LEN};

/// Padded token sequence length (LEN + up to 8 words + EOS, plus slack).
pub const MAX_LEN: usize = 12;

/// One training record: the image (by scene seed), a box, and the
/// length-prefixed caption `[LEN_K, w1..wK, EOS, PAD..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub scene: u64,
    pub bbox: BBox,
    pub len: usize,
    pub tokens: Vec<usize>,
}

impl Triplet {
    pub fn new(scene: u64, bbox: BBox, words: &[usize], max_len: usize) -> Result<Self> {
        let k = words.len();
        if k == 0 || k > MAX_CAPTION_LEN || k + 2 > max_len {
            return Err(Error::CaptionTooLong { words: k, max_len });
        }
        let mut tokens = Vec::with_capacity(max_len);
        tokens.push(len_token(k));
        tokens.extend_from_slice(words);
        tokens.push(EOS);
        tokens.resize(max_len, PAD);
        Ok(Self { scene, bbox, len: k, tokens })
    }

    /// Caption word ids between the length token and EOS.
    pub fn words(&self) -> &[usize] {
        &self.tokens[1..1 + self.len]
    }

    /// Checks the `[LEN_K, K words, EOS, PAD..]` layout against `vocab`.
    pub fn check(&self, vocab: &Vocab) -> std::result::Result<(), String> {
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(format!("token id {bad} >= vocabulary size {}", vocab.len()));
        }
        if len_of_token(self.tokens.first().copied().unwrap_or(PAD)) != Some(self.len) {
            return Err(format!("first token must be LEN_{}", self.len));
        }
        if self.tokens.len() < self.len + 2 {
            return Err("sequence shorter than caption".into());
        }
        if !self.words().iter().all(|&w| vocab.is_word(w)) {
            return Err("non-word token inside caption".into());
        }
        if self.tokens[self.len + 1] != EOS {
            return Err("missing EOS after caption".into());
        }
        if self.tokens[self.len + 2..].iter().any(|&t| t != PAD) {
            return Err("non-PAD token after EOS".into());
        }
        Ok(())
    }
}

/// Turns matches into triplets and, per object with probability `p_attr`,
/// adds the three attribute-form captions (`the color is red`, ...).
pub fn build_triplets(
    scene: &Scene,
    matches: &[(usize, Vec<String>)],
    vocab: &Vocab,
    max_len: usize,
    p_attr: f64,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::with_capacity(matches.len());
    for (object, words) in matches {
        let ids = vocab.tokenize(words)?;
        out.push(Triplet::new(scene.seed, scene.objects[*object].bbox(), &ids, max_len)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for object in &scene.objects {
        if rng.random::<f64>() < p_attr {
            for attribute in Attribute::ALL {
                let ids = vocab.tokenize(&attribute_caption(object, attribute))?;
                out.push(Triplet::new(scene.seed, object.bbox(), &ids, max_len)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Color, ObjectSpec, Shape, Size};

    fn scene() -> Scene {
        Scene {
            seed: 4,
            objects: vec![ObjectSpec { shape: Shape::Circle, color: Color::Red, size: Size::Small, cx: 0.2, cy: 0.5 }],
        }
    }

    #[test]
    fn construction() {
        let v = Vocab::standard();
        let m = vec![(0, vec!["red".to_string(), "circle".to_string()])];
        let t = build_triplets(&scene(), &m, &v, MAX_LEN, 0.0, 1).unwrap();
        assert_eq!(t.len(), 1);
        let expected: Vec<usize> = [len_token(2), v.id("red").unwrap(), v.id("circle").unwrap(), EOS]
            .into_iter()
            .chain(std::iter::repeat_n(PAD, 8))
            .collect();
        assert_eq!(t[0].tokens, expected);
        assert_eq!(t[0].bbox, scene().objects[0].bbox());
        t[0].check(&v).unwrap();
    }

    #[test]
    fn attribute_injection() {
        let v = Vocab::standard();
        let t = build_triplets(&scene(), &[], &v, MAX_LEN, 1.0, 1).unwrap();
        assert_eq!(t.len(), 3);
        let color = &t[0];
        assert_eq!(v.detokenize(color.words()).unwrap(), ["the", "color", "is", "red"]);
        assert_eq!(color.tokens[0], len_token(4));
        assert_eq!(color.tokens[5], EOS);
        assert!(color.tokens[6..].iter().all(|&p| p == PAD));
        assert!(t.iter().flat_map(|t| &t.tokens).all(|&id| id < v.len()));
    }

    #[test]
    fn overlong_caption_rejected() {
        let ids = vec![20; 11];
        assert!(matches!(
            Triplet::new(0, BBox::new(0.5, 0.5, 0.1, 0.1), &ids, MAX_LEN),
            Err(Error::CaptionTooLong { .. })
        ));
    }
}
