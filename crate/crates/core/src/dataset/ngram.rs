//! N-gram extraction and the three-rule filter applied before box matching.

/// Words that carry no content on their own.
pub const UNINFORMATIVE: &[&str] = &[
    "image", "photo", "picture", "and", "the", "a", "at", "near", "of", "in", "on", "is",
];
/// Words a caption should not start with.
pub const START_STOPWORDS: &[&str] = &[
    "of", "on", "in", "at", "the", "and", "a", "an", "near", "is", "to", "with",
];
/// Words a caption should not end with.
pub const END_STOPWORDS: &[&str] = &[
    "a", "an", "the", "to", "on", "at", "and", "near", "of", "in", "with", "is",
];

pub type Ngram = Vec<String>;

/// All contiguous n-grams for n = 1..=n_max, grouped by n and ordered by
/// start position within each group. Duplicates are kept.
pub fn extract_ngrams(text: &str, n_max: usize) -> Vec<Ngram> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::new();
    for n in 1..=n_max.min(words.len()) {
        for window in words.windows(n) {
            out.push(window.iter().map(|w| w.to_string()).collect());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterRule {
    Uninformative,
    BadStart,
    BadEnd,
}

/// The first rule that rejects `ngram`, if any.
pub fn rejected_by<S: AsRef<str>>(ngram: &[S]) -> Option<FilterRule> {
    let (first, last) = match (ngram.first(), ngram.last()) {
        (Some(f), Some(l)) => (f.as_ref(), l.as_ref()),
        _ => return Some(FilterRule::Uninformative),
    };
    if ngram.iter().all(|w| UNINFORMATIVE.contains(&w.as_ref())) {
        Some(FilterRule::Uninformative)
    } else if START_STOPWORDS.contains(&first) {
        Some(FilterRule::BadStart)
    } else if END_STOPWORDS.contains(&last) {
        Some(FilterRule::BadEnd)
    } else {
        None
    }
}

pub fn filter_ngrams(ngrams: Vec<Ngram>) -> Vec<Ngram> {
    ngrams.into_iter().filter(|g| rejected_by(g).is_none()).collect()
}
