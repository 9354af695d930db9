//! Text records, address augmentation, the hashing tokenizer and hashed
//! bag-of-tokens features.

use std::hash::Hasher;

use fnv::FnvHasher;

/// Fixed token sequence length.
pub const MAX_TOKENS: usize = 77;
/// Token ids live in `[1, VOCAB_SIZE]`; 0 is padding.
pub const VOCAB_SIZE: u64 = 30_000;
pub const TEXT_BUCKETS: usize = 512;
pub const LOCATION_PREFIX: &str = "The location of the sound is:";

/// Title, description and optional reverse-geocoded address of a sample.
/// Constructors collapse whitespace runs to single spaces and trim.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextRecord {
    pub title: String,
    pub description: String,
    pub address: Option<String>,
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl TextRecord {
    pub fn new(title: &str, description: &str, address: Option<&str>) -> Self {
        Self {
            title: normalize_whitespace(title),
            description: normalize_whitespace(description),
            address: address.map(normalize_whitespace).filter(|a| !a.is_empty()),
        }
    }
}

/// `"<title>. <description>"`, followed by
/// `"The location of the sound is: <address>."` when an address is known.
/// Empty parts are skipped.
pub fn augment_text_with_address(record: &TextRecord) -> String {
    let base = match (record.title.is_empty(), record.description.is_empty()) {
        (true, true) => String::new(),
        (false, true) => record.title.clone(),
        (true, false) => record.description.clone(),
        (false, false) => format!("{}. {}", record.title, record.description),
    };
    match &record.address {
        None => base,
        Some(addr) => {
            let addr = addr.trim_end_matches('.');
            let sentence = format!("{LOCATION_PREFIX} {addr}.");
            if base.is_empty() {
                sentence
            } else {
                format!("{base} {sentence}")
            }
        }
    }
}

/// Exactly [`MAX_TOKENS`] ids; everything from `attention_len` on is 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: [u32; MAX_TOKENS],
    pub attention_len: usize,
}

pub fn token_id(token: &str) -> u32 {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    (h.finish() % VOCAB_SIZE) as u32 + 1
}

/// Lowercases, splits on anything that is not alphanumeric, hashes each
/// token with FNV-1a into `[1, 30000]`, and truncates or zero-pads to 77.
pub fn tokenize(text: &str) -> TokenSequence {
    let lower = text.to_lowercase();
    let mut ids = [0u32; MAX_TOKENS];
    let mut n = 0;
    for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        if n == MAX_TOKENS {
            break;
        }
        ids[n] = token_id(tok);
        n += 1;
    }
    TokenSequence {
        ids,
        attention_len: n,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub values: Vec<f64>,
    /// Set when the sequence had no tokens; `values` is then all zeros.
    pub empty: bool,
}

/// Signed hashed bag of tokens: id `t` adds `(-1)^(t mod 2)` to bucket
/// `t mod 512`; the result is l2-normalized unless it is all zero.
pub fn text_feature_vector(tokens: &TokenSequence) -> TextFeatures {
    let mut values = vec![0.0; TEXT_BUCKETS];
    for &id in &tokens.ids[..tokens.attention_len] {
        let sign = if id % 2 == 0 { 1.0 } else { -1.0 };
        values[id as usize % TEXT_BUCKETS] += sign;
    }
    let norm = crate::embedding::l2_norm(&values);
    if norm == 0.0 {
        return TextFeatures { values, empty: true };
    }
    for v in &mut values {
        *v /= norm;
    }
    TextFeatures {
        values,
        empty: false,
    }
}

/// Featurizes free text (a prompt or an augmented record).
pub fn featurize_text(text: &str) -> TextFeatures {
    text_feature_vector(&tokenize(text))
}
