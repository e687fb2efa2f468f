//! Bag-of-hashed-tokens featurizer for raw text pairs.
//!
//! Tokens are maximal runs of Unicode alphanumeric characters, lowercased.
//! Each token is hashed with 64-bit FNV-1a over its UTF-8 bytes (offset basis
//! `0xcbf29ce484222325`, prime `0x100000001b3`) and counted in bucket
//! `hash % 256`. Counts are divided by the token count (mean pooling), so an
//! empty text maps to the zero vector. A premise/hypothesis pair is the
//! concatenation of the two 256-dim bags.

pub const BAG_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn bag_of_hashed_tokens(text: &str) -> Vec<f64> {
    let mut bag = vec![0.0; BAG_DIM];
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return bag;
    }
    for t in &tokens {
        bag[(fnv1a64(t.as_bytes()) % BAG_DIM as u64) as usize] += 1.0;
    }
    let n = tokens.len() as f64;
    for v in &mut bag {
        *v /= n;
    }
    bag
}

pub fn featurize_pair(premise: &str, hypothesis: &str) -> Vec<f64> {
    let mut v = bag_of_hashed_tokens(premise);
    v.extend(bag_of_hashed_tokens(hypothesis));
    v
}
