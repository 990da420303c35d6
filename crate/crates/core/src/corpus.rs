//! Seeded synthetic text for benchmarks and probes.

use crate::rng::SeededRng;
use crate::tokenizer;

const WORDS: &[&str] = &[
    "the", "model", "draft", "layer", "token", "of", "and", "a", "cache", "runs", "fast", "in", "parallel",
    "verify", "accept", "to", "with", "tree", "bonus", "state", "is", "on",
];

/// `bytes` bytes of space-separated words with occasional periods.
pub fn synthetic_text(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(bytes + 16);
    while out.len() < bytes {
        out.extend(WORDS[(rng.next_u64() % WORDS.len() as u64) as usize].bytes());
        out.push(if rng.next_u64() % 9 == 0 { b'.' } else { b' ' });
    }
    out.truncate(bytes);
    out
}

/// `count` BOS-prefixed prompts of `len` bytes, taken every 64 bytes of the
/// synthetic text (or every `len` bytes when prompts are longer).
pub fn synthetic_prompts(count: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let stride = len.max(64);
    let text = synthetic_text(count * stride, seed);
    (0..count).map(|p| tokenizer::encode(&text[p * stride..p * stride + len], true)).collect()
}

/// Splits text into BOS-prefixed sequences of at most `chunk` bytes.
pub fn chunked(text: &[u8], chunk: usize) -> Vec<Vec<u32>> {
    text.chunks(chunk.max(1)).map(|c| tokenizer::encode(c, true)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        assert_eq!(synthetic_text(4096, 1), synthetic_text(4096, 1));
        assert_ne!(synthetic_text(64, 1), synthetic_text(64, 2));
        assert_eq!(synthetic_text(4096, 1).len(), 4096);
        let p = synthetic_prompts(64, 24, 2);
        assert_eq!(p.len(), 64);
        assert!(p.iter().all(|s| s.len() == 25 && s[0] == tokenizer::BOS));
        assert_eq!(chunked(&synthetic_text(4096, 1), 256).len(), 16);
    }
}
