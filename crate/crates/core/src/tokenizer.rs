//! Byte-level tokenizer: token `b` is byte `b`, plus BOS and EOS.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

/// Encodes bytes, optionally prefixed with BOS.
pub fn encode(bytes: &[u8], bos: bool) -> Vec<u32> {
    let mut out = Vec::with_capacity(bytes.len() + 1);
    if bos {
        out.push(BOS);
    }
    out.extend(bytes.iter().map(|&b| b as u32));
    out
}

/// Decodes tokens back to bytes, dropping special tokens.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}
