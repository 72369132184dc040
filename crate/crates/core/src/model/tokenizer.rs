//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Tokenizes `text` with a leading BOS.
pub fn encode(text: &[u8]) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(text.iter().map(|&b| b as u32))
        .collect()
}

/// Drops special tokens and returns the raw bytes.
pub fn decode(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}
