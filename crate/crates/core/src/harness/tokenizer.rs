//! Byte-level tokenizer: ids `0..=255` are raw bytes, followed by BOS and EOS.

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

/// `[BOS, bytes.., EOS]`.
pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(bytes.len() + 2);
    ids.push(BOS);
    ids.extend(bytes.iter().map(|&b| b as usize));
    ids.push(EOS);
    ids
}

/// Drops BOS/EOS and any id outside the byte range.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect()
}
