//! Byte-level tokenizer: 256 byte values plus BOS/EOS specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const BYTE_VOCAB: usize = 258;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decode to raw bytes, dropping special tokens.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn decode_lossy(tokens: &[u32]) -> String {
    String::from_utf8_lossy(&decode(tokens)).into_owned()
}
