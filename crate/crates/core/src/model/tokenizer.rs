//! Byte-level tokenizer: ids 0..256 are raw bytes, followed by two specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Raw bytes of `ids`, skipping special tokens.
pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

/// Text of `ids`; invalid UTF-8 (possible from generation) is replaced.
pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}

/// `[BOS] + bytes(prompt)`, the conditioning sequence fed to the model.
pub fn encode_prompt(prompt: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(prompt.len() + 1);
    ids.push(BOS);
    ids.extend(tokenize(prompt));
    ids
}
