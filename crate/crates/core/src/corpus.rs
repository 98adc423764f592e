//! Bundled text corpus and byte-level tokenization.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const TRAIN_PARTS: [&str; 5] = [
    include_str!("../data/train_a.txt"),
    include_str!("../data/train_b.txt"),
    include_str!("../data/train_c.txt"),
    include_str!("../data/train_d.txt"),
    include_str!("../data/train_e.txt"),
];
const HELDOUT: &str = include_str!("../data/heldout.txt");

pub const VOCAB: usize = 256;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn train_tokens() -> Vec<u32> {
    tokenize(&TRAIN_PARTS.join("\n"))
}

pub fn heldout_tokens() -> Vec<u32> {
    tokenize(HELDOUT)
}

/// Reads a little-endian `u32` token file (no header).
pub fn read_token_file(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: token file length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_token_file(path: &Path, tokens: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a corpus: `.tok` files are token ids, anything else is UTF-8 text.
pub fn load(path: &Path) -> Result<Vec<u32>> {
    if path.extension().is_some_and(|e| e == "tok") {
        read_token_file(path)
    } else {
        let text = fs::read_to_string(path)?;
        Ok(tokenize(&text))
    }
}

/// Sentence-final prediction items: for each sentence of at least
/// `min_context` bytes, the context up to its last character and that
/// character as the target. Sentences end at `.`, `!` or `?`.
pub fn last_token_items(tokens: &[u32], min_context: usize) -> Vec<(Vec<u32>, u32)> {
    let mut items = Vec::new();
    let mut start = 0;
    for (i, &t) in tokens.iter().enumerate() {
        if matches!(t, 46 | 33 | 63) {
            // predict the last character before the terminator
            if i >= start + min_context + 1 {
                items.push((tokens[start..i - 1].to_vec(), tokens[i - 1]));
            }
            start = i + 1;
        }
    }
    items
}
