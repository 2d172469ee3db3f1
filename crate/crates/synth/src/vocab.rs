//! Fixed word-id vocabulary shared by every dialect.

use crate::error::{Result, SynthError};

/// Id 0 is reserved for the start token the text encoder prepends.
pub const START: &str = "<start>";

pub const WORDS: [&str; 27] = [
    START, "the", "object", "circle", "square", "triangle", "red", "green", "blue", "yellow",
    "purple", "orange", "cyan", "pink", "small", "large", "on", "at", "in", "left", "right", "top",
    "bottom", "middle", "of", "above", "below",
];

/// Words that describe absolute or relative position.
pub const SPATIAL_LEXICON: [&str; 7] =
    ["left", "right", "top", "bottom", "middle", "above", "below"];

pub fn vocab_size() -> usize {
    WORDS.len()
}

pub fn word_id(w: &str) -> Option<usize> {
    WORDS.iter().position(|&v| v == w)
}

pub fn encode(words: &[String]) -> Result<Vec<usize>> {
    words
        .iter()
        .map(|w| {
            word_id(w).ok_or_else(|| SynthError::Parse {
                text: words.join(" "),
                msg: format!("word {w:?} is not in the vocabulary"),
            })
        })
        .collect()
}
