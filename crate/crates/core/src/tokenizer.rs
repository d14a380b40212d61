//! Hash tokenizer: lowercase, whitespace split, FNV-1a into the vocabulary.

use vlmir_data::fnv1a64;

pub const PAD_ID: u32 = 0;
pub const BOT_ID: u32 = 1;
pub const EOT_ID: u32 = 2;
pub const FIRST_WORD_ID: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// Exactly `context_length` ids; positions past `length` hold [`PAD_ID`].
    pub ids: Vec<u32>,
    /// Count of real tokens, sentinels included.
    pub length: usize,
}

impl TokenSequence {
    /// Position of the end-of-text token.
    pub fn eot_position(&self) -> usize {
        self.length - 1
    }
}

pub fn word_id(word: &str, vocab_size: usize) -> u32 {
    let span = vocab_size as u64 - FIRST_WORD_ID as u64;
    FIRST_WORD_ID + (fnv1a64(word.as_bytes()) % span) as u32
}

/// `context_length` must be at least 2 and `vocab_size` larger than the
/// sentinel range; [`crate::EncoderConfig::validate`] enforces both.
/// Long texts are truncated so the end-of-text token stays last.
pub fn tokenize(text: &str, context_length: usize, vocab_size: usize) -> TokenSequence {
    let lower = text.to_lowercase();
    let mut ids = Vec::with_capacity(context_length);
    ids.push(BOT_ID);
    ids.extend(
        lower
            .split_whitespace()
            .take(context_length - 2)
            .map(|w| word_id(w, vocab_size)),
    );
    ids.push(EOT_ID);
    let length = ids.len();
    ids.resize(context_length, PAD_ID);
    TokenSequence { ids, length }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_sentinels_only() {
        let t = tokenize("", 8, 4096);
        assert_eq!(t.ids, vec![BOT_ID, EOT_ID, 0, 0, 0, 0, 0, 0]);
        assert_eq!(t.length, 2);
    }

    #[test]
    fn deterministic_and_case_insensitive() {
        assert_eq!(tokenize("a photo", 32, 4096), tokenize("a photo", 32, 4096));
        assert_eq!(tokenize("A  Photo", 32, 4096), tokenize("a photo", 32, 4096));
    }

    #[test]
    fn hundred_words_fill_context() {
        let text = vec!["word"; 100].join(" ");
        let t = tokenize(&text, 32, 4096);
        assert_eq!(t.length, 32);
        assert_eq!(t.ids[31], EOT_ID);
    }

    proptest! {
        #[test]
        fn ids_in_range(text in ".{0,400}", ctx in 2usize..64, vocab in 4usize..10_000) {
            let t = tokenize(&text, ctx, vocab);
            prop_assert_eq!(t.ids.len(), ctx);
            prop_assert!(t.length >= 2 && t.length <= ctx);
            prop_assert!(t.ids.iter().all(|&i| (i as usize) < vocab));
            prop_assert_eq!(t.ids[0], BOT_ID);
            prop_assert_eq!(t.ids[t.length - 1], EOT_ID);
            prop_assert!(t.ids[t.length..].iter().all(|&i| i == PAD_ID));
            prop_assert!(t.ids[1..t.length - 1].iter().all(|&i| i >= FIRST_WORD_ID));
        }
    }
}
