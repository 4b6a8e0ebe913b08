//! Character-level tokenizer over a fixed 96-symbol vocabulary.
//!
//! Id 0 is the end-of-sequence marker; ids 1..=95 are printable ASCII
//! (space through `~`) in code-point order.

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 96;
pub const EOS: usize = 0;

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            let code = c as u32;
            if (32..=126).contains(&code) {
                Ok((code - 31) as usize)
            } else {
                Err(Error::Invalid(format!(
                    "character {c:?} is outside the tokenizer vocabulary"
                )))
            }
        })
        .collect()
}

/// Decodes ids, dropping end-of-sequence markers and unknown ids.
pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&i| i != EOS && i < VOCAB_SIZE)
        .map(|&i| char::from_u32(i as u32 + 31).unwrap_or('?'))
        .collect()
}

/// Prompt text fed to the model for a question.
pub fn prompt_text(question: &str) -> String {
    format!("Q: {question} A:")
}

/// Completion the model is trained to emit for an answer (EOS appended by
/// the caller).
pub fn completion_text(answer: &str) -> String {
    format!(" {answer}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_printable_ascii() {
        let s: String = (32u8..=126).map(char::from).collect();
        let ids = encode(&s).unwrap();
        assert_eq!(ids.len(), 95);
        assert_eq!(*ids.iter().max().unwrap(), VOCAB_SIZE - 1);
        assert!(!ids.contains(&EOS));
        assert_eq!(decode(&ids), s);
    }

    #[test]
    fn rejects_non_ascii() {
        assert!(encode("café").is_err());
        assert!(encode("a\nb").is_err());
    }

    #[test]
    fn decode_drops_eos() {
        let mut ids = encode("hi").unwrap();
        ids.push(EOS);
        assert_eq!(decode(&ids), "hi");
    }
}
