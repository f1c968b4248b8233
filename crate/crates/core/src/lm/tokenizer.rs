//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three
//! special tokens.

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn tokenize(text: &str) -> Vec<usize> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Raw bytes of the non-special ids, in order.
pub fn detokenize_bytes(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

/// Lossy UTF-8 text of the non-special ids.
pub fn detokenize(ids: &[usize]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}

pub fn is_special(id: usize) -> bool {
    (BOS..VOCAB_SIZE).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_are_dropped() {
        assert_eq!(detokenize(&[BOS, 104, 105, EOS, PAD]), "hi");
        assert!(is_special(EOS) && !is_special(255) && !is_special(VOCAB_SIZE));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            prop_assert_eq!(detokenize_bytes(&tokenize_bytes(&bytes)), bytes);
        }

        #[test]
        fn text_round_trip(s in ".{0,32}") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}
