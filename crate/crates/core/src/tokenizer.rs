//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by a few specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const RECON: u32 = 258;
pub const SEP: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

/// Fixed sentinel prompt that precedes the text in the reconstruction objective.
pub const RECONSTRUCTION_PROMPT: [u32; 4] = [BOS, RECON, RECON, SEP];

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn token_len(text: &str) -> usize {
    text.len()
}

/// Specials are dropped; invalid UTF-8 is replaced.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Largest prefix of `text` with at most `max_tokens` tokens that ends on a char boundary.
pub(crate) fn prefix_within(text: &str, max_tokens: usize) -> &str {
    if text.len() <= max_tokens {
        return text;
    }
    let mut end = max_tokens;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_and_bytes() {
        assert!(encode("").is_empty());
        assert_eq!(encode("ab"), vec![97, 98]);
    }

    #[test]
    fn ascii_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let len = rng.random_range(0..64);
            let s: String = (0..len).map(|_| rng.random_range(0u8..128) as char).collect();
            let toks = encode(&s);
            assert_eq!(toks.len(), s.len());
            assert_eq!(decode(&toks), s);
        }
    }

    #[test]
    fn specials_are_skipped_on_decode() {
        assert_eq!(decode(&[BOS, 104, 105, EOS]), "hi");
    }

    #[test]
    fn prefix_respects_char_boundaries() {
        assert_eq!(prefix_within("héllo", 2), "h");
        assert_eq!(prefix_within("hello", 3), "hel");
        assert_eq!(prefix_within("hi", 3), "hi");
    }
}
