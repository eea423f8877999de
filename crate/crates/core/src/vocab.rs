//! Fixed symbol table shared by the data generator, decoder and CLI.

pub type TokenId = u32;

pub const SYMBOLS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", "what", "color", "shape", "is", "the", "?", "one", "red", "green",
    "blue", "yellow", "cyan", "magenta", "white", "orange", "square", "wide", "tall",
];

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const WHAT: TokenId = 3;
pub const COLOR: TokenId = 4;
pub const SHAPE: TokenId = 5;
pub const IS: TokenId = 6;
pub const THE: TokenId = 7;
pub const QUESTION_MARK: TokenId = 8;
pub const ONE: TokenId = 9;
pub const FIRST_COLOR: TokenId = 10;
pub const NUM_COLORS: usize = 8;
pub const FIRST_SHAPE: TokenId = 18;
pub const NUM_SHAPES: usize = 3;

/// Smallest vocabulary that covers every symbol.
pub const MIN_VOCAB: usize = SYMBOLS.len();

pub fn symbol(id: TokenId) -> &'static str {
    SYMBOLS.get(id as usize).copied().unwrap_or("<unk>")
}

pub fn lookup(word: &str) -> Option<TokenId> {
    SYMBOLS.iter().position(|s| *s == word).map(|i| i as TokenId)
}

/// Splits on whitespace (and a trailing `?`) and maps each word to its id.
pub fn encode(text: &str) -> Option<alloc::vec::Vec<TokenId>> {
    let mut out = alloc::vec![BOS];
    for word in text.split_whitespace() {
        let (w, q) = match word.strip_suffix('?') {
            Some(w) => (w, true),
            None => (word, false),
        };
        if !w.is_empty() {
            out.push(lookup(&w.to_ascii_lowercase())?);
        }
        if q {
            out.push(QUESTION_MARK);
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        assert_eq!(symbol(FIRST_COLOR), "red");
        assert_eq!(symbol(FIRST_COLOR + NUM_COLORS as u32 - 1), "orange");
        assert_eq!(symbol(FIRST_SHAPE), "square");
        assert_eq!(MIN_VOCAB, FIRST_SHAPE as usize + NUM_SHAPES);
        const { assert!(MIN_VOCAB <= 64) };
    }

    #[test]
    fn encode_question() {
        assert_eq!(
            encode("What color is the square?").unwrap(),
            alloc::vec![BOS, WHAT, COLOR, IS, THE, FIRST_SHAPE, QUESTION_MARK]
        );
        assert!(encode("what colour").is_none());
    }
}
