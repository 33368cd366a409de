//! Whitespace tokenizer with a corpus-built vocabulary.
//!
//! Ids 0..=4 are reserved specials; corpus tokens are sorted lexicographically
//! before id assignment so the vocabulary depends only on the token set, not
//! the corpus order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<sep>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Tokenizer {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for tok in text.split_whitespace() {
                if !SPECIALS.contains(&tok) {
                    words.insert(tok.to_string());
                }
            }
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(words);
        let ids = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Tokenizer { vocab, ids }
    }

    /// Rebuilds a tokenizer from a stored vocabulary (checkpoint load).
    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let ids = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Tokenizer { vocab, ids }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    /// Plain whitespace encoding with unknowns mapped to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id_of(t)).collect()
    }

    /// `<s> tokens </s>` for a single text (captions).
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let mut ids = alloc::vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// `<s> turn1 <sep> turn2 ... </s>` for a dialogue context.
    pub fn encode_turns(&self, turns: &[String]) -> Vec<u32> {
        let mut ids = alloc::vec![BOS];
        for (i, turn) in turns.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            ids.extend(self.encode(turn));
        }
        ids.push(EOS);
        ids
    }

    /// Space-joined tokens, skipping specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> =
            ids.iter().filter(|&&i| i > UNK).map(|&i| self.token_of(i)).collect();
        words.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let tok = Tokenizer::from_texts(["a red square"]);
        assert_eq!(tok.id_of("<pad>"), PAD);
        assert_eq!(tok.id_of("<s>"), BOS);
        assert_eq!(tok.id_of("</s>"), EOS);
        assert_eq!(tok.id_of("<sep>"), SEP);
        assert_eq!(tok.id_of("<unk>"), UNK);
    }

    #[test]
    fn vocabulary_is_order_independent() {
        let a = Tokenizer::from_texts(["b a", "c"]);
        let b = Tokenizer::from_texts(["c", "a b"]);
        assert_eq!(a.vocab(), b.vocab());
    }

    #[test]
    fn unknowns_map_to_unk() {
        let tok = Tokenizer::from_texts(["a red square"]);
        let ids = tok.encode("a blue square");
        assert_eq!(ids[1], UNK);
        assert_eq!(ids[0], tok.id_of("a"));
    }

    #[test]
    fn encode_decode_roundtrip_for_known_text() {
        let tok = Tokenizer::from_texts(["it is a red square ."]);
        let ids = tok.encode_text("a red square .");
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(tok.decode(&ids), "a red square .");
    }

    #[test]
    fn turns_joined_with_sep() {
        let tok = Tokenizer::from_texts(["look what is it"]);
        let ids = tok.encode_turns(&["look".into(), "what is it".into()]);
        assert_eq!(ids[2], SEP);
    }
}
