use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]"];

/// Word-level vocabulary. Ids `0..4` are reserved for PAD, UNK, BOS and EOS;
/// ordinary tokens follow contiguously in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from distinct tokens; duplicates are rejected so
    /// the mapping stays a bijection.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self::new();
        for t in tokens {
            let t = t.as_ref();
            if vocab.index.contains_key(t) {
                return Err(Error::data(format!("duplicate vocabulary token {t:?}")));
            }
            vocab.insert(t)?;
        }
        Ok(vocab)
    }

    /// Collects every lowercased whitespace token of `texts`, first-seen order.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab = Self::new();
        for text in texts {
            for word in text.split_whitespace() {
                let word = word.to_lowercase();
                if !vocab.index.contains_key(&word) {
                    vocab.insert(&word).expect("whitespace-free token");
                }
            }
        }
        vocab
    }

    /// Adds `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> Result<usize> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::data(format!("invalid vocabulary token {token:?}")));
        }
        if let Some(&id) = self.index.get(token) {
            return Ok(id);
        }
        let id = RESERVED + self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        Ok(id)
    }

    /// Total id space, reserved ids included.
    pub fn len(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < RESERVED {
            Some(RESERVED_NAMES[id])
        } else {
            self.tokens.get(id - RESERVED).map(String::as_str)
        }
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line `i` holds id `i + 4`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Lowercases and whitespace-splits `text` after cutting it to
/// `max_sentence_length` characters, maps words to ids (unknown words to
/// UNK), wraps the result in BOS/EOS and truncates to `max_tokens_length`
/// ids in total.
pub fn tokenize(
    text: &str,
    vocab: &Vocabulary,
    max_sentence_length: usize,
    max_tokens_length: usize,
) -> Result<Vec<usize>> {
    if max_tokens_length < 3 {
        return Err(Error::Argument(
            "max_tokens_length must leave room for BOS, EOS and one word".into(),
        ));
    }
    let cut: String = text.chars().take(max_sentence_length).collect();
    let lowered = cut.to_lowercase();
    let words: Vec<&str> = lowered.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::EmptyInput);
    }
    let budget = max_tokens_length - 2;
    let mut ids = Vec::with_capacity(words.len().min(budget) + 2);
    ids.push(BOS);
    ids.extend(words.iter().take(budget).map(|w| vocab.id(w)));
    ids.push(EOS);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snli_vocab() -> Vocabulary {
        Vocabulary::from_texts(["A soccer game with multiple males playing"])
    }

    #[test]
    fn reserved_ids_come_first() {
        let v = snli_vocab();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.len(), 4 + 7);
        assert_eq!(v.token(PAD), Some("[PAD]"));
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.id("unseen"), UNK);
    }

    #[test]
    fn snli_premise_tokenizes_to_seven_words() {
        let v = snli_vocab();
        let ids = tokenize("A soccer game with multiple males playing", &v, 256, 128).unwrap();
        assert_eq!(ids.len(), 9);
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[8], EOS);
        assert!(ids[1..8].iter().all(|&i| i >= RESERVED));
    }

    #[test]
    fn empty_text_is_rejected() {
        let v = snli_vocab();
        assert!(matches!(tokenize("", &v, 256, 128), Err(Error::EmptyInput)));
        assert!(matches!(
            tokenize(" \t\n ", &v, 256, 128),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn long_text_truncates_to_token_bound() {
        let v = snli_vocab();
        let text = vec!["game"; 500].join(" ");
        let ids = tokenize(&text, &v, usize::MAX, 128).unwrap();
        assert_eq!(ids.len(), 128);
        assert_eq!(ids[127], EOS);
        // the character bound applies first
        let ids = tokenize(&text, &v, 256, 128).unwrap();
        assert!(ids.len() <= 128);
        let ids = tokenize("soccer game", &v, 6, 128).unwrap();
        assert_eq!(ids, vec![BOS, v.id("soccer"), EOS]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = snli_vocab();
        let ids = tokenize("A cat", &v, 256, 128).unwrap();
        assert_eq!(ids, vec![BOS, v.id("a"), UNK, EOS]);
    }

    #[test]
    fn text_round_trip() {
        let v = snli_vocab();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::from_text("a\nb\na\n").is_err());
    }
}
