use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NliExample, ParallelPair};
use crate::error::{Error, Result};

/// Injective word substitution defining a synthetic target language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherSpec {
    pub seed: u64,
    forward: BTreeMap<String, String>,
    inverse: HashMap<String, String>,
    /// Unmapped words pass through unchanged instead of raising a coverage
    /// error.
    pub passthrough: bool,
}

const CIPHER_WORD_LEN: usize = 6;

impl CipherSpec {
    /// Builds a spec from an explicit map, rejecting non-injective maps.
    pub fn from_map(seed: u64, map: BTreeMap<String, String>) -> Result<Self> {
        let mut inverse = HashMap::with_capacity(map.len());
        for (src, dst) in &map {
            if src.is_empty()
                || dst.is_empty()
                || src.contains(char::is_whitespace)
                || dst.contains(char::is_whitespace)
            {
                return Err(Error::data(format!(
                    "invalid cipher entry {src:?} -> {dst:?}"
                )));
            }
            if let Some(prev) = inverse.insert(dst.clone(), src.clone()) {
                return Err(Error::data(format!(
                    "cipher is not injective: {prev:?} and {src:?} both map to {dst:?}"
                )));
            }
        }
        Ok(Self {
            seed,
            forward: map,
            inverse,
            passthrough: false,
        })
    }

    pub fn identity<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        Self::from_map(
            0,
            words
                .into_iter()
                .map(|w| (w.to_string(), w.to_string()))
                .collect(),
        )
    }

    /// Maps each word to a fresh lowercase string that is neither a source
    /// word nor another cipher word.
    pub fn generate<'a>(seed: u64, words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let words: Vec<&str> = words.into_iter().collect();
        let mut taken: BTreeSet<String> = words.iter().map(|w| w.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for w in words {
            if map.contains_key(w) {
                continue;
            }
            let cipher = loop {
                let candidate: String = (0..CIPHER_WORD_LEN)
                    .map(|_| char::from(b'a' + rng.random_range(0..26u8)))
                    .collect();
                if taken.insert(candidate.clone()) {
                    break candidate;
                }
            };
            map.insert(w.to_string(), cipher);
        }
        Self::from_map(seed, map)
    }

    pub fn with_passthrough(mut self, passthrough: bool) -> Self {
        self.passthrough = passthrough;
        self
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.forward
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn word(&self, w: &str) -> Option<&str> {
        self.forward.get(w).map(String::as_str)
    }

    /// Cipher-side vocabulary.
    pub fn cipher_words(&self) -> impl Iterator<Item = &str> {
        self.forward.values().map(String::as_str)
    }

    fn substitute(&self, text: &str, table: &dyn Fn(&str) -> Option<String>) -> Result<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match table(word) {
                Some(w) => out.push(w),
                None if self.passthrough => out.push(word.to_string()),
                None => return Err(Error::Coverage(word.to_string())),
            }
        }
        Ok(out.join(" "))
    }

    /// Word-wise substitution; the output is single-space joined.
    pub fn apply(&self, text: &str) -> Result<String> {
        self.substitute(text, &|w| self.forward.get(w).cloned())
    }

    pub fn decipher(&self, text: &str) -> Result<String> {
        self.substitute(text, &|w| self.inverse.get(w).cloned())
    }

    /// Pairs each sentence with its ciphered form.
    pub fn parallel_corpus<S: AsRef<str>>(&self, sentences: &[S]) -> Result<Vec<ParallelPair>> {
        sentences
            .iter()
            .map(|s| ParallelPair::new(s.as_ref(), self.apply(s.as_ref())?))
            .collect()
    }

    /// Two-column map file: source word, cipher word.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = format!("#seed\t{}\n", self.seed);
        for (src, dst) in &self.forward {
            text.push_str(&format!("{src}\t{dst}\n"));
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut seed = 0;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| err("expected 2 columns".into()))?;
            if a == "#seed" {
                seed = b.parse().map_err(|e| err(format!("bad seed: {e}")))?;
                continue;
            }
            if map.insert(a.to_string(), b.to_string()).is_some() {
                return Err(err(format!("duplicate source word {a:?}")));
            }
        }
        Self::from_map(seed, map)
    }
}

/// A ciphered NLI dataset and the parallel sentences it was built from.
#[derive(Clone, Debug)]
pub struct CipheredNli {
    pub examples: Vec<NliExample>,
    pub pairs: Vec<ParallelPair>,
}

/// Ciphers premise and hypothesis of every example; labels are kept. The
/// parallel pairs list premise then hypothesis for each example in order.
pub fn apply_cipher(dataset: &[NliExample], spec: &CipherSpec) -> Result<CipheredNli> {
    let mut examples = Vec::with_capacity(dataset.len());
    let mut pairs = Vec::with_capacity(2 * dataset.len());
    for ex in dataset {
        let premise = spec.apply(&ex.premise)?;
        let hypothesis = spec.apply(&ex.hypothesis)?;
        pairs.push(ParallelPair::new(ex.premise.clone(), premise.clone())?);
        pairs.push(ParallelPair::new(
            ex.hypothesis.clone(),
            hypothesis.clone(),
        )?);
        examples.push(NliExample::new(premise, hypothesis, ex.label));
    }
    Ok(CipheredNli { examples, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_nli, NliLabel, LEXICON};

    fn abc() -> CipherSpec {
        let map = [("a", "x"), ("b", "y"), ("c", "z")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        CipherSpec::from_map(0, map).unwrap()
    }

    #[test]
    fn applies_word_map() {
        assert_eq!(abc().apply("a b c").unwrap(), "x y z");
        assert_eq!(abc().decipher("x y z").unwrap(), "a b c");
    }

    #[test]
    fn unmapped_word_needs_passthrough() {
        assert!(matches!(abc().apply("a d"), Err(Error::Coverage(w)) if w == "d"));
        assert_eq!(abc().with_passthrough(true).apply("a d").unwrap(), "x d");
    }

    #[test]
    fn rejects_non_injective_map() {
        let map = [("a", "x"), ("b", "x")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        assert!(CipherSpec::from_map(0, map).is_err());
    }

    #[test]
    fn generated_cipher_is_disjoint_and_deterministic() {
        let words = LEXICON.words();
        let spec = CipherSpec::generate(9, words.iter().copied()).unwrap();
        assert_eq!(
            spec,
            CipherSpec::generate(9, words.iter().copied()).unwrap()
        );
        assert_eq!(spec.len(), words.len());
        for c in spec.cipher_words() {
            assert!(!words.contains(&c));
        }
    }

    #[test]
    fn identity_cipher_keeps_text() {
        let words = LEXICON.words();
        let spec = CipherSpec::identity(words.iter().copied()).unwrap();
        let data = gen_synthetic_nli(1, 30, 10).unwrap();
        let out = apply_cipher(&data, &spec).unwrap();
        assert_eq!(out.examples, data);
        assert!(out.pairs.iter().all(|p| p.source == p.target));
    }

    #[test]
    fn dataset_cipher_keeps_labels_and_lengths() {
        let words = LEXICON.words();
        let spec = CipherSpec::generate(2, words.iter().copied()).unwrap();
        let data = gen_synthetic_nli(1, 30, 10).unwrap();
        let out = apply_cipher(&data, &spec).unwrap();
        assert_eq!(out.pairs.len(), 60);
        for (a, b) in data.iter().zip(&out.examples) {
            assert_eq!(a.label, b.label);
            assert_eq!(
                a.premise.split_whitespace().count(),
                b.premise.split_whitespace().count()
            );
            assert_eq!(spec.decipher(&b.hypothesis).unwrap(), a.hypothesis);
        }
        assert_eq!(
            out.examples
                .iter()
                .filter(|e| e.label == NliLabel::Neutral)
                .count(),
            10
        );
    }

    #[test]
    fn map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CipherSpec::generate(5, ["a", "b", "c"]).unwrap();
        spec.save(dir.path().join("c.tsv")).unwrap();
        assert_eq!(CipherSpec::load(dir.path().join("c.tsv")).unwrap(), spec);
    }
}
