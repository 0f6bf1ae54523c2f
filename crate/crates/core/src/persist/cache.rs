use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::checkpoint::{write_atomic, Reader};
use crate::encoder::{text_hash, SentenceEmbedding, SentenceEncoder};
use crate::error::{Error, Result};
use crate::head::{combine_features, HeadWeights, NliPrediction, PairClassifier};
use crate::par::{self, Execution};

pub const CACHE_MAGIC: [u8; 8] = *b"KDNLICAC";
pub const CACHE_VERSION: u32 = 1;

/// Sentence embeddings keyed by text, tied to the checkpoint that produced
/// them. Values are stored at full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    checkpoint_id: String,
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new(checkpoint_id: impl Into<String>, dim: usize) -> Self {
        Self {
            checkpoint_id: checkpoint_id.into(),
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.entries.contains_key(text)
    }

    pub fn get(&self, text: &str) -> Option<SentenceEmbedding> {
        self.entries.get(text).map(|v| SentenceEmbedding {
            vector: v.clone(),
            source_text_hash: text_hash(text),
        })
    }

    pub fn insert(&mut self, text: &str, embedding: &SentenceEmbedding) -> Result<()> {
        if embedding.dim() != self.dim {
            return Err(Error::shape(format!(
                "embedding dim {} in a cache of dim {}",
                embedding.dim(),
                self.dim
            )));
        }
        self.entries
            .insert(text.to_string(), embedding.vector.clone());
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.checkpoint_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.checkpoint_id.as_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (text, v) in &self.entries {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
            out.extend_from_slice(&text_hash(text).to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let bad = |what: &str| Error::Format(format!("embedding cache: {what}"));
        if r.take(8).map_err(|_| bad("too short"))? != CACHE_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = r.u32().map_err(|_| bad("missing version"))?;
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let checkpoint_id = r.string().map_err(|_| bad("truncated checkpoint id"))?;
        let dim = r.u32().map_err(|_| bad("truncated header"))? as usize;
        let count = r.u32().map_err(|_| bad("truncated header"))?;
        let mut entries = BTreeMap::new();
        for i in 0..count {
            let integrity = |message: &str| Error::Integrity {
                tensor: format!("cache entry {i}"),
                message: message.into(),
            };
            let text = r.string().map_err(|_| integrity("truncated key"))?;
            let hash = r.u64().map_err(|_| integrity("truncated key hash"))?;
            if hash != text_hash(&text) {
                return Err(integrity("key hash mismatch"));
            }
            let raw = r.take(dim * 8).map_err(|_| integrity("truncated vector"))?;
            let v = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(text, v);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            checkpoint_id,
            dim,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    /// Loads a cache and checks it was built for `expected_checkpoint_id`.
    pub fn load(path: impl AsRef<Path>, expected_checkpoint_id: &str) -> Result<Self> {
        let cache = Self::from_bytes(&fs::read(path)?)?;
        if cache.checkpoint_id != expected_checkpoint_id {
            return Err(Error::StaleCache {
                expected: expected_checkpoint_id.to_string(),
                found: cache.checkpoint_id,
            });
        }
        Ok(cache)
    }
}

/// Embeds every text missing from `cache`; returns how many were encoded.
pub fn embed_corpus<E: SentenceEncoder + ?Sized, S: AsRef<str> + Sync>(
    texts: &[S],
    encoder: &E,
    cache: &mut EmbeddingCache,
    exec: Execution,
) -> Result<usize> {
    if encoder.dim() != cache.dim() {
        return Err(Error::shape("encoder and cache dimensions differ"));
    }
    let mut missing: Vec<&str> = texts
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| !cache.contains(t))
        .collect();
    missing.sort_unstable();
    missing.dedup();
    let embedded = par::try_map(exec, &missing, |t| encoder.embed(t))?;
    for (t, e) in missing.iter().zip(&embedded) {
        cache.insert(t, e)?;
    }
    Ok(missing.len())
}

/// Serves embeddings from a cache only; a miss is an error.
pub struct CachedEncoder<'a> {
    cache: &'a EmbeddingCache,
}

impl<'a> CachedEncoder<'a> {
    pub fn new(cache: &'a EmbeddingCache) -> Self {
        Self { cache }
    }
}

impl SentenceEncoder for CachedEncoder<'_> {
    fn embed(&self, text: &str) -> Result<SentenceEmbedding> {
        self.cache
            .get(text)
            .ok_or_else(|| Error::data(format!("{text:?} is not in the embedding cache")))
    }

    fn dim(&self) -> usize {
        self.cache.dim()
    }
}

/// Counts calls to the wrapped encoder.
pub struct CountingEncoder<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E: SentenceEncoder> CountingEncoder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<E: SentenceEncoder> SentenceEncoder for CountingEncoder<E> {
    fn embed(&self, text: &str) -> Result<SentenceEmbedding> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(text)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

/// Head applied to embeddings from any encoder, typically a cache.
pub struct SplitClassifier<'a, E: ?Sized> {
    pub encoder: &'a E,
    pub head: &'a HeadWeights,
}

impl<E: SentenceEncoder + ?Sized> PairClassifier for SplitClassifier<'_, E> {
    fn predict_pair(&self, premise: &str, hypothesis: &str) -> Result<NliPrediction> {
        let u = self.encoder.embed(premise)?;
        let v = self.encoder.embed(hypothesis)?;
        self.head.classify(&combine_features(&u, &v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig, Vocabulary};

    fn encoder() -> Encoder {
        let vocab = Vocabulary::from_texts(["a man is running", "the dog sleeps"]);
        let config = EncoderConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            ..Default::default()
        };
        Encoder::new(config, vocab, 1).unwrap()
    }

    #[test]
    fn incremental_fill_and_hits() {
        let enc = CountingEncoder::new(encoder());
        let mut cache = EmbeddingCache::new("id", 8);
        let texts = ["a man", "the dog", "a man"];
        assert_eq!(
            embed_corpus(&texts, &enc, &mut cache, Execution::Parallel).unwrap(),
            2
        );
        assert_eq!(enc.calls(), 2);
        assert_eq!(
            embed_corpus(
                &["the dog", "is running"],
                &enc,
                &mut cache,
                Execution::Sequential
            )
            .unwrap(),
            1
        );
        assert_eq!(enc.calls(), 3);
        let fresh = encoder().encode_text("a man").unwrap();
        assert_eq!(cache.get("a man").unwrap(), fresh);
        assert!(CachedEncoder::new(&cache).embed("unseen").is_err());
    }

    #[test]
    fn file_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut cache = EmbeddingCache::new("abc", 8);
        embed_corpus(
            &["a man", "the dog"],
            &encoder(),
            &mut cache,
            Execution::Parallel,
        )
        .unwrap();
        cache.save(&path).unwrap();
        assert_eq!(EmbeddingCache::load(&path, "abc").unwrap(), cache);
        assert!(matches!(
            EmbeddingCache::load(&path, "xyz"),
            Err(Error::StaleCache { .. })
        ));
        let mut bytes = fs::read(&path).unwrap();
        bytes[1] ^= 1;
        assert!(matches!(
            EmbeddingCache::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }
}
