//! Checkpoints, the split-inference embedding cache and run configuration.

mod cache;
mod checkpoint;
mod config;

pub use cache::{
    embed_corpus, CachedEncoder, CountingEncoder, EmbeddingCache, SplitClassifier, CACHE_MAGIC,
};
pub use checkpoint::{
    bytes_id, checkpoint_id, load_checkpoint, save_checkpoint, Checkpoint, ModelKind, Storage,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{RunConfig, PRESETS};
