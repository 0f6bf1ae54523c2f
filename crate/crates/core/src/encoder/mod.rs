//! Word-level tokenizer and a small pre-norm transformer that maps a
//! sentence to one mean-pooled embedding.

mod vocab;

pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Gradient slot of encoder parameters.
pub const ENCODER_SLOT: usize = 0;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_tokens_length: usize,
    pub max_sentence_length: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            max_tokens_length: 128,
            max_sentence_length: 256,
        }
    }
}

impl EncoderConfig {
    /// Base-size sentence encoder dimensions (768-wide, 12 layers).
    pub fn paper_scale() -> Self {
        Self {
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            max_tokens_length: 128,
            max_sentence_length: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_tokens_length", self.max_tokens_length),
            ("max_sentence_length", self.max_sentence_length),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.max_tokens_length < 3 {
            return Err(Error::Config("max_tokens_length must be at least 3".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Width of the classifier input built from two embeddings.
    pub fn classifier_input_dim(&self) -> usize {
        2 * self.embed_dim
    }
}

/// Stable 64-bit text fingerprint (leading bytes of SHA-256).
pub fn text_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub source_text_hash: u64,
}

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(1, self.vector.len(), self.vector.clone()).expect("row vector")
    }
}

/// Anything that turns text into a sentence embedding.
pub trait SentenceEncoder: Sync {
    fn embed(&self, text: &str) -> Result<SentenceEmbedding>;
    fn dim(&self) -> usize;
}

#[derive(Clone, Debug)]
struct HeadIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    heads: Vec<HeadIds>,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderIds {
    token_embedding: ParamId,
    layers: Vec<LayerIds>,
    final_gain: ParamId,
    final_bias: ParamId,
}

/// Transformer sentence encoder with its vocabulary.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    vocab: Vocabulary,
    params: ParamSet,
    ids: EncoderIds,
    positions: Vec<f64>,
}

fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl Encoder {
    /// Fresh encoder with N(0, 0.02) weights, zero biases and unit
    /// layer-norm gains.
    pub fn new(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut sample = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        };
        let d = config.embed_dim;
        let dh = config.head_dim();
        let f = config.ffn_dim;
        let ones = |n: usize| Tensor::vector(vec![1.0; n]);
        let zeros = |n: usize| Tensor::vector(vec![0.0; n]);

        let mut params = ParamSet::new(ENCODER_SLOT);
        let token_embedding = params.add("token_embedding", sample(vec![vocab.len(), d]));
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layers.{l}");
            let ln1_gain = params.add(format!("{p}.ln1.gain"), ones(d));
            let ln1_bias = params.add(format!("{p}.ln1.bias"), zeros(d));
            let heads = (0..config.num_heads)
                .map(|h| {
                    let q = format!("{p}.attn.head{h}");
                    HeadIds {
                        wq: params.add(format!("{q}.wq"), sample(vec![d, dh])),
                        bq: params.add(format!("{q}.bq"), zeros(dh)),
                        wk: params.add(format!("{q}.wk"), sample(vec![d, dh])),
                        bk: params.add(format!("{q}.bk"), zeros(dh)),
                        wv: params.add(format!("{q}.wv"), sample(vec![d, dh])),
                        bv: params.add(format!("{q}.bv"), zeros(dh)),
                        wo: params.add(format!("{q}.wo"), sample(vec![dh, d])),
                    }
                })
                .collect();
            let bo = params.add(format!("{p}.attn.bo"), zeros(d));
            let ln2_gain = params.add(format!("{p}.ln2.gain"), ones(d));
            let ln2_bias = params.add(format!("{p}.ln2.bias"), zeros(d));
            let w1 = params.add(format!("{p}.ffn.w1"), sample(vec![d, f]));
            let b1 = params.add(format!("{p}.ffn.b1"), zeros(f));
            let w2 = params.add(format!("{p}.ffn.w2"), sample(vec![f, d]));
            let b2 = params.add(format!("{p}.ffn.b2"), zeros(d));
            layers.push(LayerIds {
                ln1_gain,
                ln1_bias,
                heads,
                bo,
                ln2_gain,
                ln2_bias,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_gain = params.add("final_ln.gain", ones(d));
        let final_bias = params.add("final_ln.bias", zeros(d));
        let positions = sinusoidal_positions(config.max_tokens_length, d);
        Ok(Self {
            config,
            vocab,
            params,
            ids: EncoderIds {
                token_embedding,
                layers,
                final_gain,
                final_bias,
            },
            positions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(
            text,
            &self.vocab,
            self.config.max_sentence_length,
            self.config.max_tokens_length,
        )
    }

    /// Tokenizes under tighter training-time bounds.
    pub fn tokenize_bounded(
        &self,
        text: &str,
        max_sentence_length: usize,
        max_tokens_length: usize,
    ) -> Result<Vec<usize>> {
        tokenize(
            text,
            &self.vocab,
            max_sentence_length.min(self.config.max_sentence_length),
            max_tokens_length.min(self.config.max_tokens_length),
        )
    }

    /// Records the encoder forward pass for one token sequence and returns
    /// the pooled `[1, d]` embedding.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let t = tokens.len();
        if t == 0 || t > self.config.max_tokens_length {
            return Err(Error::Tokenization(format!(
                "sequence length {t} outside 1..={}",
                self.config.max_tokens_length
            )));
        }
        let d = self.config.embed_dim;
        let p = &self.params;
        let keep: Vec<bool> = tokens.iter().map(|&id| id != PAD).collect();

        let emb = tape.embedding(p, self.ids.token_embedding, tokens)?;
        let emb = tape.scale(emb, (d as f64).sqrt());
        let pos = tape.constant(Tensor::matrix(t, d, self.positions[..t * d].to_vec())?);
        let mut x = tape.add(emb, pos)?;

        let attn_bias = if keep.iter().all(|&k| k) {
            None
        } else {
            let row: Vec<f64> = keep.iter().map(|&k| if k { 0.0 } else { -1e9 }).collect();
            let data = row.iter().copied().cycle().take(t * t).collect();
            Some(tape.constant(Tensor::matrix(t, t, data)?))
        };
        let inv_sqrt_dh = 1.0 / (self.config.head_dim() as f64).sqrt();

        for layer in &self.ids.layers {
            let g1 = tape.param(p, layer.ln1_gain);
            let b1 = tape.param(p, layer.ln1_bias);
            let h = tape.layer_norm(x, g1, b1)?;
            let mut attn: Option<Var> = None;
            for head in &layer.heads {
                let proj = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
                    let wv = tape.param(p, w);
                    let bv = tape.param(p, b);
                    let y = tape.matmul(h, wv)?;
                    tape.add_row(y, bv)
                };
                let q = proj(tape, head.wq, head.bq)?;
                let k = proj(tape, head.wk, head.bk)?;
                let v = proj(tape, head.wv, head.bv)?;
                let scores = tape.matmul_t(q, k)?;
                let mut scores = tape.scale(scores, inv_sqrt_dh);
                if let Some(bias) = attn_bias {
                    scores = tape.add(scores, bias)?;
                }
                let weights = tape.softmax(scores)?;
                let ctx = tape.matmul(weights, v)?;
                let wo = tape.param(p, head.wo);
                let out = tape.matmul(ctx, wo)?;
                attn = Some(match attn {
                    Some(acc) => tape.add(acc, out)?,
                    None => out,
                });
            }
            let bo = tape.param(p, layer.bo);
            let attn = tape.add_row(attn.expect("at least one head"), bo)?;
            x = tape.add(x, attn)?;

            let g2 = tape.param(p, layer.ln2_gain);
            let b2 = tape.param(p, layer.ln2_bias);
            let h = tape.layer_norm(x, g2, b2)?;
            let w1 = tape.param(p, layer.w1);
            let bias1 = tape.param(p, layer.b1);
            let w2 = tape.param(p, layer.w2);
            let bias2 = tape.param(p, layer.b2);
            let hidden = tape.matmul(h, w1)?;
            let hidden = tape.add_row(hidden, bias1)?;
            let hidden = tape.gelu(hidden)?;
            let out = tape.matmul(hidden, w2)?;
            let out = tape.add_row(out, bias2)?;
            x = tape.add(x, out)?;
        }

        let gf = tape.param(p, self.ids.final_gain);
        let bf = tape.param(p, self.ids.final_bias);
        let x = tape.layer_norm(x, gf, bf)?;
        tape.masked_mean_rows(x, &keep)
    }

    /// Embeds an already tokenized sequence.
    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn encode_text(&self, text: &str) -> Result<SentenceEmbedding> {
        let tokens = self.tokenize(text)?;
        Ok(SentenceEmbedding {
            vector: self.encode(&tokens)?,
            source_text_hash: text_hash(text),
        })
    }

    /// Replaces every parameter value from `source`, matching by name and
    /// shape.
    pub fn load_params(&mut self, source: &ParamSet) -> Result<()> {
        load_by_name(&mut self.params, source)
    }
}

impl SentenceEncoder for Encoder {
    fn embed(&self, text: &str) -> Result<SentenceEmbedding> {
        self.encode_text(text)
    }

    fn dim(&self) -> usize {
        self.config.embed_dim
    }
}

pub(crate) fn load_by_name(target: &mut ParamSet, source: &ParamSet) -> Result<()> {
    if source.len() != target.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            target.len(),
            source.len()
        )));
    }
    for (name, tensor) in source.iter() {
        let id = target
            .find(name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name:?}")))?;
        let dst = target.get_mut(id);
        if dst.shape() != tensor.shape() {
            return Err(Error::Integrity {
                tensor: name.to_string(),
                message: format!("shape {:?}, expected {:?}", tensor.shape(), dst.shape()),
            });
        }
        dst.data_mut().copy_from_slice(tensor.data());
    }
    Ok(())
}

/// Embeds premise and hypothesis with two independent calls to the same
/// encoder.
pub fn encode_pair<E: SentenceEncoder + ?Sized>(
    encoder: &E,
    premise: &str,
    hypothesis: &str,
) -> Result<(SentenceEmbedding, SentenceEmbedding)> {
    Ok((encoder.embed(premise)?, encoder.embed(hypothesis)?))
}
