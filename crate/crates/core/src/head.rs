//! Pair features, the six-layer GELU classifier head and the composed
//! siamese NLI model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::NliLabel;
use crate::encoder::{load_by_name, Encoder, SentenceEmbedding};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tensor};

pub const HEAD_SLOT: usize = 1;
pub const HEAD_LAYERS: usize = 6;
pub const PAPER_HEAD_DIMS: [usize; HEAD_LAYERS + 1] = [1536, 1024, 512, 256, 128, 64, 3];

/// Desk-scale topology for an encoder of width `d`:
/// `2d -> d/2 -> d/4 -> d/8 -> d/8 -> d/16 -> 3`, hidden widths floored at 4.
/// For `d = 64` this is `128 -> 32 -> 16 -> 8 -> 8 -> 4 -> 3`.
pub fn desk_head_dims(embed_dim: usize) -> [usize; HEAD_LAYERS + 1] {
    let h = |div: usize| (embed_dim / div).max(4);
    [2 * embed_dim, h(2), h(4), h(8), h(8), h(16), 3]
}

/// `[u * v ; u - v]` for a premise embedding `u` and hypothesis embedding `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn product(&self) -> &[f64] {
        &self.values[..self.values.len() / 2]
    }

    pub fn difference(&self) -> &[f64] {
        &self.values[self.values.len() / 2..]
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::matrix(1, self.values.len(), self.values.clone()).expect("row vector")
    }
}

pub fn combine_features(u: &SentenceEmbedding, v: &SentenceEmbedding) -> Result<FeatureVector> {
    combine_slices(&u.vector, &v.vector)
}

pub fn combine_slices(u: &[f64], v: &[f64]) -> Result<FeatureVector> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "embedding dimensions differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let mut values: Vec<f64> = u.iter().zip(v).map(|(a, b)| a * b).collect();
    values.extend(u.iter().zip(v).map(|(a, b)| a - b));
    Ok(FeatureVector { values })
}

/// Differentiable counterpart of [`combine_features`] on `[1, d]` rows.
pub fn combine_on_tape(tape: &mut Tape, u: Var, v: Var) -> Result<Var> {
    let prod = tape.mul(u, v)?;
    let diff = tape.sub(u, v)?;
    tape.concat_cols(&[prod, diff])
}

/// Class probabilities in (entailment, neutral, contradiction) order and
/// their argmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NliPrediction {
    pub probabilities: [f64; 3],
    pub predicted_label: NliLabel,
}

impl NliPrediction {
    /// Ties go to the lowest class index.
    pub fn from_probabilities(p: &[f64]) -> Result<Self> {
        let probabilities: [f64; 3] = p
            .try_into()
            .map_err(|_| Error::shape(format!("expected 3 probabilities, got {}", p.len())))?;
        if probabilities.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalInput("non-finite class probability".into()));
        }
        Ok(Self {
            probabilities,
            predicted_label: NliLabel::from_index(argmax(&probabilities))?,
        })
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Six affine layers, each followed by GELU (the last one included), then a
/// softmax over the three classes.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    dims: Vec<usize>,
    params: ParamSet,
    layers: Vec<(ParamId, ParamId)>,
}

impl HeadWeights {
    fn build(dims: &[usize], mut init: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        if dims.len() != HEAD_LAYERS + 1 {
            return Err(Error::shape(format!(
                "head needs {} dims for {HEAD_LAYERS} layers, got {}",
                HEAD_LAYERS + 1,
                dims.len()
            )));
        }
        if dims.contains(&0) || dims[HEAD_LAYERS] != 3 {
            return Err(Error::shape(format!("invalid head dims {dims:?}")));
        }
        let mut params = ParamSet::new(HEAD_SLOT);
        let mut layers = Vec::with_capacity(HEAD_LAYERS);
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = params.add(
                format!("head.{l}.weight"),
                Tensor::matrix(fan_in, fan_out, init(fan_in, fan_out))?,
            );
            let bias = params.add(
                format!("head.{l}.bias"),
                Tensor::matrix(1, fan_out, vec![0.0; fan_out])?,
            );
            layers.push((weight, bias));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
            layers,
        })
    }

    /// Xavier-normal weights, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(dims, |fan_in, fan_out| {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..fan_in * fan_out)
                .map(|_| normal.sample(&mut rng))
                .collect()
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::build(dims, |fan_in, fan_out| vec![0.0; fan_in * fan_out])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn load_params(&mut self, source: &ParamSet) -> Result<()> {
        load_by_name(&mut self.params, source)
    }

    /// Records the head on `tape` for a `[1, 2d]` feature row and returns the
    /// `[1, 3]` probability row.
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let width = tape.value(features).rows_cols().1;
        if width != self.input_dim() {
            return Err(Error::shape(format!(
                "feature width {width} does not match head input {}",
                self.input_dim()
            )));
        }
        let mut x = features;
        for &(w, b) in &self.layers {
            let wv = tape.param(&self.params, w);
            let bv = tape.param(&self.params, b);
            let y = tape.matmul(x, wv)?;
            let y = tape.add_row(y, bv)?;
            x = tape.gelu(y)?;
        }
        tape.softmax(x)
    }

    pub fn classify(&self, features: &FeatureVector) -> Result<NliPrediction> {
        let mut tape = Tape::new();
        let f = tape.constant(features.to_tensor());
        let p = self.forward(&mut tape, f)?;
        NliPrediction::from_probabilities(tape.value(p).data())
    }

    pub fn classify_embeddings(&self, u: &[f64], v: &[f64]) -> Result<NliPrediction> {
        self.classify(&combine_slices(u, v)?)
    }
}

/// Anything that maps a sentence pair to an NLI prediction.
pub trait PairClassifier: Sync {
    fn predict_pair(&self, premise: &str, hypothesis: &str) -> Result<NliPrediction>;
}

/// Encoder plus head, run as a siamese pair classifier.
#[derive(Clone, Debug)]
pub struct NliModel {
    encoder: Encoder,
    head: HeadWeights,
}

/// Loss, probabilities and parameter gradients of one training example.
#[derive(Debug)]
pub struct ExampleGrad {
    pub loss: f64,
    pub probabilities: Vec<f64>,
    pub gradients: Gradients,
}

impl NliModel {
    pub fn new(encoder: Encoder, head: HeadWeights) -> Result<Self> {
        let want = encoder.config().classifier_input_dim();
        if head.input_dim() != want {
            return Err(Error::shape(format!(
                "head input {} does not match 2 x encoder dim = {want}",
                head.input_dim()
            )));
        }
        Ok(Self { encoder, head })
    }

    /// Fresh model with the desk-scale head for the encoder's width.
    pub fn with_desk_head(encoder: Encoder, seed: u64) -> Result<Self> {
        let head = HeadWeights::new(&desk_head_dims(encoder.embed_dim()), seed)?;
        Self::new(encoder, head)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Encoder {
        &mut self.encoder
    }

    pub fn head(&self) -> &HeadWeights {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut HeadWeights {
        &mut self.head
    }

    pub fn into_parts(self) -> (Encoder, HeadWeights) {
        (self.encoder, self.head)
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet; 2] {
        [self.encoder.params_mut(), self.head.params_mut()]
    }

    /// Records the whole pipeline on `tape`; returns the probability row.
    pub fn forward(&self, tape: &mut Tape, premise: &[usize], hypothesis: &[usize]) -> Result<Var> {
        let u = self.encoder.forward(tape, premise)?;
        let v = self.encoder.forward(tape, hypothesis)?;
        let f = combine_on_tape(tape, u, v)?;
        self.head.forward(tape, f)
    }

    /// Cross-entropy of one labelled pair, with gradients of `scale * loss`.
    pub fn example_grad(
        &self,
        premise: &str,
        hypothesis: &str,
        label: NliLabel,
        scale: f64,
    ) -> Result<ExampleGrad> {
        let p_ids = self.encoder.tokenize(premise)?;
        let h_ids = self.encoder.tokenize(hypothesis)?;
        let mut tape = Tape::new();
        let probs = self.forward(&mut tape, &p_ids, &h_ids)?;
        let loss = tape.cross_entropy(probs, label.index())?;
        let scaled = tape.scale(loss, scale);
        let gradients = tape.gradients(scaled)?;
        Ok(ExampleGrad {
            loss: tape.value(loss).data()[0],
            probabilities: tape.value(probs).data().to_vec(),
            gradients,
        })
    }
}

impl PairClassifier for NliModel {
    fn predict_pair(&self, premise: &str, hypothesis: &str) -> Result<NliPrediction> {
        let u = self.encoder.encode_text(premise)?;
        let v = self.encoder.encode_text(hypothesis)?;
        self.head.classify(&combine_features(&u, &v)?)
    }
}
