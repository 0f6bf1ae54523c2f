//! Supervised NLI fine-tuning and the pieces shared with the other
//! training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::data::NliExample;
use crate::error::{Error, Result};
use crate::head::{argmax, NliModel};
use crate::optim::{Optimizer, TrainingHyperParams};
use crate::par::{self, Execution};
use crate::tensor::ParamSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    pub execution: Execution,
}

impl RunOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Training accuracy of the predictions made before each update; absent
    /// for objectives without classes.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub batch_losses: Vec<f64>,
    pub optimizer_steps: u64,
}

impl TrainingLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Index batches for one epoch after an in-place shuffle of `order`.
pub(crate) fn shuffled_batches(
    rng: &mut ChaCha8Rng,
    order: &mut [usize],
    batch_size: usize,
) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NumericalInput(format!(
            "training loss became {loss}"
        )))
    }
}

/// Cross-entropy fine-tuning of encoder and head with AdamW. Each
/// mini-batch goes through `prepare` right before its forward pass.
pub(crate) fn train_classifier(
    model: &mut NliModel,
    dataset: &[NliExample],
    hyper: &TrainingHyperParams,
    opts: RunOptions,
    prepare: &mut dyn FnMut(Vec<NliExample>) -> Result<Vec<NliExample>>,
) -> Result<TrainingLog> {
    if dataset.is_empty() {
        return Err(Error::data("empty training set"));
    }
    hyper.validate()?;
    let mut optimizer = Optimizer::new(
        &[model.encoder().params(), model.head().params()],
        hyper.clone(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainingLog::default();

    for epoch in 0..hyper.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in shuffled_batches(&mut rng, &mut order, hyper.batch_size) {
            let batch = prepare(idx.iter().map(|&i| dataset[i].clone()).collect())?;
            let scale = 1.0 / batch.len() as f64;
            let model_ref: &NliModel = model;
            let results = par::try_map(opts.execution, &batch, |ex| {
                model_ref.example_grad(&ex.premise, &ex.hypothesis, ex.label, scale)
            })?;
            let mut total = Gradients::default();
            let mut batch_loss = 0.0;
            for (r, ex) in results.iter().zip(&batch) {
                total.merge(&r.gradients);
                batch_loss += r.loss;
                correct += usize::from(argmax(&r.probabilities) == ex.label.index());
            }
            loss_sum += check_loss(batch_loss)?;
            log.batch_losses.push(batch_loss * scale);
            let mut sets = model.param_sets_mut();
            for set in sets.iter_mut() {
                total.apply_to(set)?;
            }
            optimizer.micro_batch_done(&mut sets)?;
        }
        optimizer.flush(&mut model.param_sets_mut())?;
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / dataset.len() as f64,
            accuracy: Some(correct as f64 / dataset.len() as f64),
        });
    }
    log.optimizer_steps = optimizer.state().step_count();
    Ok(log)
}

/// Fine-tunes encoder and head on labelled pairs by minimizing
/// cross-entropy. Shuffling is seeded by `opts.seed`.
pub fn finetune_nli(
    model: &mut NliModel,
    dataset: &[NliExample],
    hyper: &TrainingHyperParams,
    opts: RunOptions,
) -> Result<TrainingLog> {
    train_classifier(model, dataset, hyper, opts, &mut Ok)
}

/// Worst disagreement between analytic gradients and central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub values_checked: usize,
    /// Parameter name and flat index of the worst value.
    pub worst: (String, usize),
}

/// Compares every parameter gradient of one example's cross-entropy with
/// `(L(w + h) - L(w - h)) / 2h`. The relative error of a value is
/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps values that are zero
/// on both sides from dividing by zero.
pub fn check_gradients(
    model: &NliModel,
    example: &NliExample,
    h: f64,
    floor: f64,
) -> Result<GradientCheck> {
    let analytic = model
        .example_grad(&example.premise, &example.hypothesis, example.label, 1.0)?
        .gradients;
    let p_ids = model.encoder().tokenize(&example.premise)?;
    let h_ids = model.encoder().tokenize(&example.hypothesis)?;
    let loss = |m: &NliModel| -> Result<f64> {
        let mut tape = Tape::new();
        let probs = m.forward(&mut tape, &p_ids, &h_ids)?;
        let l = tape.cross_entropy(probs, example.label.index())?;
        Ok(tape.value(l).data()[0])
    };
    fn set(m: &mut NliModel, i: usize) -> &mut ParamSet {
        if i == 0 {
            m.encoder_mut().params_mut()
        } else {
            m.head_mut().params_mut()
        }
    }
    let mut probe = model.clone();
    let mut check = GradientCheck {
        max_relative_error: 0.0,
        values_checked: 0,
        worst: (String::new(), 0),
    };
    for i in 0..2 {
        let grads = analytic.slot(set(&mut probe, i).slot()).to_vec();
        for t in 0..set(&mut probe, i).len() {
            for j in 0..set(&mut probe, i).tensors()[t].len() {
                let original = set(&mut probe, i).tensors()[t].data()[j];
                set(&mut probe, i).tensors_mut()[t].data_mut()[j] = original + h;
                let plus = loss(&probe)?;
                set(&mut probe, i).tensors_mut()[t].data_mut()[j] = original - h;
                let minus = loss(&probe)?;
                set(&mut probe, i).tensors_mut()[t].data_mut()[j] = original;
                let numeric = (plus - minus) / (2.0 * h);
                let a = grads.get(t).and_then(|g| g.as_ref()).map_or(0.0, |g| g[j]);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                check.values_checked += 1;
                if err > check.max_relative_error {
                    let name = set(&mut probe, i)
                        .iter()
                        .nth(t)
                        .map(|(n, _)| n.to_string())
                        .unwrap_or_default();
                    check.max_relative_error = err;
                    check.worst = (name, j);
                }
            }
        }
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_nli, NliLabel, LEXICON};
    use crate::encoder::{Encoder, EncoderConfig, Vocabulary};
    use crate::head::PairClassifier;

    fn tiny_model(seed: u64) -> NliModel {
        let vocab = Vocabulary::from_tokens(LEXICON.words()).unwrap();
        let config = EncoderConfig {
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 32,
            ..Default::default()
        };
        NliModel::with_desk_head(Encoder::new(config, vocab, seed).unwrap(), seed + 1).unwrap()
    }

    fn hyper(lr: f64, epochs: usize) -> TrainingHyperParams {
        TrainingHyperParams {
            batch_size: 4,
            epochs,
            learning_rate: lr,
            epsilon: 1e-8,
            weight_decay: 0.0,
            accumulation_step: 1,
            ..TrainingHyperParams::paper_nli()
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut m = tiny_model(0);
        assert!(matches!(
            finetune_nli(&mut m, &[], &hyper(1e-3, 1), RunOptions::seeded(0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut m = tiny_model(0);
        let before = m.clone();
        let data = gen_synthetic_nli(0, 12, 10).unwrap();
        let log = finetune_nli(&mut m, &data, &hyper(0.0, 3), RunOptions::seeded(1)).unwrap();
        assert!(m.encoder().params().same_values(before.encoder().params()));
        assert!(m.head().params().same_values(before.head().params()));
        let l0 = log.epochs[0].mean_loss;
        for e in &log.epochs {
            assert!((e.mean_loss - l0).abs() < 1e-12);
        }
    }

    #[test]
    fn both_parts_update_and_runs_are_deterministic() {
        let data = gen_synthetic_nli(2, 16, 10).unwrap();
        let mut a = tiny_model(3);
        let before = a.clone();
        let la = finetune_nli(&mut a, &data, &hyper(1e-3, 2), RunOptions::seeded(5)).unwrap();
        assert!(!a.encoder().params().same_values(before.encoder().params()));
        assert!(!a.head().params().same_values(before.head().params()));
        let mut b = tiny_model(3);
        let opts = RunOptions::seeded(5).with_execution(Execution::Sequential);
        let lb = finetune_nli(&mut b, &data, &hyper(1e-3, 2), opts).unwrap();
        assert_eq!(la, lb);
        assert!(a.encoder().params().same_values(b.encoder().params()));
        assert_eq!(la.epochs.len(), 2);
        assert_eq!(la.batch_losses.len(), 8);
        assert_eq!(la.optimizer_steps, 8);
    }

    #[test]
    fn overfits_a_small_set() {
        let data = gen_synthetic_nli(7, 20, 10).unwrap();
        let mut m = tiny_model(1);
        let log = finetune_nli(&mut m, &data, &hyper(3e-3, 200), RunOptions::seeded(2)).unwrap();
        let first = log.epochs[0].mean_loss;
        let last = log.final_loss().unwrap();
        assert!(last < first * 0.1, "{first} -> {last}");
        let correct = data
            .iter()
            .filter(|e| {
                m.predict_pair(&e.premise, &e.hypothesis)
                    .unwrap()
                    .predicted_label
                    == e.label
            })
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99, "{correct}/20");
        assert!(data.iter().any(|e| e.label == NliLabel::Neutral));
    }
}
