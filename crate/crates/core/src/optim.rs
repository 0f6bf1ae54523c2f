//! Adam with decoupled weight decay, gradient accumulation, and the
//! training hyper-parameter record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;

/// One training regime. Field names follow the published hyper-parameter
/// lists so config files map onto them one to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperParams {
    pub batch_size: usize,
    /// Character bound applied before tokenization.
    pub max_sentence_length: usize,
    /// Token bound, BOS/EOS included.
    pub max_tokens_length: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub accumulation_step: usize,
}

impl TrainingHyperParams {
    /// Source-language NLI fine-tuning.
    pub fn paper_nli() -> Self {
        Self {
            batch_size: 8,
            max_sentence_length: 256,
            max_tokens_length: 128,
            epochs: 1,
            learning_rate: 2e-5,
            epsilon: 1e-8,
            weight_decay: 0.0,
            accumulation_step: 8,
        }
    }

    /// Teacher-student distillation.
    pub fn paper_kd() -> Self {
        Self {
            batch_size: 24,
            max_sentence_length: 256,
            max_tokens_length: 128,
            epochs: 6,
            learning_rate: 2e-5,
            epsilon: 1e-6,
            weight_decay: 1e-2,
            accumulation_step: 4,
        }
    }

    /// Fine-tuning on machine-translated NLI data.
    pub fn paper_mt() -> Self {
        Self {
            batch_size: 8,
            max_sentence_length: 256,
            max_tokens_length: 256,
            epochs: 5,
            learning_rate: 4e-5,
            epsilon: 1e-16,
            weight_decay: 1e-4,
            accumulation_step: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_sentence_length", self.max_sentence_length),
            ("max_tokens_length", self.max_tokens_length),
            ("epochs", self.epochs),
            ("accumulation_step", self.accumulation_step),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be a finite non-negative number".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.max_tokens_length > self.max_sentence_length {
            return Err(Error::Config(
                "max_tokens_length must not exceed max_sentence_length".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment estimates, one buffer per parameter of every optimized set.
#[derive(Clone, Debug)]
pub struct AdamState {
    step_count: u64,
    first_moment: Vec<Vec<Vec<f64>>>,
    second_moment: Vec<Vec<Vec<f64>>>,
}

impl AdamState {
    pub fn new(sets: &[&ParamSet]) -> Self {
        let zeros = |s: &&ParamSet| s.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step_count: 0,
            first_moment: sets.iter().map(zeros).collect(),
            second_moment: sets.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Indexed `[set][parameter][value]`, like the optimized sets.
    pub fn first_moment(&self) -> &[Vec<Vec<f64>>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<Vec<f64>>] {
        &self.second_moment
    }

    /// Applies one update using `grad / grad_divisor`, then zeroes the
    /// gradient buffers.
    pub fn update(
        &mut self,
        sets: &mut [&mut ParamSet],
        hyper: &TrainingHyperParams,
        grad_divisor: f64,
    ) -> Result<()> {
        if sets.len() != self.first_moment.len() {
            return Err(Error::OptimizerState(format!(
                "state tracks {} parameter sets, got {}",
                self.first_moment.len(),
                sets.len()
            )));
        }
        for (s, set) in sets.iter().enumerate() {
            if set.len() != self.first_moment[s].len() {
                return Err(Error::OptimizerState("parameter count changed".into()));
            }
            for (p, (name, t)) in set.iter().enumerate() {
                if t.len() != self.first_moment[s][p].len() {
                    return Err(Error::OptimizerState(format!(
                        "moment shape mismatch for {name}"
                    )));
                }
                if t.requires_grad() && t.grad().is_none() {
                    return Err(Error::OptimizerState(format!(
                        "missing gradient for {name}"
                    )));
                }
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        let lr = hyper.learning_rate;
        let decay = lr * hyper.weight_decay;

        for (s, set) in sets.iter_mut().enumerate() {
            for (p, tensor) in set.tensors_mut().iter_mut().enumerate() {
                if !tensor.requires_grad() {
                    continue;
                }
                let grad: Vec<f64> = tensor
                    .grad()
                    .expect("checked above")
                    .iter()
                    .map(|g| g / grad_divisor)
                    .collect();
                let m = &mut self.first_moment[s][p];
                let v = &mut self.second_moment[s][p];
                for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                    let g = grad[i];
                    *w -= decay * *w;
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    *w -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
                }
                tensor.zero_grad();
            }
        }
        Ok(())
    }
}

/// One Adam update on gradients summed over `accumulation_step`
/// micro-batches.
pub fn adam_step(
    sets: &mut [&mut ParamSet],
    state: &mut AdamState,
    hyper: &TrainingHyperParams,
) -> Result<()> {
    state.update(sets, hyper, hyper.accumulation_step as f64)
}

/// Adam plus a micro-batch counter: gradients accumulate until
/// `accumulation_step` micro-batches have been seen, then the averaged
/// gradient is applied.
#[derive(Clone, Debug)]
pub struct Optimizer {
    state: AdamState,
    hyper: TrainingHyperParams,
    pending: usize,
}

impl Optimizer {
    pub fn new(sets: &[&ParamSet], hyper: TrainingHyperParams) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            state: AdamState::new(sets),
            hyper,
            pending: 0,
        })
    }

    pub fn hyper(&self) -> &TrainingHyperParams {
        &self.hyper
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Records one finished micro-batch; returns true when an update ran.
    pub fn micro_batch_done(&mut self, sets: &mut [&mut ParamSet]) -> Result<bool> {
        self.pending += 1;
        if self.pending == self.hyper.accumulation_step {
            adam_step(sets, &mut self.state, &self.hyper)?;
            self.pending = 0;
            return Ok(true);
        }
        Ok(false)
    }

    /// Applies any partially accumulated gradient, averaged over the
    /// micro-batches actually seen.
    pub fn flush(&mut self, sets: &mut [&mut ParamSet]) -> Result<bool> {
        if self.pending == 0 {
            return Ok(false);
        }
        let divisor = self.pending as f64;
        self.state.update(sets, &self.hyper, divisor)?;
        self.pending = 0;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn hyper(lr: f64, wd: f64, accumulation_step: usize) -> TrainingHyperParams {
        TrainingHyperParams {
            batch_size: 1,
            max_sentence_length: 16,
            max_tokens_length: 16,
            epochs: 1,
            learning_rate: lr,
            epsilon: 1e-8,
            weight_decay: wd,
            accumulation_step,
        }
    }

    #[test]
    fn paper_regimes_are_valid() {
        for h in [
            TrainingHyperParams::paper_nli(),
            TrainingHyperParams::paper_kd(),
            TrainingHyperParams::paper_mt(),
        ] {
            h.validate().unwrap();
        }
        let kd = TrainingHyperParams::paper_kd();
        assert_eq!((kd.batch_size, kd.epochs, kd.accumulation_step), (24, 6, 4));
        assert_eq!(
            (kd.learning_rate, kd.epsilon, kd.weight_decay),
            (2e-5, 1e-6, 1e-2)
        );
        let nli = TrainingHyperParams::paper_nli();
        assert_eq!(
            (nli.batch_size, nli.epochs, nli.accumulation_step),
            (8, 1, 8)
        );
        assert_eq!(
            (nli.learning_rate, nli.epsilon, nli.weight_decay),
            (2e-5, 1e-8, 0.0)
        );
        let mt = TrainingHyperParams::paper_mt();
        assert_eq!((mt.batch_size, mt.epochs, mt.accumulation_step), (8, 5, 4));
        assert_eq!(
            (mt.learning_rate, mt.epsilon, mt.weight_decay),
            (4e-5, 1e-16, 1e-4)
        );
        assert_eq!((mt.max_sentence_length, mt.max_tokens_length), (256, 256));
    }

    #[test]
    fn invalid_hyper_params_rejected() {
        let mut h = hyper(0.1, 0.0, 1);
        h.max_tokens_length = 32;
        assert!(h.validate().is_err());
        let mut h = hyper(0.1, 0.0, 1);
        h.batch_size = 0;
        assert!(h.validate().is_err());
        let mut h = hyper(0.1, 0.0, 1);
        h.epsilon = 0.0;
        assert!(h.validate().is_err());
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut set = ParamSet::new(0);
        let id = set.add("p", Tensor::scalar(1.0));
        set.get_mut(id).grad_mut().unwrap()[0] = 0.5;
        let mut state = AdamState::new(&[&set]);
        adam_step(&mut [&mut set], &mut state, &hyper(0.1, 0.0, 1)).unwrap();
        // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25
        // p = 1 - 0.1 * 0.5 / (0.5 + 1e-8)
        let expected = 0.900_000_002;
        assert!((set.get(id).data()[0] - expected).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
        assert_eq!(set.get(id).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut set = ParamSet::new(0);
        let id = set.add("p", Tensor::vector(vec![2.0, -4.0]));
        let mut state = AdamState::new(&[&set]);
        adam_step(&mut [&mut set], &mut state, &hyper(0.1, 0.0, 1)).unwrap();
        assert_eq!(set.get(id).data(), &[2.0, -4.0]);
        adam_step(&mut [&mut set], &mut state, &hyper(0.1, 0.5, 1)).unwrap();
        let w = set.get(id).data();
        assert!((w[0] - 1.9).abs() < 1e-15 && (w[1] + 3.8).abs() < 1e-15);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut set = ParamSet::new(0);
        set.add("p", Tensor::scalar(1.0));
        let mut state = AdamState::new(&[&set]);
        // Drop the buffer while keeping the parameter trainable.
        let t = set.get_mut(crate::tensor::ParamId(0));
        *t = {
            let mut fresh = Tensor::scalar(1.0);
            fresh.set_requires_grad(true);
            fresh
        };
        assert!(matches!(
            adam_step(&mut [&mut set], &mut state, &hyper(0.1, 0.0, 1)),
            Err(Error::OptimizerState(_))
        ));
    }

    #[test]
    fn accumulation_equals_averaged_step() {
        let grads = [0.3, -1.2, 0.05];
        let start = vec![0.5, 1.5, -0.7];

        let mut acc = ParamSet::new(0);
        let id = acc.add("w", Tensor::vector(start.clone()));
        let mut opt = Optimizer::new(&[&acc], hyper(0.01, 0.01, 8)).unwrap();
        for micro in 0..8 {
            acc.accumulate(&[Some(grads.to_vec())]).unwrap();
            let stepped = opt.micro_batch_done(&mut [&mut acc]).unwrap();
            assert_eq!(stepped, micro == 7);
        }

        let mut single = ParamSet::new(0);
        single.add("w", Tensor::vector(start));
        single.accumulate(&[Some(grads.to_vec())]).unwrap();
        let mut state = AdamState::new(&[&single]);
        adam_step(&mut [&mut single], &mut state, &hyper(0.01, 0.01, 1)).unwrap();

        for (a, b) in acc.get(id).data().iter().zip(single.get(id).data()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(opt.state().step_count(), 1);
    }

    #[test]
    fn flush_averages_partial_accumulation() {
        let mut a = ParamSet::new(0);
        a.add("w", Tensor::scalar(1.0));
        let mut opt = Optimizer::new(&[&a], hyper(0.1, 0.0, 4)).unwrap();
        a.accumulate(&[Some(vec![1.0])]).unwrap();
        opt.micro_batch_done(&mut [&mut a]).unwrap();
        a.accumulate(&[Some(vec![1.0])]).unwrap();
        opt.micro_batch_done(&mut [&mut a]).unwrap();
        assert!(opt.flush(&mut [&mut a]).unwrap());
        assert!(!opt.flush(&mut [&mut a]).unwrap());

        let mut b = ParamSet::new(0);
        b.add("w", Tensor::scalar(1.0));
        b.accumulate(&[Some(vec![1.0])]).unwrap();
        let mut state = AdamState::new(&[&b]);
        adam_step(&mut [&mut b], &mut state, &hyper(0.1, 0.0, 1)).unwrap();
        assert_eq!(a.tensors()[0].data(), b.tensors()[0].data());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut set = ParamSet::new(0);
        let id = set.add("w", Tensor::vector(vec![0.25, -3.0]));
        set.accumulate(&[Some(vec![10.0, -10.0])]).unwrap();
        let mut state = AdamState::new(&[&set]);
        adam_step(&mut [&mut set], &mut state, &hyper(0.0, 0.1, 1)).unwrap();
        assert_eq!(set.get(id).data(), &[0.25, -3.0]);
    }
}
