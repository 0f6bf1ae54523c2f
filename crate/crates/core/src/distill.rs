//! Teacher-student embedding distillation over parallel sentences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape};
use crate::data::ParallelPair;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::head::{HeadWeights, NliModel};
use crate::optim::{Optimizer, TrainingHyperParams};
use crate::par;
use crate::tensor::Tensor;
use crate::train::{check_loss, shuffled_batches, EpochLog, RunOptions, TrainingLog};

/// A non-empty mini-batch of at most `batch_size` pairs.
#[derive(Clone, Copy, Debug)]
pub struct DistillationBatch<'a> {
    pairs: &'a [ParallelPair],
}

impl<'a> DistillationBatch<'a> {
    pub fn new(pairs: &'a [ParallelPair], batch_size: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::data("empty distillation batch"));
        }
        if pairs.len() > batch_size {
            return Err(Error::data(format!(
                "batch of {} pairs exceeds batch_size {batch_size}",
                pairs.len()
            )));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &'a [ParallelPair] {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Frozen teacher and trainable student of identical architecture.
#[derive(Clone, Debug)]
pub struct TeacherStudentSetup {
    teacher: Encoder,
    student: Encoder,
}

impl TeacherStudentSetup {
    /// The student starts as an exact copy of the teacher.
    pub fn from_teacher(teacher: Encoder) -> Self {
        let student = teacher.clone();
        Self { teacher, student }
    }

    pub fn new(teacher: Encoder, student: Encoder) -> Result<Self> {
        if teacher.config() != student.config() {
            return Err(Error::shape("teacher and student configs differ"));
        }
        Ok(Self { teacher, student })
    }

    pub fn teacher(&self) -> &Encoder {
        &self.teacher
    }

    pub fn student(&self) -> &Encoder {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut Encoder {
        &mut self.student
    }

    pub fn into_student(self) -> Encoder {
        self.student
    }
}

struct PairGrad {
    loss: f64,
    gradients: Gradients,
}

/// Contribution of one pair: `mse(T(source), S(target)) * scale`, with the
/// teacher side evaluated off the tape.
fn pair_grad(setup: &TeacherStudentSetup, pair: &ParallelPair, scale: f64) -> Result<PairGrad> {
    let teacher_vec = setup
        .teacher
        .encode(&setup.teacher.tokenize(&pair.source)?)?;
    let ids = setup.student.tokenize(&pair.target)?;
    let mut tape = Tape::new();
    let s = setup.student.forward(&mut tape, &ids)?;
    let t = tape.constant(Tensor::matrix(1, teacher_vec.len(), teacher_vec)?);
    let mse = tape.mse(t, s)?;
    let scaled = tape.scale(mse, scale);
    let gradients = tape.gradients(scaled)?;
    Ok(PairGrad {
        loss: tape.value(mse).data()[0],
        gradients,
    })
}

/// Mean over the batch and over embedding components of
/// `(T(source_j) - S(target_j))^2`.
pub fn kd_loss(batch: &DistillationBatch<'_>, setup: &TeacherStudentSetup) -> Result<f64> {
    let mut total = 0.0;
    for pair in batch.pairs {
        let t = setup
            .teacher
            .encode(&setup.teacher.tokenize(&pair.source)?)?;
        let s = setup
            .student
            .encode(&setup.student.tokenize(&pair.target)?)?;
        total += crate::ops::mse_loss(&Tensor::vector(t), &Tensor::vector(s))?;
    }
    Ok(total / batch.len() as f64)
}

/// Loss of `batch` and its gradient, accumulated into the student's buffers.
/// The teacher is only read.
pub fn kd_backward(
    batch: &DistillationBatch<'_>,
    setup: &mut TeacherStudentSetup,
    opts: RunOptions,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let shared: &TeacherStudentSetup = setup;
    let results = par::try_map(opts.execution, batch.pairs, |p| pair_grad(shared, p, scale))?;
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for r in &results {
        total.merge(&r.gradients);
        loss += r.loss;
    }
    total.apply_to(setup.student.params_mut())?;
    Ok(loss * scale)
}

/// Epochs of shuffled mini-batch AdamW steps on [`kd_loss`], updating only
/// the student.
pub fn distill(
    setup: &mut TeacherStudentSetup,
    corpus: &[ParallelPair],
    hyper: &TrainingHyperParams,
    opts: RunOptions,
) -> Result<TrainingLog> {
    if corpus.is_empty() {
        return Err(Error::data("empty parallel corpus"));
    }
    hyper.validate()?;
    let mut optimizer = Optimizer::new(&[setup.student.params()], hyper.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 0..hyper.epochs {
        let mut loss_sum = 0.0;
        for idx in shuffled_batches(&mut rng, &mut order, hyper.batch_size) {
            let pairs: Vec<ParallelPair> = idx.iter().map(|&i| corpus[i].clone()).collect();
            let batch = DistillationBatch::new(&pairs, hyper.batch_size)?;
            let loss = check_loss(kd_backward(&batch, setup, opts)?)?;
            loss_sum += loss * batch.len() as f64;
            log.batch_losses.push(loss);
            optimizer.micro_batch_done(&mut [setup.student.params_mut()])?;
        }
        optimizer.flush(&mut [setup.student.params_mut()])?;
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / corpus.len() as f64,
            accuracy: None,
        });
    }
    log.optimizer_steps = optimizer.state().step_count();
    Ok(log)
}

/// Pairs the distilled student with the head trained in the source
/// language.
pub fn assemble_target_nli(student: Encoder, head: HeadWeights) -> Result<NliModel> {
    NliModel::new(student, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Vocabulary};
    use approx::assert_abs_diff_eq;

    fn teacher() -> Encoder {
        let vocab = Vocabulary::from_texts(["the cat is sleeping", "a dog runs fast", "xq zv wr"]);
        let config = EncoderConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            ..Default::default()
        };
        Encoder::new(config, vocab, 4).unwrap()
    }

    fn pairs(list: &[(&str, &str)]) -> Vec<ParallelPair> {
        list.iter()
            .map(|(a, b)| ParallelPair::new(*a, *b).unwrap())
            .collect()
    }

    #[test]
    fn batch_bounds() {
        let p = pairs(&[("a", "b"), ("c", "d")]);
        assert!(DistillationBatch::new(&p, 2).is_ok());
        assert!(DistillationBatch::new(&p, 1).is_err());
        assert!(DistillationBatch::new(&[], 4).is_err());
    }

    #[test]
    fn identical_sides_give_zero_loss() {
        let setup = TeacherStudentSetup::from_teacher(teacher());
        let p = pairs(&[
            ("the cat is sleeping", "the cat is sleeping"),
            ("a dog", "a dog"),
        ]);
        let b = DistillationBatch::new(&p, 24).unwrap();
        assert_eq!(kd_loss(&b, &setup).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_double_loop() {
        let setup = TeacherStudentSetup::from_teacher(teacher());
        let p = pairs(&[
            ("the cat is sleeping", "xq zv"),
            ("a dog runs fast", "wr xq zv"),
        ]);
        let b = DistillationBatch::new(&p, 24).unwrap();
        let mut oracle = 0.0;
        for pair in &p {
            let t = setup.teacher().encode_text(&pair.source).unwrap().vector;
            let s = setup.student().encode_text(&pair.target).unwrap().vector;
            let mut sq = 0.0;
            for k in 0..t.len() {
                sq += (t[k] - s[k]).powi(2);
            }
            oracle += sq / t.len() as f64;
        }
        oracle /= p.len() as f64;
        assert_abs_diff_eq!(kd_loss(&b, &setup).unwrap(), oracle, epsilon = 1e-12);
        let mut setup = setup;
        let l = kd_backward(&b, &mut setup, RunOptions::default()).unwrap();
        assert_abs_diff_eq!(l, oracle, epsilon = 1e-12);
    }

    #[test]
    fn teacher_stays_frozen() {
        let mut setup = TeacherStudentSetup::from_teacher(teacher());
        let frozen = setup.teacher().clone();
        let p = pairs(&[("the cat is sleeping", "xq zv"), ("a dog runs fast", "wr")]);
        let b = DistillationBatch::new(&p, 24).unwrap();
        kd_backward(&b, &mut setup, RunOptions::default()).unwrap();
        for t in setup.teacher().params().tensors() {
            assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
        }
        assert!(setup.student().params().tensors().iter().any(|t| t
            .grad()
            .unwrap()
            .iter()
            .any(|&g| g != 0.0)));
        let hyper = TrainingHyperParams {
            batch_size: 1,
            epochs: 2,
            learning_rate: 1e-2,
            ..TrainingHyperParams::paper_kd()
        };
        distill(&mut setup, &p, &hyper, RunOptions::seeded(0)).unwrap();
        assert!(setup.teacher().params().same_values(frozen.params()));
        assert!(!setup.student().params().same_values(frozen.params()));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let mut setup = TeacherStudentSetup::from_teacher(teacher());
        assert!(matches!(
            distill(
                &mut setup,
                &[],
                &TrainingHyperParams::paper_kd(),
                RunOptions::seeded(0)
            ),
            Err(Error::Data(_))
        ));
    }
}
