use std::collections::HashSet;

use proptest::prelude::*;

use kdnli::data::{
    balance_sample, gen_synthetic_absa, gen_synthetic_nli, load_nli, save_nli, CipherSpec,
    NliExample, NliLabel, LEXICON,
};
use kdnli::encoder::{Encoder, EncoderConfig, Vocabulary};
use kdnli::eval::{evaluate, map_prediction, LabelMapping, Task};
use kdnli::head::{combine_slices, desk_head_dims, HeadWeights, NliPrediction};
use kdnli::ops::{mse_loss, softmax};
use kdnli::optim::{Optimizer, TrainingHyperParams};
use kdnli::persist::{Checkpoint, Storage};
use kdnli::tensor::{ParamSet, Tensor};

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, len)
}

fn label() -> impl Strategy<Value = NliLabel> {
    prop::sample::select(NliLabel::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_shift_invariant_distribution(x in vec_of(6), c in -50.0..50.0f64) {
        let p = softmax(&Tensor::vector(x.clone())).unwrap();
        let q = softmax(&Tensor::vector(x.iter().map(|v| v + c).collect())).unwrap();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mse_is_non_negative_and_zero_only_on_equality(a in vec_of(8), b in vec_of(8)) {
        let ta = Tensor::vector(a.clone());
        let l = mse_loss(&ta, &Tensor::vector(b.clone())).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, a == b);
        prop_assert_eq!(mse_loss(&ta, &ta).unwrap(), 0.0);
    }

    #[test]
    fn combine_features_product_commutes_difference_anticommutes(u in vec_of(6), v in vec_of(6)) {
        let uv = combine_slices(&u, &v).unwrap();
        let vu = combine_slices(&v, &u).unwrap();
        prop_assert_eq!(uv.len(), 12);
        prop_assert_eq!(uv.product(), vu.product());
        for (a, b) in uv.difference().iter().zip(vu.difference()) {
            prop_assert_eq!(*a, -*b);
        }
        for i in 0..6 {
            prop_assert_eq!(uv.product()[i], u[i] * v[i]);
            prop_assert_eq!(uv.difference()[i], u[i] - v[i]);
        }
    }

    #[test]
    fn classify_returns_a_probability_vector(seed in 0u64..1000, u in vec_of(8), v in vec_of(8)) {
        let head = HeadWeights::new(&desk_head_dims(8), seed).unwrap();
        let pred = head.classify_embeddings(&u, &v).unwrap();
        prop_assert!((pred.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(pred.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn mapped_argmax_ignores_monotone_transforms(raw in prop::collection::vec(0.01..1.0f64, 3), k in 0.5..4.0f64) {
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let q: Vec<f64> = p.iter().map(|x| x.powf(k) * 7.0 + 1.0).collect();
        let (a, b) = (NliPrediction::from_probabilities(&p).unwrap(), NliPrediction::from_probabilities(&q).unwrap());
        for task in Task::ALL {
            for m in LabelMapping::variants(task) {
                prop_assert_eq!(map_prediction(&a, &m), map_prediction(&b, &m));
            }
        }
    }

    #[test]
    fn evaluate_invariants(pairs in prop::collection::vec((label(), label()), 1..60), rot in 0usize..60) {
        let (preds, golds): (Vec<NliLabel>, Vec<NliLabel>) = pairs.iter().cloned().unzip();
        let r = evaluate(&preds, &golds, &NliLabel::ALL).unwrap();
        let max = r.per_class_f1.iter().map(|c| c.f1).fold(0.0, f64::max);
        let min = r.per_class_f1.iter().map(|c| c.f1).fold(1.0, f64::min);
        prop_assert_eq!(r.min_f1, min);
        prop_assert!(r.min_f1 <= r.macro_avg_f1 && r.macro_avg_f1 <= max);
        prop_assert_eq!(r.confusion_matrix.iter().flatten().sum::<u64>(), pairs.len() as u64);
        let mut moved = pairs.clone();
        moved.rotate_left(rot % pairs.len());
        moved.reverse();
        let (p2, g2): (Vec<NliLabel>, Vec<NliLabel>) = moved.into_iter().unzip();
        prop_assert_eq!(evaluate(&p2, &g2, &NliLabel::ALL).unwrap(), r);
    }

    #[test]
    fn cipher_is_a_word_bijection(seed in 0u64..500, data_seed in 0u64..500) {
        let spec = CipherSpec::generate(seed, LEXICON.words()).unwrap();
        for ex in gen_synthetic_nli(data_seed, 30, 18).unwrap() {
            for s in [&ex.premise, &ex.hypothesis] {
                let c = spec.apply(s).unwrap();
                prop_assert_eq!(c.split_whitespace().count(), s.split_whitespace().count());
                prop_assert_eq!(&spec.decipher(&c).unwrap(), s);
            }
        }
    }

    #[test]
    fn balance_sample_is_exact_and_duplicate_free(seed in 0u64..1000, k in 1usize..6) {
        let data = gen_synthetic_absa(seed, 280).unwrap();
        let indexed: Vec<(usize, bool)> =
            data.iter().enumerate().map(|(i, e)| (i, e.topic == "cleanliness")).collect();
        let positives = indexed.iter().filter(|e| e.1).count();
        let sample = balance_sample(&indexed, |e| e.1, k, seed).unwrap();
        let negatives: Vec<usize> = sample.iter().filter(|e| !e.1).map(|e| e.0).collect();
        prop_assert_eq!(sample.len() - negatives.len(), positives);
        prop_assert_eq!(negatives.len(), k * positives);
        prop_assert_eq!(negatives.iter().collect::<HashSet<_>>().len(), negatives.len());
        prop_assert_eq!(balance_sample(&indexed, |e| e.1, k, seed).unwrap(), sample);
    }

    #[test]
    fn tensor_shapes_must_match_data(rows in 1usize..5, cols in 1usize..5, extra in 1usize..3) {
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols]).is_ok());
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols + extra]).is_err());
        let mut set = ParamSet::new(0);
        set.add("w", Tensor::zeros(vec![rows, cols]));
        prop_assert_eq!(set.tensors()[0].grad().unwrap().len(), rows * cols);
    }

    #[test]
    fn adam_steps_count_up_and_moments_match_shapes(steps in 1usize..6, n in 1usize..5) {
        let mut set = ParamSet::new(0);
        set.add("a", Tensor::zeros(vec![n, 2]));
        set.add("b", Tensor::zeros(vec![1, 3]));
        let hyper = TrainingHyperParams { accumulation_step: 1, ..TrainingHyperParams::paper_nli() };
        let mut opt = Optimizer::new(&[&set], hyper).unwrap();
        for step in 1..=steps {
            set.accumulate(&[Some(vec![0.5; 2 * n]), Some(vec![-1.0; 3])]).unwrap();
            prop_assert!(opt.micro_batch_done(&mut [&mut set]).unwrap());
            prop_assert_eq!(opt.state().step_count(), step as u64);
        }
        for moments in [opt.state().first_moment(), opt.state().second_moment()] {
            let lens: Vec<usize> = moments[0].iter().map(Vec::len).collect();
            prop_assert_eq!(lens, vec![2 * n, 3]);
        }
        prop_assert!(set.tensors().iter().all(Tensor::all_finite));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nli_records_round_trip(seed in 0u64..1000, n in 3usize..100) {
        let data: Vec<NliExample> = gen_synthetic_nli(seed, n, 18).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        save_nli(&path, &data).unwrap();
        prop_assert_eq!(load_nli(&path).unwrap(), data);
    }

    #[test]
    fn wide_checkpoints_round_trip_bit_exactly(seed in 0u64..1000) {
        let vocab = Vocabulary::from_tokens(LEXICON.words()).unwrap();
        let config = EncoderConfig { embed_dim: 8, num_layers: 1, num_heads: 2, ffn_dim: 16, ..Default::default() };
        let enc = Encoder::new(config, vocab, seed).unwrap();
        let ckpt = Checkpoint::from_encoder(&enc, seed);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(Storage::F64)).unwrap();
        prop_assert_eq!(&back, &ckpt);
        let narrow = Checkpoint::from_bytes(&ckpt.to_bytes(Storage::F32)).unwrap();
        prop_assert_eq!(Checkpoint::from_bytes(&narrow.to_bytes(Storage::F32)).unwrap(), narrow);
    }
}
