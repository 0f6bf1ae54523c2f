use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kdnli::autodiff::Tape;
use kdnli::head::{combine_slices, desk_head_dims, HeadWeights};
use kdnli::tensor::Tensor;

fn erf(x: f64) -> f64 {
    // Maclaurin series; converges quickly for the |x| seen here.
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn straight_line_head(head: &HeadWeights, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    for l in 0..6 {
        let w = head
            .params()
            .iter()
            .find(|(n, _)| *n == format!("head.{l}.weight"))
            .unwrap()
            .1;
        let b = head
            .params()
            .iter()
            .find(|(n, _)| *n == format!("head.{l}.bias"))
            .unwrap()
            .1;
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        assert_eq!(fan_in, x.len());
        let mut y = vec![0.0; fan_out];
        for (o, yo) in y.iter_mut().enumerate() {
            let mut acc = b.data()[o];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data()[i * fan_out + o];
            }
            *yo = gelu(acc);
        }
        x = y;
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn head_matches_layer_by_layer_oracle() {
    for (seed, d) in [(1u64, 8usize), (2, 16), (3, 64)] {
        let head = HeadWeights::new(&desk_head_dims(d), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let features = combine_slices(&u, &v).unwrap();
        let got = head.classify(&features).unwrap().probabilities;
        let want = straight_line_head(&head, features.values());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "d={d}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn mean_pooling_matches_loop_oracle() {
    let d = 5;
    let rows: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
    for mask in [
        [true, true, true],
        [true, false, true],
        [false, true, false],
    ] {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(3, d, rows.clone()).unwrap(), false);
        let pooled = tape.masked_mean_rows(x, &mask).unwrap();
        let got = tape.value(pooled).data().to_vec();
        let kept = mask.iter().filter(|&&m| m).count() as f64;
        for c in 0..d {
            let mut sum = 0.0;
            for r in 0..3 {
                if mask[r] {
                    sum += rows[r * d + c];
                }
            }
            assert_eq!(got[c], sum / kept, "column {c} under {mask:?}");
        }
    }
}
