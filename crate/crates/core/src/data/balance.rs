use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Keeps every positive example and draws `k` negatives per positive,
/// uniformly without replacement. The result is shuffled.
pub fn balance_sample<T: Clone>(
    dataset: &[T],
    is_positive: impl Fn(&T) -> bool,
    k: usize,
    seed: u64,
) -> Result<Vec<T>> {
    if k == 0 {
        return Err(Error::Argument("ratio 1:k needs k >= 1".into()));
    }
    let (positives, negatives): (Vec<&T>, Vec<&T>) = dataset.iter().partition(|x| is_positive(x));
    if positives.is_empty() {
        return Err(Error::data("no positive examples to balance"));
    }
    let needed = positives.len() * k;
    if negatives.len() < needed {
        return Err(Error::data(format!(
            "ratio 1:{k} needs {needed} negatives, have {} (short by {})",
            negatives.len(),
            needed - negatives.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, negatives.len(), needed).into_vec();
    picked.sort_unstable();
    let mut out: Vec<T> = positives.into_iter().cloned().collect();
    out.extend(picked.into_iter().map(|i| negatives[i].clone()));
    out.shuffle(&mut rng);
    Ok(out)
}
