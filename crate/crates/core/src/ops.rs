//! Forward-only entry points for the differentiable primitives, for callers
//! that hold plain tensors rather than a tape.

use crate::autodiff::Tape;
use crate::error::Result;
use crate::tensor::Tensor;

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.input(x.clone(), false);
    let y = tape.gelu(v)?;
    Ok(tape.value(y).clone())
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.input(logits.clone(), false);
    let y = tape.softmax(v)?;
    Ok(tape.value(y).clone())
}

pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.input(a.clone(), false), tape.input(b.clone(), false));
    let y = tape.mse(va, vb)?;
    Ok(tape.value(y).data()[0])
}

pub fn cross_entropy(probabilities: &Tensor, gold_class: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.input(probabilities.clone(), false);
    let y = tape.cross_entropy(p, gold_class)?;
    Ok(tape.value(y).data()[0])
}
