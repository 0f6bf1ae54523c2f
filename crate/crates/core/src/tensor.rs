//! Dense row-major tensors and named parameter sets.

use crate::error::{Error, Result};

/// Dense real-valued array in row-major order.
///
/// Parameters carry `requires_grad = true` and a gradient buffer of the same
/// length once [`Tensor::zero_grad`] has been called.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Rows and columns, viewing a 1-D tensor as a single row and a scalar as 1×1.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            dims => {
                let last = *dims.last().unwrap();
                (self.data.len() / last.max(1), last)
            }
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Resets the gradient buffer to zeros (allocating it when absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape and values, without gradient state.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
///
/// `slot` tells the tape which gradient bucket the set's parameters land in,
/// so several sets (encoder and head) can share one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    slot: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(slot: usize) -> Self {
        Self {
            slot,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(true);
        tensor.zero_grad();
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Marks every tensor as frozen (no gradient buffer) or trainable.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in &mut self.tensors {
            t.set_requires_grad(trainable);
            if trainable {
                t.zero_grad();
            }
        }
    }

    /// Adds per-parameter gradients (indexed like the set) into the buffers.
    pub fn accumulate(&mut self, grads: &[Option<Vec<f64>>]) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let t = self.tensors.get_mut(i).ok_or_else(|| {
                Error::OptimizerState(format!("gradient for unknown parameter {i}"))
            })?;
            if !t.requires_grad {
                continue;
            }
            if g.len() != t.len() {
                return Err(Error::shape(format!(
                    "gradient length {} for parameter {:?} of length {}",
                    g.len(),
                    self.names[i],
                    t.len()
                )));
            }
            let buf = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Bitwise equality of every value (gradients ignored).
    pub fn same_values(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape == b.shape
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Largest absolute value difference against a set with the same layout.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_has_same_length() {
        let mut set = ParamSet::new(0);
        let id = set.add("w", Tensor::zeros(vec![3, 4]));
        assert_eq!(set.get(id).grad().unwrap().len(), 12);
        set.accumulate(&[Some(vec![1.0; 12])]).unwrap();
        set.accumulate(&[Some(vec![1.0; 12])]).unwrap();
        assert!(set.get(id).grad().unwrap().iter().all(|&g| g == 2.0));
        assert!(set.accumulate(&[Some(vec![1.0; 11])]).is_err());
    }

    #[test]
    fn rows_cols_views() {
        assert_eq!(Tensor::scalar(1.0).rows_cols(), (1, 1));
        assert_eq!(Tensor::vector(vec![1.0; 4]).rows_cols(), (1, 4));
        assert_eq!(Tensor::zeros(vec![3, 2]).rows_cols(), (3, 2));
    }
}
