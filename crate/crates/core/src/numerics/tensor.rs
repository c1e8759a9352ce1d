//! Dense row-major tensors.
//!
//! A `Tensor` is an immutable value: shape plus shared data. Gradient
//! bookkeeping lives in [`super::graph::Graph`], which records ops on these
//! values and replays them in reverse.

use std::sync::Arc;

use crate::elem::Elem;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Elem> PartialEq for Tensor<E> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl<E: Elem> Tensor<E> {
    /// Build from shape and row-major data. Extents must be positive and the
    /// data length must equal their product.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("tensor shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![E::zero(); numel]) }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![v; numel]) }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new((0..numel).map(&mut f).collect()) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::state(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[E] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Last-axis extent; the "feature" width for `[T, H]` activations.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    /// Cast elementwise to another precision.
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| F::from_f64(x.to_f64())).collect()),
        }
    }

    /// Error out if any element is NaN or infinite. `op` names the producer.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric(op, format!("non-finite value {v} at flat index {i}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Filled with draws from a truncated normal of the given std.
    pub fn randn_trunc(shape: Vec<usize>, std: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self::from_fn(shape, |_| E::from_f64(crate::rng::next_trunc_normal(rng, std)))
    }

    /// Filled with standard-normal draws.
    pub fn randn(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self::from_fn(shape, |_| E::from_f64(crate::rng::next_normal(rng)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let r = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn rejects_zero_extent() {
        let r = Tensor::<f64>::new(vec![2, 0], vec![]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn scalar_has_rank_zero() {
        let t = Tensor::scalar(3.0f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item().unwrap(), 3.0);
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::<f32>::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn finiteness_check_names_the_op() {
        let t = Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        match t.check_finite("softmax") {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "softmax"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
