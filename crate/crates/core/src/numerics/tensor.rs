//! Dense row-major tensors of rank 1 or 2.

use std::sync::Arc;

/// Scalar type the numerics are generic over.
///
/// `f32` is the training type; `f64` exists so gradient checks can run the
/// same graph code at a precision where central differences are trustworthy.
pub trait Real:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Immutable dense tensor. Clones are cheap: the buffer is shared.
///
/// Rank is 1 or 2 throughout this crate; row-major layout. Every entry must
/// be finite, which `debug_assert` enforces at construction so a NaN is
/// caught where it is produced rather than where it is consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} wants {} entries, got {}",
            shape,
            numel,
            data.len()
        );
        assert!(
            (1..=2).contains(&shape.len()),
            "only rank 1 and 2 supported, got shape {:?}",
            shape
        );
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite entry in tensor of shape {:?}",
            shape
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![F::zero(); numel])
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    /// Rank-1 tensor with a single entry; the shape used for loss values.
    pub fn scalar(value: F) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn vector(data: Vec<F>) -> Self {
        let n = data.len();
        Tensor::from_vec(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        Tensor::from_vec(vec![rows, cols], data)
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Rows of the tensor; a rank-1 tensor counts as a single row.
    pub fn n_rows(&self) -> usize {
        match self.rank() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Row length; for rank-1 this is the full length.
    pub fn n_cols(&self) -> usize {
        match self.rank() {
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.n_cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> F {
        assert_eq!(self.rank(), 2, "at2 on rank-{} tensor", self.rank());
        self.data[r * self.shape[1] + c]
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor with {} entries", self.numel());
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.to_f64()).collect()
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G) -> Tensor<G> {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_accepts_matching_shape() {
        let t = Tensor::matrix(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.at2(1, 2), 6.0);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "wants 6 entries")]
    fn from_vec_rejects_wrong_length() {
        let _ = Tensor::matrix(2, 3, vec![1.0f32, 2.0]);
    }

    #[test]
    #[should_panic(expected = "non-finite entry")]
    fn from_vec_rejects_nan_in_debug_builds() {
        let _ = Tensor::vector(vec![0.0f32, f32::NAN]);
    }

    #[test]
    #[should_panic(expected = "rank 1 and 2")]
    fn from_vec_rejects_rank_3() {
        let _ = Tensor::from_vec(vec![1, 1, 1], vec![1.0f32]);
    }

    #[test]
    fn scalar_has_shape_one() {
        let t = Tensor::scalar(2.5f64);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.item(), 2.5);
    }

    #[test]
    fn rank1_counts_as_single_row() {
        let t = Tensor::vector(vec![1.0f32, 2.0, 3.0]);
        assert_eq!(t.n_rows(), 1);
        assert_eq!(t.n_cols(), 3);
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0]);
    }
}
