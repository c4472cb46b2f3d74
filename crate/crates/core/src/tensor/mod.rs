//! Dense row-major tensors and a recorded computation graph for
//! reverse-mode differentiation.
//!
//! Storage is generic over [`Scalar`]: models train in `f32`, while gradient
//! checks run the identical code path in `f64`. Every primitive the
//! classification models need (convolution, pooling, batch normalization,
//! dense layers, dropout, the softmax cross-entropy loss) lives here as a
//! graph operation with a hand-written backward rule.

mod conv;
mod graph;
pub mod io;
mod norm;
mod ops;
mod pool;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};
use thiserror::Error;

pub use conv::{conv_output_extent, ConvAlgo, ConvGeometry};
pub use graph::{Gradient, Gradients, Graph, ReluRule, Var};
pub use norm::BatchStats;
pub use pool::PoolGeometry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("drop probability {0} outside [0, 1)")]
    InvalidDropProbability(f64),
    #[error("batch normalization in train mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("tensor is not reachable from the differentiated output")]
    DisconnectedTensor,
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed tensor archive: {0}")]
    Format(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Floating-point element type of a tensor.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Default + Debug + Sum + Send + Sync + 'static
{
    /// Row-major `c = op(a) * op(b) (+ c)` where `op(a)` is `m x k` and
    /// `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn gemm_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // Logical matrix is rows x cols; memory holds it (or its transpose) row-major.
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_transposed);
                let (rsb, csb) = gemm_strides(k, n, b_transposed);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every access implied by the
                // dimensions and strides.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// N-dimensional dense array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} holds {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a scalar or one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f32>::zeros(&[2, 3]).numel(), 6);
    }

    #[test]
    fn gemm_matches_manual_product_in_all_transpositions() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let expect = [58.0, 64.0, 139.0, 154.0];
        let mut c = [0.0; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, expect);

        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c = [1.0; 4];
        f64::gemm(2, 3, 2, &at, true, &bt, true, &mut c, true);
        assert_eq!(c, [59.0, 65.0, 140.0, 155.0]);
    }

    #[test]
    fn cast_round_trips_representable_values() {
        let t = Tensor::<f32>::new(vec![3], vec![0.5, -1.25, 3.0]).unwrap();
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }
}
