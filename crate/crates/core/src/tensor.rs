//! Dense row-major tensors of rank 1-5.
//!
//! `Tensor` is the carrier for every image, feature map and density grid in
//! the pipeline. Values are stored as `f64` in memory; the on-disk format
//! (`t3dc`) stores `f32`. There is no broadcasting: every operation takes
//! explicit shapes and rejects mismatches.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?} in {context}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },
    #[error("unsupported rank {0} (tensors are rank 1-5)")]
    RankUnsupported(usize),
    #[error("dims {dims:?} with zero extent")]
    ZeroExtent { dims: Vec<usize> },
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { len: usize, dims: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

/// Dense N-dimensional value grid with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > 5 {
            return Err(TensorError::RankUnsupported(dims.len()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent { dims });
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                dims,
            });
        }
        Ok(Tensor {
            dims,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![0.0; n]).expect("zeros: invalid dims")
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![value; n]).expect("full: invalid dims")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Sum of all elements, accumulated pairwise-stable enough for our grids.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major flat offset of a rank-3 index.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn at4(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        debug_assert_eq!(self.rank(), 4);
        self.data[((i * self.dims[1] + j) * self.dims[2] + k) * self.dims[3] + l]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        debug_assert_eq!(self.rank(), 3);
        let idx = (i * self.dims[1] + j) * self.dims[2] + k;
        self.data[idx] = v;
    }

    pub fn set4(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        debug_assert_eq!(self.rank(), 4);
        let idx = ((i * self.dims[1] + j) * self.dims[2] + k) * self.dims[3] + l;
        self.data[idx] = v;
    }

    /// Reinterpret the buffer under new dims with the same element count.
    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.is_empty() || dims.len() > 5 {
            return Err(TensorError::ShapeMismatch {
                expected: self.dims.clone(),
                got: dims,
                context: "reshape".into(),
            });
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }
}

pub(crate) fn check_same_dims(a: &[usize], b: &[usize], context: &str) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            expected: a.to_vec(),
            got: b.to_vec(),
            context: context.into(),
        });
    }
    Ok(())
}
