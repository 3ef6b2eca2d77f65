//! Dense row-major array, the value type of every numeric intermediate.

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Dense n-dimensional array with positive extents and row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> DenseArray<T> {
    /// Build from explicit dims and data; `product(dims)` must equal `data.len()`.
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::ShapeMismatch {
                context: "DenseArray::from_vec",
                detail: format!("extents must be positive, got {dims:?}"),
            });
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                context: "DenseArray::from_vec",
                detail: format!("dims {dims:?} imply {n} elements, data has {}", data.len()),
            });
        }
        Ok(DenseArray {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        assert!(n > 0, "zero-sized array: {dims:?}");
        DenseArray {
            dims: dims.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(dims: &[usize], v: T) -> Self {
        let mut a = Self::zeros(dims);
        a.data.fill(v);
        a
    }

    /// One-element array holding a scalar.
    pub fn scalar(v: T) -> Self {
        DenseArray {
            dims: vec![1],
            data: vec![v],
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows of a rank-2 array.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs rank 2, got {:?}", self.dims);
        self.dims[0]
    }

    /// Columns of a rank-2 array.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs rank 2, got {:?}", self.dims);
        self.dims[1]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        let cols = self.cols();
        self.data[r * cols + c]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> T {
        assert_eq!(self.rank(), 3);
        let (d1, d2) = (self.dims[1], self.dims[2]);
        self.data[(i * d1 + j) * d2 + k]
    }

    /// Same data, new dims (element count must match).
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) || n != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "DenseArray::reshape",
                detail: format!("cannot view {:?} as {dims:?}", self.dims),
            });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Copy of the leading-axis slice `lo..hi`.
    pub fn slice_axis0(&self, lo: usize, hi: usize) -> Self {
        assert!(lo < hi && hi <= self.dims[0], "slice {lo}..{hi} of {:?}", self.dims);
        let stride: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = hi - lo;
        DenseArray {
            dims,
            data: self.data[lo * stride..hi * stride].to_vec(),
        }
    }

    /// Gather leading-axis entries at `idx` (duplicates allowed).
    pub fn gather_axis0(&self, idx: &[usize]) -> Self {
        assert!(!idx.is_empty());
        let stride: usize = self.dims[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            assert!(i < self.dims[0], "index {i} out of {:?}", self.dims);
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        DenseArray { dims, data }
    }

    /// Error if any entry is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Elementwise conversion to another scalar type (via f64).
    pub fn cast<U: Real>(&self) -> DenseArray<U> {
        DenseArray {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&v| real::<U>(v.to_f64().expect("finite cast")))
                .collect(),
        }
    }

    /// Max absolute difference to another array of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}
