//! Dense row-major tensors of rank 1 to 3 over `f64`.
//!
//! Every reduction (dot products, matmul inner loops, row sums) accumulates
//! in ascending index order, so results are bit-reproducible across runs.

use std::fmt;

/// Highest rank a [`Tensor`] may have.
pub const MAX_RANK: usize = 3;

pub type TensorResult<T> = Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands had incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A construction asked for more than [`MAX_RANK`] dimensions.
    RankOverflow { rank: usize },
    /// An operation needed a specific rank and got something else.
    WrongRank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// Backing data length does not match the product of the dimensions.
    DataLength {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "shape mismatch in {op}: {left:?} vs {right:?}")
            }
            TensorError::RankOverflow { rank } => {
                write!(f, "rank {rank} exceeds the maximum of {MAX_RANK}")
            }
            TensorError::WrongRank { op, expected, got } => {
                write!(f, "{op} needs rank {expected}, got rank {got}")
            }
            TensorError::DataLength {
                dims,
                expected,
                got,
            } => {
                write!(f, "dims {dims:?} need {expected} values, got {got}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Row-major dense tensor, rank 1..=3, `f64` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Zero-filled tensor with the given dimensions.
    pub fn zeros(dims: &[usize]) -> TensorResult<Tensor> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(TensorError::RankOverflow { rank: dims.len() });
        }
        let n = dims.iter().product();
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Tensor wrapping `data` with the given dimensions.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> TensorResult<Tensor> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(TensorError::RankOverflow { rank: dims.len() });
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                dims: dims.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Tensor with independent `N(0, std²)` entries drawn in index order.
    pub fn gaussian<R: rand::Rng>(r: &mut R, dims: &[usize], std: f64) -> TensorResult<Tensor> {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(r);
                z * std
            })
            .collect();
        Tensor::from_vec(dims, data)
    }

    /// Rank-2 convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> TensorResult<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::DataLength {
                    dims: vec![r, c],
                    expected: r * c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(&[r, c], data)
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

    /// Number of rows of a rank-2 tensor (first dimension otherwise).
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dims[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dims[1] + j] = v;
    }

    /// Immutable view of row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.dims[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.dims[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> TensorResult<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "matmul",
                expected: 2,
                got: self.rank(),
            });
        }
        if other.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "matmul",
                expected: 2,
                got: other.rank(),
            });
        }
        let (m, k) = (self.dims[0], self.dims[1]);
        let (k2, n) = (other.dims[0], other.dims[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.dims.clone(),
                right: other.dims.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        // i-k-j loop order: each out[i][j] still accumulates over k in
        // ascending index order, but both operands are read contiguously.
        for i in 0..m {
            let lhs = &self.data[i * k..(i + 1) * k];
            let row = &mut out[i * n..(i + 1) * n];
            for (t, &l) in lhs.iter().enumerate() {
                let rhs = &other.data[t * n..(t + 1) * n];
                for (o, &r) in row.iter_mut().zip(rhs) {
                    *o += l * r;
                }
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> TensorResult<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "transpose",
                expected: 2,
                got: self.rank(),
            });
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(&[c, r], out)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn hadamard(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<Tensor> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.dims.clone(),
                right: other.dims.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(&self.dims, data)
    }

    /// In-place `self += scale * other`; shapes must match exactly.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> TensorResult<()> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch {
                op: "add_scaled",
                left: self.dims.clone(),
                right: other.dims.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// New tensor with every element scaled.
    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// Sum of all elements, accumulated in ascending index order.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-wise softmax of a rank-2 tensor.
    ///
    /// Each row is shifted by its maximum before exponentiation, so the
    /// result is invariant to adding a constant to a row and never overflows.
    pub fn softmax_rows(&self) -> TensorResult<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::WrongRank {
                op: "softmax_rows",
                expected: 2,
                got: self.rank(),
            });
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let dst = &mut out[i * c..(i + 1) * c];
            let mut denom = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *d = e;
                denom += e;
            }
            for d in dst.iter_mut() {
                *d /= denom;
            }
        }
        Tensor::from_vec(&[r, c], out)
    }
}

/// Dot product of two equal-length slices, accumulated in ascending order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
