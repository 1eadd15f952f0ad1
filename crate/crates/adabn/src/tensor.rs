//! Dense N-dimensional arrays of f64 and the primitive math the layers are built on.
//!
//! Storage is a flat row-major `Vec<f64>` with an explicit shape. All public
//! operations keep two invariants: `product(shape) == data.len()` and every
//! element is finite.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} expects {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch between {left:?} and {right:?} in {op}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} needs a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("kernel {kernel:?} does not fit input {input:?}")]
    KernelTooLarge {
        input: Vec<usize>,
        kernel: Vec<usize>,
    },
    #[error("reduction axes {axes:?} invalid for shape {shape:?}: {reason}")]
    BadReduction {
        axes: Vec<usize>,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("zero extent in shape {shape:?}")]
    ZeroExtent { shape: Vec<usize> },
}

/// Dense row-major f64 array with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating extent/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some((i, &v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index: i, value: v });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        assert!(shape.iter().all(|&e| e > 0), "extents must be positive");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self, TensorError> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    fn require_rank(&self, op: &'static str, rank: usize) -> Result<(), TensorError> {
        if self.rank() != rank {
            return Err(TensorError::RankMismatch {
                op,
                expected: rank,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.require_rank("matmul", 2)?;
        other.require_rank("matmul", 2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        self.require_rank("transpose", 2)?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Valid (no padding) 2-D convolution with cross-correlation semantics:
    /// the kernel is not flipped.
    ///
    /// Input `[n, c, h, w]`, kernel `[o, c, kh, kw]`, output `[n, o, h', w']`
    /// with `h' = (h - kh) / stride + 1` (floor division) and likewise `w'`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
        self.require_rank("conv2d input", 4)?;
        kernel.require_rank("conv2d kernel", 4)?;
        assert!(stride > 0, "stride must be positive");
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (o, kc, kh, kw) = (
            kernel.shape[0],
            kernel.shape[1],
            kernel.shape[2],
            kernel.shape[3],
        );
        if kc != c {
            return Err(TensorError::DimensionMismatch {
                op: "conv2d channels",
                left: self.shape.clone(),
                right: kernel.shape.clone(),
            });
        }
        if kh > h || kw > w {
            return Err(TensorError::KernelTooLarge {
                input: self.shape.clone(),
                kernel: kernel.shape.clone(),
            });
        }
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for u in 0..kh {
                                let in_row = ((ni * c + ci) * h + i * stride + u) * w;
                                let k_row = ((oi * c + ci) * kh + u) * kw;
                                for v in 0..kw {
                                    acc += self.data[in_row + j * stride + v]
                                        * kernel.data[k_row + v];
                                }
                            }
                        }
                        out[((ni * o + oi) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, ho, wo], out)
    }

    /// Per-slice mean and population (1/N) variance, reducing over `axes`.
    ///
    /// The reduced axes are removed from the output shape. Variance is
    /// computed in two passes (mean first, then squared deviations).
    pub fn reduce_moments(&self, axes: &[usize]) -> Result<(Tensor, Tensor), TensorError> {
        if axes.is_empty() {
            return Err(TensorError::BadReduction {
                axes: axes.to_vec(),
                shape: self.shape.clone(),
                reason: "empty axis set",
            });
        }
        let mut seen = vec![false; self.rank()];
        for &a in axes {
            if a >= self.rank() {
                return Err(TensorError::BadReduction {
                    axes: axes.to_vec(),
                    shape: self.shape.clone(),
                    reason: "axis out of range",
                });
            }
            if seen[a] {
                return Err(TensorError::BadReduction {
                    axes: axes.to_vec(),
                    shape: self.shape.clone(),
                    reason: "duplicate axis",
                });
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen[*i])
            .map(|(_, &e)| e)
            .collect();
        let out_shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };
        let out_len: usize = out_shape.iter().product();
        let reduce_count: usize = self
            .shape
            .iter()
            .enumerate()
            .filter(|(i, _)| seen[*i])
            .map(|(_, &e)| e)
            .product();

        // Map each flat input index to its output slot once, reuse for both passes.
        let strides = self.strides();
        let kept: Vec<usize> = (0..self.rank()).filter(|i| !seen[*i]).collect();
        let mut out_strides = vec![1usize; kept.len()];
        for i in (0..kept.len().saturating_sub(1)).rev() {
            out_strides[i] = out_strides[i + 1] * self.shape[kept[i + 1]];
        }
        let slot_of = |flat: usize| -> usize {
            let mut slot = 0;
            for (pos, &axis) in kept.iter().enumerate() {
                let coord = (flat / strides[axis]) % self.shape[axis];
                slot += coord * out_strides[pos];
            }
            slot
        };

        let mut mean = vec![0.0; out_len];
        for (flat, &v) in self.data.iter().enumerate() {
            mean[slot_of(flat)] += v;
        }
        for m in &mut mean {
            *m /= reduce_count as f64;
        }
        let mut var = vec![0.0; out_len];
        for (flat, &v) in self.data.iter().enumerate() {
            let s = slot_of(flat);
            let d = v - mean[s];
            var[s] += d * d;
        }
        for v in &mut var {
            *v /= reduce_count as f64;
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok((Tensor::new(out_shape.clone(), mean)?, Tensor::new(out_shape, var)?))
    }

    /// View the tensor as an observations-by-features matrix for per-feature
    /// statistics: rank 2 is taken as `[n, p]`; rank 4 `[n, c, h, w]` treats
    /// each channel as a feature and yields `[n*h*w, c]`.
    pub fn feature_matrix(&self) -> Result<Tensor, TensorError> {
        match self.rank() {
            2 => Ok(self.clone()),
            4 => {
                let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
                let mut out = vec![0.0; n * h * w * c];
                let mut row = 0;
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            for ci in 0..c {
                                out[row * c + ci] = self.data[((ni * c + ci) * h + i) * w + j];
                            }
                            row += 1;
                        }
                    }
                }
                Tensor::new(vec![n * h * w, c], out)
            }
            _ => Err(TensorError::RankMismatch {
                op: "feature_matrix",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Number of features under batch-norm semantics (columns for rank 2,
    /// channels for rank 4).
    pub fn feature_count(&self) -> Result<usize, TensorError> {
        match self.rank() {
            2 | 4 => Ok(self.shape[1]),
            _ => Err(TensorError::RankMismatch {
                op: "feature_count",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::DimensionMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += alpha * other`, used by the SGD update.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::DimensionMismatch {
                op: "axpy",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (d, &g) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * g;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
