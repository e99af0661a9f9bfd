//! Dense row-major tensors.
//!
//! Values are always held as `f64`. The dtype tag records the precision the
//! values are representable in: operations on `F32` tensors accumulate in
//! `f64` and round each result element to the nearest `f32`, so model
//! inference behaves like single precision while reference computations
//! stay in double precision.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// The common precision of two operands: single precision wins.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F32 || other == DType::F32 {
            DType::F32
        } else {
            DType::F64
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    dtype: DType,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &self.dtype)
            .field("data", &&self.data[..self.data.len().min(16)])
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Tensor("shape must have at least one dimension".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Tensor(format!("zero-sized dimension in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Tensor(format!(
            "shape {shape:?} holds {n} elements but {len} were given"
        )));
    }
    Ok(())
}

impl Tensor {
    /// A double-precision tensor.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    /// Builds a tensor, rounding `data` to the precision of `dtype`.
    pub fn with_dtype(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Result<Self> {
        check_shape(&shape, data.len())?;
        let data: Vec<f64> = match dtype {
            DType::F64 => data,
            DType::F32 => data.into_iter().map(|v| v as f32 as f64).collect(),
        };
        Ok(Self {
            shape,
            data: data.into(),
            dtype,
        })
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: data.iter().map(|&v| v as f64).collect(),
            dtype: DType::F32,
        })
    }

    /// Internal constructor for kernels that already produced correctly sized,
    /// already rounded data.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
            dtype,
        }
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Result<Self> {
        let n = shape.iter().product();
        Self::with_dtype(shape, vec![0.0; n], dtype)
    }

    pub fn full(shape: Vec<usize>, value: f64, dtype: DType) -> Result<Self> {
        let n = shape.iter().product();
        Self::with_dtype(shape, vec![value; n], dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Re-tags the tensor. Narrowing to `F32` rounds every element.
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype {
            return self.clone();
        }
        match dtype {
            // f32 values are exactly representable in f64: share the buffer.
            DType::F64 => Tensor {
                shape: self.shape.clone(),
                data: Arc::clone(&self.data),
                dtype,
            },
            DType::F32 => Tensor::from_parts(
                self.shape.clone(),
                self.data.iter().map(|&v| v as f32 as f64).collect(),
                dtype,
            ),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        check_shape(&shape, self.len())
            .map_err(|_| Error::dim("reshape", &self.shape, &shape))?;
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            dtype: self.dtype,
        })
    }

    /// Element-wise map, result rounded to this tensor's precision.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let dtype = self.dtype;
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| dtype.round(f(v))).collect(),
            dtype,
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        crate::flops::record(self.len());
        self.map(|v| v * c)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Index of the maximum along the last axis for each row of a 2-D tensor.
    /// Ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.ndim() != 2 {
            return Err(Error::Tensor(format!(
                "argmax_rows expects a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}
