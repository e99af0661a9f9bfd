//! Affine and two-range quantizers, integer kernels and quantized models.
//!
//! Codes follow `q = clamp(round(θ/S) − Z, −2^{b−1}, 2^{b−1}−1)` with
//! round-half-away-from-zero, and dequantize as `x̂ = (q + Z)·S`.

mod format;
mod kernel;
mod model;

pub use format::{load_quantized, qmodel_from_bytes, qmodel_to_bytes, save_quantized, QMODEL_MAGIC, QMODEL_VERSION};
pub use kernel::{
    float_sim_matmul_requant, int_matmul_requant, int_matmul_requant_with, DyadicMultiplier,
};
pub use model::{quantize_model, run_quantized, run_quantized_trace, QuantizedLayer, QuantizedModel, StoredWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{DType, Tensor};

/// Signed code range `[−2^{b−1}, 2^{b−1}−1]` for `bits` in `1..=32`.
pub fn code_range(bits: u32) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=32).contains(&bits) {
        return Err(Error::Config(format!("bit depth {bits} outside 1..=32")));
    }
    Ok(())
}

fn check_scale(what: &str, s: f64) -> Result<()> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Config(format!("{what} must be positive and finite, got {s}")));
    }
    Ok(())
}

/// Integer codes with a shape. Codes of any bit depth up to 32 fit the container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != data.len() {
            return Err(Error::Tensor(format!(
                "shape {shape:?} does not describe {} codes",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleDenominator {
    /// `S = (X^M − X^m) / 2^{b−1}`.
    #[default]
    Pow2Bm1,
    /// `S = (X^M − X^m) / (2^b − 1)`.
    Pow2BMinus1,
}

impl ScaleDenominator {
    pub fn value(self, bits: u32) -> f64 {
        match self {
            ScaleDenominator::Pow2Bm1 => (1u64 << (bits - 1)) as f64,
            ScaleDenominator::Pow2BMinus1 => ((1u64 << bits) - 1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bits: u32,
}

impl AffineParams {
    pub fn new(scale: f64, zero_point: i64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        check_scale("scale", scale)?;
        Ok(Self {
            scale,
            zero_point,
            bits,
        })
    }

    pub fn code_range(&self) -> (i64, i64) {
        code_range(self.bits)
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> i64 {
        let (lo, hi) = self.code_range();
        ((x / self.scale).round() - self.zero_point as f64).clamp(lo as f64, hi as f64) as i64
    }

    #[inline]
    pub fn dequantize_value(&self, q: i64) -> f64 {
        (q + self.zero_point) as f64 * self.scale
    }

    /// The same anchor `X^m` expressed with a different scale: the zero point
    /// is recomputed so that `x_min` still lands on the lowest code.
    pub fn rescaled(&self, scale: f64, x_min: f64) -> Result<Self> {
        check_scale("scale", scale)?;
        AffineParams::new(scale, anchored_zero_point(x_min, scale, self.bits), self.bits)
    }
}

fn anchored_zero_point(x_min: f64, scale: f64, bits: u32) -> i64 {
    (1i64 << (bits - 1)) + (x_min / scale).round() as i64
}

/// Elementwise affine quantization.
pub fn quantize(x: &Tensor, p: &AffineParams) -> IntTensor {
    flops::record(3 * x.len());
    let data = x.data().iter().map(|&v| p.quantize_value(v) as i32).collect();
    IntTensor {
        shape: x.shape().to_vec(),
        data,
    }
}

pub fn dequantize(q: &IntTensor, p: &AffineParams) -> Tensor {
    flops::record(q.len());
    let data = q.data.iter().map(|&c| p.dequantize_value(c as i64)).collect();
    Tensor::from_parts(q.shape.clone(), data, DType::F64)
}

/// Min-max activation parameters. `x_min` maps to the lowest code,
/// `S = (X^M − X^m)/D` where `D` is chosen by `denom`.
pub fn activation_params_minmax(x_min: f64, x_max: f64, bits: u32, denom: ScaleDenominator) -> Result<AffineParams> {
    check_bits(bits)?;
    if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
        return Err(Error::DegenerateRange {
            min: x_min,
            max: x_max,
            layer: None,
        });
    }
    let scale = (x_max - x_min) / denom.value(bits);
    check_scale("scale", scale)?;
    AffineParams::new(scale, anchored_zero_point(x_min, scale, bits), bits)
}

/// Symmetric weight parameters: `S = max|W| / 2^{b−1}`, `Z = 0`.
/// An all-zero tensor gets `S = 1`.
pub fn weight_params_symmetric(w: &Tensor, bits: u32) -> Result<AffineParams> {
    check_bits(bits)?;
    let m = w.max_abs();
    if !m.is_finite() {
        return Err(Error::Tensor("weights contain non-finite values".into()));
    }
    let scale = if m == 0.0 { 1.0 } else { m / (1u64 << (bits - 1)) as f64 };
    AffineParams::new(scale, 0, bits)
}

/// Separate scales for the negative and non-negative halves of a skewed
/// distribution. Both halves have zero point 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoRangeParams {
    /// `S_R1`, used for negative values.
    pub scale_neg: f64,
    /// `S_R2`, used for non-negative values.
    pub scale_pos: f64,
    pub bits: u32,
}

impl TwoRangeParams {
    pub fn new(scale_neg: f64, scale_pos: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if bits < 2 {
            return Err(Error::Config("two-range quantization needs at least 2 bits".into()));
        }
        check_scale("negative scale", scale_neg)?;
        check_scale("positive scale", scale_pos)?;
        Ok(Self {
            scale_neg,
            scale_pos,
            bits,
        })
    }

    /// Symmetric starting point `S_R1 = S_R2 = max|x| / 2^{b−1}`.
    pub fn symmetric_start(max_abs: f64, bits: u32) -> Result<Self> {
        if !(max_abs.is_finite() && max_abs > 0.0) {
            return Err(Error::DegenerateRange {
                min: -max_abs,
                max: max_abs,
                layer: None,
            });
        }
        let s = max_abs / (1u64 << (bits - 1)) as f64;
        Self::new(s, s, bits)
    }

    #[inline]
    pub fn quantize_value(&self, x: f64) -> i64 {
        let (lo, hi) = code_range(self.bits);
        if x < 0.0 {
            (x / self.scale_neg).round().clamp(lo as f64, 0.0) as i64
        } else {
            (x / self.scale_pos).round().clamp(0.0, hi as f64) as i64
        }
    }

    #[inline]
    pub fn dequantize_value(&self, q: i64) -> f64 {
        if q < 0 {
            q as f64 * self.scale_neg
        } else {
            q as f64 * self.scale_pos
        }
    }
}

/// Returns the codes and a mask that is `true` where the input was negative.
pub fn two_range_quantize(x: &Tensor, p: &TwoRangeParams) -> (IntTensor, Vec<bool>) {
    flops::record(2 * x.len());
    let mask = x.data().iter().map(|&v| v < 0.0).collect();
    let data = x.data().iter().map(|&v| p.quantize_value(v) as i32).collect();
    (
        IntTensor {
            shape: x.shape().to_vec(),
            data,
        },
        mask,
    )
}

pub fn two_range_dequantize(q: &IntTensor, p: &TwoRangeParams) -> Tensor {
    flops::record(q.len());
    let data = q.data.iter().map(|&c| p.dequantize_value(c as i64)).collect();
    Tensor::from_parts(q.shape.clone(), data, DType::F64)
}

/// How a layer's input is quantized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActParams {
    /// Left in floating point (32-bit activations).
    Float,
    Affine(AffineParams),
    TwoRange(TwoRangeParams),
}

impl ActParams {
    pub fn bits(&self) -> u32 {
        match self {
            ActParams::Float => 32,
            ActParams::Affine(p) => p.bits,
            ActParams::TwoRange(p) => p.bits,
        }
    }

    /// Quantize-dequantize in double precision, keeping the input dtype tag.
    pub fn fake_quant(&self, x: &Tensor) -> Tensor {
        let f: Box<dyn Fn(f64) -> f64> = match *self {
            ActParams::Float => return x.clone(),
            ActParams::Affine(p) => Box::new(move |v| p.dequantize_value(p.quantize_value(v))),
            ActParams::TwoRange(p) => Box::new(move |v| p.dequantize_value(p.quantize_value(v))),
        };
        flops::record(4 * x.len());
        x.map(f)
    }
}
