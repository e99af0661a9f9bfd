//! Integer matmul with dyadic requantization.
//!
//! A real multiplier `M = S_x·S_w/S_out` is represented as `M0·2^{−n}` with
//! `2^30 ≤ M0 < 2^31`. The multiplier is derived from the IEEE-754 bit
//! patterns of the scales with integer arithmetic only, so neither setup nor
//! the kernel performs a floating-point operation.

use super::{code_range, AffineParams, IntTensor};
use crate::error::{Error, Result};
use crate::flops;

const M0_MIN: u128 = 1 << 30;
const M0_LIMIT: u128 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DyadicMultiplier {
    pub m0: i64,
    /// Right shift; negative values mean a left shift (multipliers ≥ 1).
    pub shift: i32,
}

/// `v = mantissa · 2^exp` for a positive finite double.
fn decompose(v: f64) -> Option<(u128, i32)> {
    let bits = v.to_bits();
    if bits >> 63 != 0 {
        return None;
    }
    let exp_bits = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    match exp_bits {
        0x7ff => None,
        0 if frac == 0 => None,
        0 => Some((frac as u128, -1074)),
        e => Some(((frac | (1u64 << 52)) as u128, e - 1075)),
    }
}

fn bit_len(v: u128) -> i32 {
    128 - v.leading_zeros() as i32
}

/// `round(num · 2^s / den)`, half up. Operands stay well inside `u128`.
fn scaled_quotient(num: u128, den: u128, s: i32) -> u128 {
    let (a, b) = if s >= 0 { (num << s, den) } else { (num, den << -s) };
    (2 * a + b) / (2 * b)
}

impl DyadicMultiplier {
    pub fn from_scales(s_x: f64, s_w: f64, s_out: f64) -> Result<Self> {
        let bad = || Error::Config(format!("requantization scales must be positive and finite: {s_x}, {s_w}, {s_out}"));
        let (mx, ex) = decompose(s_x).ok_or_else(bad)?;
        let (mw, ew) = decompose(s_w).ok_or_else(bad)?;
        let (mo, eo) = decompose(s_out).ok_or_else(bad)?;
        let num = mx * mw;
        let e = ex + ew - eo;
        let mut s = 30 - (bit_len(num) - bit_len(mo));
        let mut q = scaled_quotient(num, mo, s);
        while q < M0_MIN {
            s += 1;
            q = scaled_quotient(num, mo, s);
        }
        while q >= M0_LIMIT {
            s -= 1;
            q = scaled_quotient(num, mo, s);
        }
        Ok(Self {
            m0: q as i64,
            shift: s - e,
        })
    }

    /// `round_half_away(acc · M0 · 2^{−shift})`.
    #[inline]
    pub fn apply(&self, acc: i64) -> i128 {
        shift_round(acc as i128 * self.m0 as i128, self.shift)
    }
}

/// `round_half_away(v · 2^{−n})`, saturating on left shifts.
#[inline]
pub(crate) fn shift_round(v: i128, n: i32) -> i128 {
    if n > 0 {
        if n >= 126 {
            return 0;
        }
        let mag = v.unsigned_abs();
        let r = ((mag + (1u128 << (n - 1))) >> n) as i128;
        if v < 0 {
            -r
        } else {
            r
        }
    } else {
        let left = (-n) as u32;
        if v == 0 {
            0
        } else if left >= v.unsigned_abs().leading_zeros() - 1 {
            if v < 0 {
                i128::MIN / 2
            } else {
                i128::MAX / 2
            }
        } else {
            v << left
        }
    }
}

fn check_matmul(x: &IntTensor, w: &IntTensor, bias: Option<&[i32]>) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::dim("int_matmul", x.shape(), w.shape()));
    }
    let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::dim("int_matmul bias", &[n], &[b.len()]));
        }
    }
    Ok((m, k, n))
}

/// Integer matmul `[m×k]·[k×n]` of activation codes (zero point `z_x`) and
/// symmetric weight codes, plus bias codes at scale `S_x·S_w`, requantized to
/// `out_bits` with zero point `z_out`. Integer arithmetic only.
pub fn int_matmul_requant_with(
    x_q: &IntTensor,
    w_q: &IntTensor,
    bias_q: Option<&[i32]>,
    z_x: i64,
    m: &DyadicMultiplier,
    z_out: i64,
    out_bits: u32,
) -> Result<IntTensor> {
    let (rows, k, n) = check_matmul(x_q, w_q, bias_q)?;
    if !(1..=32).contains(&out_bits) {
        return Err(Error::Config(format!("bit depth {out_bits} outside 1..=32")));
    }
    let max_x = x_q.data().iter().map(|&v| (v as i128 + z_x as i128).unsigned_abs()).max().unwrap_or(0);
    let max_w = w_q.data().iter().map(|&v| (v as i128).unsigned_abs()).max().unwrap_or(0);
    let max_b = bias_q.map_or(0, |b| b.iter().map(|&v| (v as i128).unsigned_abs()).max().unwrap_or(0));
    if max_x * max_w * k as u128 + max_b > i64::MAX as u128 {
        return Err(Error::Usage("integer accumulator would overflow 64 bits".into()));
    }
    let (lo, hi) = code_range(out_bits);
    let xd = x_q.data();
    let wd = w_q.data();
    let mut out = Vec::with_capacity(rows * n);
    let mut acc = vec![0i64; n];
    for i in 0..rows {
        match bias_q {
            Some(b) => acc.iter_mut().zip(b).for_each(|(a, &b)| *a = b as i64),
            None => acc.fill(0),
        }
        for p in 0..k {
            let xv = xd[i * k + p] as i64 + z_x;
            if xv == 0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&wd[p * n..(p + 1) * n]) {
                *a += xv * wv as i64;
            }
        }
        out.extend(acc.iter().map(|&a| {
            let y = m.apply(a) - z_out as i128;
            y.clamp(lo as i128, hi as i128) as i32
        }));
    }
    IntTensor::new(vec![rows, n], out)
}

/// [`int_matmul_requant_with`] with the multiplier derived from the three
/// parameter sets. Weight codes must be symmetric (`Z_w = 0`).
pub fn int_matmul_requant(
    x_q: &IntTensor,
    w_q: &IntTensor,
    bias_q: Option<&[i32]>,
    p_x: &AffineParams,
    p_w: &AffineParams,
    p_out: &AffineParams,
) -> Result<IntTensor> {
    if p_w.zero_point != 0 {
        return Err(Error::Config("weight zero point must be 0".into()));
    }
    let m = DyadicMultiplier::from_scales(p_x.scale, p_w.scale, p_out.scale)?;
    int_matmul_requant_with(x_q, w_q, bias_q, p_x.zero_point, &m, p_out.zero_point, p_out.bits)
}

/// Reference for the integer kernel: dequantize, multiply and requantize in `f64`.
pub fn float_sim_matmul_requant(
    x_q: &IntTensor,
    w_q: &IntTensor,
    bias_q: Option<&[i32]>,
    p_x: &AffineParams,
    p_w: &AffineParams,
    p_out: &AffineParams,
) -> Result<IntTensor> {
    let (rows, k, n) = check_matmul(x_q, w_q, bias_q)?;
    let xd: Vec<f64> = x_q.data().iter().map(|&v| p_x.dequantize_value(v as i64)).collect();
    let wd: Vec<f64> = w_q.data().iter().map(|&v| p_w.dequantize_value(v as i64)).collect();
    let bias_scale = p_x.scale * p_w.scale;
    let mut out = Vec::with_capacity(rows * n);
    for i in 0..rows {
        for j in 0..n {
            let mut y = bias_q.map_or(0.0, |b| b[j] as f64 * bias_scale);
            for p in 0..k {
                y += xd[i * k + p] * wd[p * n + j];
            }
            out.push(p_out.quantize_value(y) as i32);
        }
    }
    flops::record(x_q.len() + w_q.len() + rows * n * (2 * k + 4));
    IntTensor::new(vec![rows, n], out)
}
