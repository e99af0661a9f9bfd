//! Forward kernels and their vector-Jacobian products.
//!
//! Every kernel accumulates in `f64`; the output precision is the promoted
//! dtype of the inputs. Each `*_vjp` returns gradients with respect to the
//! kernel inputs in double precision.

use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::{DType, Tensor};

fn promote(ts: &[&Tensor]) -> DType {
    ts.iter().fold(DType::F64, |d, t| d.promote(t.dtype()))
}

fn expect_ndim(op: &'static str, t: &Tensor, ndim: usize) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::Tensor(format!(
            "{op} expects a {ndim}-D tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn f64_tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape, data, DType::F64)
}

fn finish(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Tensor {
    if dtype == DType::F32 {
        for v in &mut data {
            *v = *v as f32 as f64;
        }
    }
    Tensor::from_parts(shape, data, dtype)
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

/// `[m×k] × [k×n] → [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    flops::record(2 * m * k * n);
    Ok(finish(vec![m, n], out, promote(&[a, b])))
}

pub fn matmul_vjp(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let a64 = a.to_dtype(DType::F64);
    let b64 = b.to_dtype(DType::F64);
    let g64 = grad.to_dtype(DType::F64);
    let ga = matmul(&g64, &transpose(&b64)?)?;
    let gb = matmul(&transpose(&a64)?, &g64)?;
    Ok((ga, gb))
}

/// `x[t×in] · wᵀ + b` with `w[out×in]` and optional `b[out]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let (t, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(Error::dim("linear bias", w.shape(), b.shape()));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; t * fout];
    for i in 0..t {
        let xrow = &xd[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let wrow = &wd[o * fin..(o + 1) * fin];
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            out[i * fout + o] = acc;
        }
    }
    flops::record(2 * t * fin * fout);
    let mut parts = vec![x, w];
    if let Some(b) = bias {
        parts.push(b);
    }
    Ok(finish(vec![t, fout], out, promote(&parts)))
}

/// Gradients of [`linear`] with respect to `(x, w, b)`.
pub fn linear_vjp(x: &Tensor, w: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (t, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    if grad.shape() != [t, fout] {
        return Err(Error::dim("linear_vjp", &[t, fout], grad.shape()));
    }
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    let mut gx = vec![0.0; t * fin];
    let mut gw = vec![0.0; fout * fin];
    let mut gb = vec![0.0; fout];
    for i in 0..t {
        for o in 0..fout {
            let g = gd[i * fout + o];
            gb[o] += g;
            for c in 0..fin {
                gx[i * fin + c] += g * wd[o * fin + c];
                gw[o * fin + c] += g * xd[i * fin + c];
            }
        }
    }
    flops::record(4 * t * fin * fout);
    Ok((
        f64_tensor(vec![t, fin], gx),
        f64_tensor(vec![fout, fin], gw),
        f64_tensor(vec![fout], gb),
    ))
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

/// Output length of a valid (unpadded) 1-D convolution.
pub fn conv1d_out_len(t: usize, k: usize, stride: usize) -> Option<usize> {
    if stride == 0 || k == 0 || t < k {
        None
    } else {
        Some((t - k) / stride + 1)
    }
}

/// Valid cross-correlation: `x[c_in×t]`, `w[c_out×c_in×k]` → `[c_out×t']`.
pub fn conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 3 || x.shape()[0] != w.shape()[1] {
        return Err(Error::dim("conv1d", x.shape(), w.shape()));
    }
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let tout = conv1d_out_len(t, k, stride).ok_or_else(|| Error::dim("conv1d", x.shape(), w.shape()))?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim("conv1d bias", w.shape(), b.shape()));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; cout * tout];
    for o in 0..cout {
        let b = bias.map_or(0.0, |b| b.data()[o]);
        for p in 0..tout {
            let start = p * stride;
            let mut acc = b;
            for c in 0..cin {
                let xrow = &xd[c * t + start..c * t + start + k];
                let wrow = &wd[(o * cin + c) * k..(o * cin + c + 1) * k];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
            }
            out[o * tout + p] = acc;
        }
    }
    flops::record(2 * cout * tout * cin * k);
    let mut parts = vec![x, w];
    if let Some(b) = bias {
        parts.push(b);
    }
    Ok(finish(vec![cout, tout], out, promote(&parts)))
}

/// Gradients of [`conv1d`] with respect to `(x, w, b)`.
pub fn conv1d_vjp(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let tout = conv1d_out_len(t, k, stride).ok_or_else(|| Error::dim("conv1d_vjp", x.shape(), w.shape()))?;
    if grad.shape() != [cout, tout] {
        return Err(Error::dim("conv1d_vjp", &[cout, tout], grad.shape()));
    }
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    let mut gx = vec![0.0; cin * t];
    let mut gw = vec![0.0; cout * cin * k];
    let mut gb = vec![0.0; cout];
    for o in 0..cout {
        for p in 0..tout {
            let g = gd[o * tout + p];
            gb[o] += g;
            let start = p * stride;
            for c in 0..cin {
                for j in 0..k {
                    gx[c * t + start + j] += g * wd[(o * cin + c) * k + j];
                    gw[(o * cin + c) * k + j] += g * xd[c * t + start + j];
                }
            }
        }
    }
    flops::record(4 * cout * tout * cin * k);
    Ok((
        f64_tensor(vec![cin, t], gx),
        f64_tensor(vec![cout, cin, k], gw),
        f64_tensor(vec![cout], gb),
    ))
}

// ---------------------------------------------------------------------------
// element-wise
// ---------------------------------------------------------------------------

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    flops::record(x.len() * 8);
    x.map(gelu_scalar)
}

pub fn gelu_vjp(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if x.shape() != grad.shape() {
        return Err(Error::dim("gelu_vjp", x.shape(), grad.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| g * (normal_cdf(v) + v * normal_pdf(v)))
        .collect();
    flops::record(x.len() * 12);
    Ok(f64_tensor(x.shape().to_vec(), data))
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    flops::record(a.len());
    Ok(finish(a.shape().to_vec(), data, promote(&[a, b])))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("mul", a, b, |x, y| x * y)
}

/// Adds `bias[c]` to every element of channel `c`, where channels run along `axis`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() || bias.shape() != [x.shape()[axis]] {
        return Err(Error::dim("add_channel_bias", x.shape(), bias.shape()));
    }
    let n = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let bd = bias.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bd[(i / inner) % n])
        .collect();
    flops::record(x.len());
    Ok(finish(x.shape().to_vec(), data, promote(&[x, bias])))
}

// ---------------------------------------------------------------------------
// structural
// ---------------------------------------------------------------------------

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    expect_ndim("transpose", x, 2)?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out, x.dtype()))
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

fn axis_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(Error::Tensor(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, n, inner) = axis_geometry(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let m = (0..n).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..n {
                let e = (xd[idx(i)] - m).exp();
                out[idx(i)] = e;
                z += e;
            }
            for i in 0..n {
                out[idx(i)] /= z;
            }
        }
    }
    flops::record(x.len() * 4);
    Ok(finish(x.shape().to_vec(), out, x.dtype()))
}

/// Gradient of softmax given its output `y`.
pub fn softmax_vjp(y: &Tensor, axis: usize, grad: &Tensor) -> Result<Tensor> {
    if y.shape() != grad.shape() || axis >= y.ndim() {
        return Err(Error::dim("softmax_vjp", y.shape(), grad.shape()));
    }
    let (outer, n, inner) = axis_geometry(y.shape(), axis);
    let (yd, gd) = (y.data(), grad.data());
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let dot: f64 = (0..n).map(|i| gd[idx(i)] * yd[idx(i)]).sum();
            for i in 0..n {
                gx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
            }
        }
    }
    flops::record(y.len() * 4);
    Ok(f64_tensor(y.shape().to_vec(), gx))
}

// ---------------------------------------------------------------------------
// layernorm
// ---------------------------------------------------------------------------

/// Normalizes the last axis to zero mean and unit variance, then applies `γ·x̂ + β`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().expect("tensors have at least one axis");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim("layernorm", x.shape(), gamma.shape()));
    }
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) * rstd * gd[i] + bd[i]);
        }
    }
    flops::record(x.len() * 8);
    Ok(finish(x.shape().to_vec(), out, promote(&[x, gamma, beta])))
}

/// Gradients of [`layernorm`] with respect to `(x, γ, β)`.
pub fn layernorm_vjp(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if x.shape() != grad.shape() {
        return Err(Error::dim("layernorm_vjp", x.shape(), grad.shape()));
    }
    let d = *x.shape().last().expect("tensors have at least one axis");
    let gam = gamma.data();
    let mut gx = Vec::with_capacity(x.len());
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    for (row, grow) in x.data().chunks(d).zip(grad.data().chunks(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
        let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(g, w)| g * w).collect();
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            gx.push(rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx));
            ggamma[i] += grow[i] * xhat[i];
            gbeta[i] += grow[i];
        }
    }
    flops::record(x.len() * 14);
    Ok((
        f64_tensor(x.shape().to_vec(), gx),
        f64_tensor(vec![d], ggamma),
        f64_tensor(vec![d], gbeta),
    ))
}

// ---------------------------------------------------------------------------
// multi-head attention pieces
// ---------------------------------------------------------------------------

fn head_dim(op: &'static str, q: &Tensor, heads: usize) -> Result<usize> {
    expect_ndim(op, q, 2)?;
    let hidden = q.shape()[1];
    if heads == 0 || hidden % heads != 0 {
        return Err(Error::Tensor(format!(
            "{op}: hidden size {hidden} not divisible by {heads} heads"
        )));
    }
    Ok(hidden / heads)
}

/// Scaled dot-product scores: `q[t×h]`, `k[t×h]` → `[heads×t×t]`.
pub fn attn_scores(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    if q.shape() != k.shape() {
        return Err(Error::dim("attn_scores", q.shape(), k.shape()));
    }
    let d = head_dim("attn_scores", q, heads)?;
    let (t, hidden) = (q.shape()[0], q.shape()[1]);
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut out = vec![0.0; heads * t * t];
    for h in 0..heads {
        for i in 0..t {
            let qi = &qd[i * hidden + h * d..i * hidden + (h + 1) * d];
            for j in 0..t {
                let kj = &kd[j * hidden + h * d..j * hidden + (h + 1) * d];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                out[(h * t + i) * t + j] = dot * scale;
            }
        }
    }
    flops::record(2 * heads * t * t * d);
    Ok(finish(vec![heads, t, t], out, promote(&[q, k])))
}

pub fn attn_scores_vjp(q: &Tensor, k: &Tensor, heads: usize, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = head_dim("attn_scores_vjp", q, heads)?;
    let (t, hidden) = (q.shape()[0], q.shape()[1]);
    if grad.shape() != [heads, t, t] {
        return Err(Error::dim("attn_scores_vjp", &[heads, t, t], grad.shape()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, gd) = (q.data(), k.data(), grad.data());
    let mut gq = vec![0.0; t * hidden];
    let mut gk = vec![0.0; t * hidden];
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let g = gd[(h * t + i) * t + j] * scale;
                for c in h * d..(h + 1) * d {
                    gq[i * hidden + c] += g * kd[j * hidden + c];
                    gk[j * hidden + c] += g * qd[i * hidden + c];
                }
            }
        }
    }
    flops::record(4 * heads * t * t * d);
    Ok((f64_tensor(vec![t, hidden], gq), f64_tensor(vec![t, hidden], gk)))
}

/// Attention-weighted values: `p[heads×t×t]`, `v[t×h]` → `[t×h]`.
pub fn attn_context(p: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let d = head_dim("attn_context", v, heads)?;
    let (t, hidden) = (v.shape()[0], v.shape()[1]);
    if p.shape() != [heads, t, t] {
        return Err(Error::dim("attn_context", p.shape(), v.shape()));
    }
    let (pd, vd) = (p.data(), v.data());
    let mut out = vec![0.0; t * hidden];
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let w = pd[(h * t + i) * t + j];
                for c in h * d..(h + 1) * d {
                    out[i * hidden + c] += w * vd[j * hidden + c];
                }
            }
        }
    }
    flops::record(2 * heads * t * t * d);
    Ok(finish(vec![t, hidden], out, promote(&[p, v])))
}

pub fn attn_context_vjp(p: &Tensor, v: &Tensor, heads: usize, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = head_dim("attn_context_vjp", v, heads)?;
    let (t, hidden) = (v.shape()[0], v.shape()[1]);
    if grad.shape() != [t, hidden] {
        return Err(Error::dim("attn_context_vjp", &[t, hidden], grad.shape()));
    }
    let (pd, vd, gd) = (p.data(), v.data(), grad.data());
    let mut gp = vec![0.0; heads * t * t];
    let mut gv = vec![0.0; t * hidden];
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let w = pd[(h * t + i) * t + j];
                let mut acc = 0.0;
                for c in h * d..(h + 1) * d {
                    acc += gd[i * hidden + c] * vd[j * hidden + c];
                    gv[j * hidden + c] += w * gd[i * hidden + c];
                }
                gp[(h * t + i) * t + j] = acc;
            }
        }
    }
    flops::record(4 * heads * t * t * d);
    Ok((f64_tensor(vec![heads, t, t], gp), f64_tensor(vec![t, hidden], gv)))
}

// ---------------------------------------------------------------------------
// Op: a recordable operation
// ---------------------------------------------------------------------------

/// One differentiable operation, carrying any parameters it closes over.
#[derive(Debug, Clone)]
pub enum Op {
    Linear { weight: Tensor, bias: Option<Tensor> },
    Conv1d { weight: Tensor, bias: Option<Tensor>, stride: usize },
    Gelu,
    Softmax { axis: usize },
    LayerNorm { gamma: Tensor, beta: Tensor, eps: f64 },
    Add,
    Mul,
    Transpose,
    Reshape { shape: Vec<usize> },
    AttnScores { heads: usize },
    AttnContext { heads: usize },
}

impl Op {
    pub fn arity(&self) -> usize {
        match self {
            Op::Add | Op::Mul | Op::AttnScores { .. } | Op::AttnContext { .. } => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Linear { .. } => "linear",
            Op::Conv1d { .. } => "conv1d",
            Op::Gelu => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Transpose => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::AttnScores { .. } => "attn_scores",
            Op::AttnContext { .. } => "attn_context",
        }
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        if n != self.arity() {
            return Err(Error::Usage(format!(
                "{} takes {} inputs, got {n}",
                self.name(),
                self.arity()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.check_arity(inputs.len())?;
        let x = inputs[0];
        match self {
            Op::Linear { weight, bias } => linear(x, weight, bias.as_ref()),
            Op::Conv1d { weight, bias, stride } => conv1d(x, weight, bias.as_ref(), *stride),
            Op::Gelu => Ok(gelu(x)),
            Op::Softmax { axis } => softmax(x, *axis),
            Op::LayerNorm { gamma, beta, eps } => layernorm(x, gamma, beta, *eps),
            Op::Add => add(x, inputs[1]),
            Op::Mul => mul(x, inputs[1]),
            Op::Transpose => transpose(x),
            Op::Reshape { shape } => x.reshape(shape.clone()),
            Op::AttnScores { heads } => attn_scores(x, inputs[1], *heads),
            Op::AttnContext { heads } => attn_context(x, inputs[1], *heads),
        }
    }

    /// Gradients with respect to each input, given the forward inputs,
    /// the forward output and the upstream gradient.
    pub fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        self.check_arity(inputs.len())?;
        let x = inputs[0];
        let g = &grad.to_dtype(DType::F64);
        Ok(match self {
            Op::Linear { weight, .. } => vec![linear_vjp(x, weight, g)?.0],
            Op::Conv1d { weight, stride, .. } => vec![conv1d_vjp(x, weight, *stride, g)?.0],
            Op::Gelu => vec![gelu_vjp(x, g)?],
            Op::Softmax { axis } => vec![softmax_vjp(output, *axis, g)?],
            Op::LayerNorm { gamma, eps, .. } => vec![layernorm_vjp(x, gamma, *eps, g)?.0],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Mul => vec![mul(g, &inputs[1].to_dtype(DType::F64))?, mul(g, &x.to_dtype(DType::F64))?],
            Op::Transpose => vec![transpose(g)?],
            Op::Reshape { .. } => vec![g.reshape(x.shape().to_vec())?],
            Op::AttnScores { heads } => {
                let (gq, gk) = attn_scores_vjp(x, inputs[1], *heads, g)?;
                vec![gq, gk]
            }
            Op::AttnContext { heads } => {
                let (gp, gv) = attn_context_vjp(x, inputs[1], *heads, g)?;
                vec![gp, gv]
            }
        })
    }
}
