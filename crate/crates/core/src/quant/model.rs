use super::{quantize, weight_params_symmetric, ActParams, AffineParams, IntTensor};
use crate::error::{Error, Result};
use crate::flops;
use crate::model::{fingerprint, EncoderConfig, GraphNode, LayerSpec, ModelGraph, NormParams, Trace};
use crate::ops;
use crate::sensitivity::BitPlan;
use crate::tensor::{DType, Tensor};

/// Bit depth that means "keep this layer in floating point".
pub const FLOAT_BITS: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredWeights {
    /// Single-precision weights for layers planned at 32 bits.
    Float { weight: Tensor, bias: Option<Tensor> },
    /// Symmetric codes at the layer's bit depth; the bias has its own scale.
    Int {
        codes: IntTensor,
        params: AffineParams,
        bias_codes: Option<IntTensor>,
        bias_params: Option<AffineParams>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub index: usize,
    pub bits: u32,
    pub weights: StoredWeights,
    pub act: ActParams,
    /// Bias as 32-bit accumulator codes at the input-times-weight scale.
    bias_acc: Option<Vec<i32>>,
}

impl QuantizedLayer {
    pub(crate) fn new(index: usize, bits: u32, weights: StoredWeights, act: ActParams) -> Result<(Self, Tensor, Option<Tensor>)> {
        check_act(index, &act)?;
        let (w_hat, b_hat) = match &weights {
            StoredWeights::Float { weight, bias } => (weight.clone(), bias.clone()),
            StoredWeights::Int {
                codes,
                params,
                bias_codes,
                bias_params,
            } => {
                let w = super::dequantize(codes, params);
                let b = match (bias_codes, bias_params) {
                    (Some(c), Some(p)) => Some(super::dequantize(c, p)),
                    (None, None) => None,
                    _ => return Err(Error::Assembly(format!("layer {index}: bias codes without parameters"))),
                };
                (w, b)
            }
        };
        let bias_acc = match (&weights, &b_hat, acc_scale(&act, &weights)) {
            (StoredWeights::Int { .. }, Some(b), Some(s)) => {
                let (lo, hi) = (i32::MIN as f64, i32::MAX as f64);
                flops::record(2 * b.len());
                Some(b.data().iter().map(|&v| (v / s).round().clamp(lo, hi) as i32).collect())
            }
            _ => None,
        };
        Ok((
            Self {
                index,
                bits,
                weights,
                act,
                bias_acc,
            },
            w_hat,
            b_hat,
        ))
    }

    pub fn is_float(&self) -> bool {
        matches!(self.weights, StoredWeights::Float { .. })
    }

    /// Bits this layer occupies in a serialized payload.
    pub fn payload_bits(&self) -> u64 {
        let n = match &self.weights {
            StoredWeights::Float { weight, bias } => weight.len() + bias.as_ref().map_or(0, Tensor::len),
            StoredWeights::Int { codes, bias_codes, .. } => codes.len() + bias_codes.as_ref().map_or(0, IntTensor::len),
        };
        self.bits as u64 * n as u64
    }

    fn forward(&self, spec: &LayerSpec, x: &Tensor, dtype: DType) -> Result<Tensor> {
        match (&self.weights, &self.act) {
            (StoredWeights::Int { codes, params, .. }, ActParams::Affine(_) | ActParams::TwoRange(_)) => {
                self.forward_int(spec, x, codes, params, dtype)
            }
            _ => {
                let xq = self.act.fake_quant(x).to_dtype(dtype.promote(x.dtype()));
                spec.apply(&xq)
            }
        }
    }

    fn forward_int(&self, spec: &LayerSpec, x: &Tensor, codes: &IntTensor, wp: &AffineParams, dtype: DType) -> Result<Tensor> {
        let (parts, scales): (Vec<Vec<i64>>, Vec<f64>) = match self.act {
            ActParams::Affine(p) => {
                let q = quantize(x, &p);
                (
                    vec![q.data().iter().map(|&c| c as i64 + p.zero_point).collect()],
                    vec![p.scale * wp.scale],
                )
            }
            ActParams::TwoRange(p) => {
                let (q, _) = super::two_range_quantize(x, &p);
                let neg = q.data().iter().map(|&c| (c as i64).min(0)).collect();
                let pos = q.data().iter().map(|&c| (c as i64).max(0)).collect();
                (vec![neg, pos], vec![p.scale_neg * wp.scale, p.scale_pos * wp.scale])
            }
            ActParams::Float => unreachable!("float activations take the simulated path"),
        };
        let n_parts = parts.len();
        let mut out: Option<(Vec<usize>, Vec<f64>)> = None;
        for (i, (xv, s)) in parts.iter().zip(&scales).enumerate() {
            // The bias rides on the last accumulator: the affine one, or the positive half.
            let bias = if i + 1 == n_parts { self.bias_acc.as_deref() } else { None };
            let (shape, acc) = int_layer_acc(spec, x.shape(), xv, codes, bias)?;
            flops::record(2 * acc.len());
            match &mut out {
                None => out = Some((shape, acc.iter().map(|&a| a as f64 * s).collect())),
                Some((_, o)) => o.iter_mut().zip(&acc).for_each(|(o, &a)| *o += a as f64 * s),
            }
        }
        let (shape, data) = out.expect("at least one accumulator");
        Tensor::with_dtype(shape, data, dtype.promote(x.dtype()))
    }
}

fn check_act(index: usize, act: &ActParams) -> Result<()> {
    let bits = act.bits();
    if bits != FLOAT_BITS && !(2..=16).contains(&bits) {
        return Err(Error::Assembly(format!(
            "layer {index}: activation bit depth {bits} must be in 2..=16 or 32"
        )));
    }
    Ok(())
}

/// Scale of one accumulator unit that the bias is expressed in.
fn acc_scale(act: &ActParams, weights: &StoredWeights) -> Option<f64> {
    let StoredWeights::Int { params, .. } = weights else {
        return None;
    };
    match act {
        ActParams::Float => None,
        ActParams::Affine(p) => Some(p.scale * params.scale),
        ActParams::TwoRange(p) => Some(p.scale_pos * params.scale),
    }
}

/// Integer accumulators of a linear or convolutional layer.
/// `xv` holds zero-point-adjusted activation codes in the input's layout.
fn int_layer_acc(spec: &LayerSpec, x_shape: &[usize], xv: &[i64], w: &IntTensor, bias: Option<&[i32]>) -> Result<(Vec<usize>, Vec<i64>)> {
    let ws = w.shape();
    let wd = w.data();
    let max_x = xv.iter().map(|v| v.unsigned_abs() as u128).max().unwrap_or(0);
    let max_w = wd.iter().map(|&v| (v as i64).unsigned_abs() as u128).max().unwrap_or(0);
    let fan_in: usize = ws[1..].iter().product();
    if max_x * max_w * fan_in as u128 + (i32::MAX as u128) > i64::MAX as u128 {
        return Err(Error::Usage("integer accumulator would overflow 64 bits".into()));
    }
    if spec.kind.is_conv() {
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        if x_shape.len() != 2 || x_shape[0] != cin {
            return Err(Error::dim("conv1d", x_shape, ws));
        }
        let t = x_shape[1];
        let tout = ops::conv1d_out_len(t, k, spec.stride).ok_or_else(|| Error::dim("conv1d", x_shape, ws))?;
        let mut acc = vec![0i64; cout * tout];
        for o in 0..cout {
            let b = bias.map_or(0, |b| b[o] as i64);
            for (tau, a) in acc[o * tout..(o + 1) * tout].iter_mut().enumerate() {
                let mut s = b;
                for c in 0..cin {
                    let xrow = &xv[c * t + tau * spec.stride..c * t + tau * spec.stride + k];
                    let wrow = &wd[(o * cin + c) * k..(o * cin + c + 1) * k];
                    s += xrow.iter().zip(wrow).map(|(&x, &w)| x * w as i64).sum::<i64>();
                }
                *a = s;
            }
        }
        Ok((vec![cout, tout], acc))
    } else {
        let (out_f, in_f) = (ws[0], ws[1]);
        if x_shape.len() != 2 || x_shape[1] != in_f {
            return Err(Error::dim("linear", x_shape, ws));
        }
        let rows = x_shape[0];
        let mut acc = vec![0i64; rows * out_f];
        for r in 0..rows {
            let xrow = &xv[r * in_f..(r + 1) * in_f];
            for o in 0..out_f {
                let wrow = &wd[o * in_f..(o + 1) * in_f];
                let b = bias.map_or(0, |b| b[o] as i64);
                acc[r * out_f + o] = b + xrow.iter().zip(wrow).map(|(&x, &w)| x * w as i64).sum::<i64>();
            }
        }
        Ok((vec![rows, out_f], acc))
    }
}

pub(crate) struct GraphTemplate {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub norms: Vec<NormParams>,
    pub nodes: Vec<GraphNode>,
    pub config: Option<EncoderConfig>,
}

/// A model with per-layer integer weights and activation quantizers.
///
/// `graph` carries the topology, the FP normalization parameters and the
/// effective (dequantized) weights of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub name: String,
    pub dtype: DType,
    pub source_fingerprint: String,
    pub plan: BitPlan,
    pub layers: Vec<QuantizedLayer>,
    pub graph: ModelGraph,
}

impl QuantizedModel {
    /// Builds the model from per-layer storage. `template` supplies the
    /// topology and layer metadata; its layer weights are replaced.
    pub(crate) fn assemble(
        template: GraphTemplate,
        dtype: DType,
        source_fingerprint: String,
        plan: BitPlan,
        stored: Vec<(u32, StoredWeights, ActParams)>,
    ) -> Result<Self> {
        if template.layers.len() != stored.len() {
            return Err(Error::Assembly(format!(
                "{} stored layers for {} graph layers",
                stored.len(),
                template.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(stored.len());
        let mut specs = Vec::with_capacity(stored.len());
        for (spec, (bits, weights, act)) in template.layers.into_iter().zip(stored) {
            let (ql, w_hat, b_hat) = QuantizedLayer::new(spec.index, bits, weights, act)?;
            specs.push(LayerSpec {
                weight: w_hat,
                bias: b_hat,
                ..spec
            });
            layers.push(ql);
        }
        let graph = ModelGraph::new(
            template.name.clone(),
            template.input_shape,
            specs,
            template.norms,
            template.nodes,
            template.config,
        )?;
        Ok(Self {
            name: template.name,
            dtype,
            source_fingerprint,
            plan,
            layers,
            graph,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Exactly `Σ b_l·|W_l|`.
    pub fn payload_bits(&self) -> u64 {
        self.layers.iter().map(QuantizedLayer::payload_bits).sum()
    }
}

/// Quantizes every layer's weights at its planned depth and attaches the
/// activation quantizers. A plan entry of 32 keeps the layer in floating point.
pub fn quantize_model(model: &ModelGraph, plan: &BitPlan, act: &[ActParams]) -> Result<QuantizedModel> {
    let n = model.num_layers();
    if plan.bits.len() != n {
        return Err(Error::Assembly(format!(
            "plan covers {} layers, model has {n}",
            plan.bits.len()
        )));
    }
    if act.len() < n {
        return Err(Error::Assembly(format!("missing activation parameters for layer {}", act.len())));
    }
    if act.len() > n {
        return Err(Error::Assembly(format!("{} activation parameter sets for {n} layers", act.len())));
    }
    let mut stored = Vec::with_capacity(n);
    for ((spec, &bits), &a) in model.layers.iter().zip(&plan.bits).zip(act) {
        if !(1..=FLOAT_BITS).contains(&bits) {
            return Err(Error::Assembly(format!("layer {}: bit depth {bits} outside 1..=32", spec.index)));
        }
        let weights = if bits == FLOAT_BITS {
            StoredWeights::Float {
                weight: spec.weight.to_dtype(DType::F32),
                bias: spec.bias.as_ref().map(|b| b.to_dtype(DType::F32)),
            }
        } else {
            let params = weight_params_symmetric(&spec.weight, bits).map_err(|e| e.at_layer(spec.index))?;
            let codes = quantize(&spec.weight, &params);
            let (bias_codes, bias_params) = match &spec.bias {
                Some(b) => {
                    let p = weight_params_symmetric(b, bits).map_err(|e| e.at_layer(spec.index))?;
                    (Some(quantize(b, &p)), Some(p))
                }
                None => (None, None),
            };
            StoredWeights::Int {
                codes,
                params,
                bias_codes,
                bias_params,
            }
        };
        stored.push((bits, weights, a));
    }
    let template = GraphTemplate {
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        layers: model.layers.clone(),
        norms: model.norms.clone(),
        nodes: model.nodes.clone(),
        config: model.config.clone(),
    };
    QuantizedModel::assemble(template, model.dtype(), fingerprint(model)?, plan.clone(), stored)
}

/// Every node value of a quantized forward pass.
pub fn run_quantized_trace(qm: &QuantizedModel, x: &Tensor) -> Result<Trace> {
    let dtype = qm.dtype;
    let x = x.to_dtype(dtype);
    let mut exec = |spec: &LayerSpec, input: &Tensor| qm.layers[spec.index].forward(spec, input, dtype);
    qm.graph.execute(&x, &mut exec)
}

/// Logits of the quantized model. Nonlinearities run in floating point on
/// dequantized values; quantized layers accumulate in 64-bit integers.
pub fn run_quantized(qm: &QuantizedModel, x: &Tensor) -> Result<Tensor> {
    Ok(run_quantized_trace(qm, x)?.logits().clone())
}
