//! MYQZ quantized-model files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MYQZ"
//! 4       4     version, u32 LE (= 1)
//! 8       8     header length N, u64 LE
//! 16      N     UTF-8 JSON header
//! 16+N    P     packed payload, P = ceil(payload_bits / 8)
//! ...           normalization blobs (gamma, beta per norm), raw LE IEEE-754
//! ```
//!
//! The payload is one little-endian bitstream: bit `i` is bit `i % 8` of
//! byte `i / 8`. For each layer in graph order the weight codes and then the
//! bias codes are appended, each as `b_l`-bit two's complement, least
//! significant bit first. Layers planned at 32 bits store the IEEE-754
//! single-precision bit pattern instead of a code. The stream is zero-padded
//! to a byte boundary once, after the last layer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{GraphTemplate, StoredWeights, FLOAT_BITS};
use super::{ActParams, AffineParams, IntTensor, QuantizedModel, TwoRangeParams};
use crate::error::{Error, Result};
use crate::model::{
    read_header, write_atomic, write_blob, write_header, ActivationTag, BlobMeta, BlobReader, EncoderConfig,
    GraphNode, LayerKind, LayerSpec, NormParams,
};
use crate::sensitivity::BitPlan;
use crate::tensor::{DType, Tensor};

pub const QMODEL_MAGIC: &[u8; 4] = b"MYQZ";
pub const QMODEL_VERSION: u32 = 1;

fn dec(v: f64) -> String {
    format!("{v:?}")
}

fn parse_dec(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::format(8, format!("{what}: {s:?} is not a decimal number")))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ActMeta {
    Float,
    Affine { scale: String, zero_point: i64, bits: u32 },
    TwoRange { scale_neg: String, scale_pos: String, bits: u32 },
}

impl ActMeta {
    fn of(a: &ActParams) -> Self {
        match a {
            ActParams::Float => ActMeta::Float,
            ActParams::Affine(p) => ActMeta::Affine {
                scale: dec(p.scale),
                zero_point: p.zero_point,
                bits: p.bits,
            },
            ActParams::TwoRange(p) => ActMeta::TwoRange {
                scale_neg: dec(p.scale_neg),
                scale_pos: dec(p.scale_pos),
                bits: p.bits,
            },
        }
    }

    fn params(&self) -> Result<ActParams> {
        let bad = |e: Error| Error::format(8, format!("activation parameters: {e}"));
        Ok(match self {
            ActMeta::Float => ActParams::Float,
            ActMeta::Affine { scale, zero_point, bits } => {
                ActParams::Affine(AffineParams::new(parse_dec(scale, "scale")?, *zero_point, *bits).map_err(bad)?)
            }
            ActMeta::TwoRange { scale_neg, scale_pos, bits } => ActParams::TwoRange(
                TwoRangeParams::new(parse_dec(scale_neg, "scale_neg")?, parse_dec(scale_pos, "scale_pos")?, *bits)
                    .map_err(bad)?,
            ),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerMeta {
    index: usize,
    kind: LayerKind,
    activation: ActivationTag,
    quantizable: bool,
    stride: usize,
    bits: u32,
    weight_shape: Vec<usize>,
    bias_shape: Option<Vec<usize>>,
    /// Absent for floating-point layers.
    weight_scale: Option<String>,
    bias_scale: Option<String>,
    act: ActMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormMeta {
    eps: String,
    gamma: BlobMeta,
    beta: BlobMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanMeta {
    bits: Vec<u32>,
    size_mb: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    dtype: DType,
    source_fingerprint: String,
    input_shape: Vec<usize>,
    config: Option<EncoderConfig>,
    graph: Vec<GraphNode>,
    plan: PlanMeta,
    layers: Vec<LayerMeta>,
    payload_bits: u64,
    norms: Vec<NormMeta>,
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    nbits: u64,
}

impl BitWriter {
    fn push(&mut self, value: u32, bits: u32) {
        for i in 0..bits {
            if self.nbits % 8 == 0 {
                self.bytes.push(0);
            }
            let bit = ((value >> i) & 1) as u8;
            *self.bytes.last_mut().expect("pushed above") |= bit << (self.nbits % 8);
            self.nbits += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl BitReader<'_> {
    fn pull(&mut self, bits: u32) -> u32 {
        let mut v = 0u32;
        for i in 0..bits {
            let byte = self.bytes[(self.pos / 8) as usize];
            v |= (((byte >> (self.pos % 8)) & 1) as u32) << i;
            self.pos += 1;
        }
        v
    }

    fn signed(&mut self, bits: u32) -> i32 {
        let raw = self.pull(bits);
        let shift = 32 - bits;
        ((raw << shift) as i32) >> shift
    }
}

fn push_float(w: &mut BitWriter, t: &Tensor) {
    for &v in t.data() {
        w.push((v as f32).to_bits(), FLOAT_BITS);
    }
}

fn push_codes(w: &mut BitWriter, c: &IntTensor, bits: u32) {
    for &v in c.data() {
        w.push(v as u32, bits);
    }
}

pub fn qmodel_to_bytes(qm: &QuantizedModel) -> Result<Vec<u8>> {
    let mut payload = BitWriter::default();
    let mut layers = Vec::with_capacity(qm.layers.len());
    for (ql, spec) in qm.layers.iter().zip(&qm.graph.layers) {
        let (weight_scale, bias_scale) = match &ql.weights {
            StoredWeights::Float { weight, bias } => {
                push_float(&mut payload, weight);
                if let Some(b) = bias {
                    push_float(&mut payload, b);
                }
                (None, None)
            }
            StoredWeights::Int {
                codes,
                params,
                bias_codes,
                bias_params,
            } => {
                push_codes(&mut payload, codes, ql.bits);
                if let Some(b) = bias_codes {
                    push_codes(&mut payload, b, ql.bits);
                }
                (Some(dec(params.scale)), bias_params.map(|p| dec(p.scale)))
            }
        };
        layers.push(LayerMeta {
            index: ql.index,
            kind: spec.kind,
            activation: spec.activation,
            quantizable: spec.quantizable,
            stride: spec.stride,
            bits: ql.bits,
            weight_shape: spec.weight.shape().to_vec(),
            bias_shape: spec.bias.as_ref().map(|b| b.shape().to_vec()),
            weight_scale,
            bias_scale,
            act: ActMeta::of(&ql.act),
        });
    }
    debug_assert_eq!(payload.nbits, qm.payload_bits());
    let header = Header {
        name: qm.name.clone(),
        dtype: qm.dtype,
        source_fingerprint: qm.source_fingerprint.clone(),
        input_shape: qm.graph.input_shape.clone(),
        config: qm.graph.config.clone(),
        graph: qm.graph.nodes.clone(),
        plan: PlanMeta {
            bits: qm.plan.bits.clone(),
            size_mb: dec(qm.plan.size_mb),
        },
        layers,
        payload_bits: payload.nbits,
        norms: qm
            .graph
            .norms
            .iter()
            .map(|n| NormMeta {
                eps: dec(n.eps),
                gamma: BlobMeta::of(&n.gamma),
                beta: BlobMeta::of(&n.beta),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    write_header(&mut out, QMODEL_MAGIC, QMODEL_VERSION, &json);
    out.extend_from_slice(&payload.bytes);
    for n in &qm.graph.norms {
        write_blob(&mut out, &n.gamma);
        write_blob(&mut out, &n.beta);
    }
    Ok(out)
}

pub fn qmodel_from_bytes(bytes: &[u8]) -> Result<QuantizedModel> {
    let (json, end) = read_header(bytes, QMODEL_MAGIC, QMODEL_VERSION)?;
    let h: Header =
        serde_json::from_slice(json).map_err(|e| Error::format(16, format!("invalid header: {e}")))?;
    let mut blobs = BlobReader::new(bytes, end);
    let payload_offset = blobs.offset();

    let mut expected_bits = 0u64;
    for l in &h.layers {
        if !(1..=FLOAT_BITS).contains(&l.bits) {
            return Err(Error::format(16, format!("layer {}: bit depth {} outside 1..=32", l.index, l.bits)));
        }
        let n = l.weight_shape.iter().product::<usize>() + l.bias_shape.as_ref().map_or(0, |s| s.iter().product());
        expected_bits += l.bits as u64 * n as u64;
    }
    if expected_bits != h.payload_bits {
        return Err(Error::format(
            payload_offset,
            format!("declared payload of {} bits, layer shapes need {expected_bits}", h.payload_bits),
        ));
    }
    let raw = blobs.take(h.payload_bits.div_ceil(8), "payload")?;
    let mut bits = BitReader { bytes: raw, pos: 0 };

    let mut template_layers = Vec::with_capacity(h.layers.len());
    let mut stored = Vec::with_capacity(h.layers.len());
    for l in &h.layers {
        let bad = |e: Error| Error::format(payload_offset, format!("layer {}: {e}", l.index));
        let read_float = |bits: &mut BitReader, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let v: Vec<f32> = (0..n).map(|_| f32::from_bits(bits.pull(FLOAT_BITS))).collect();
            Tensor::from_f32(shape.to_vec(), &v)
        };
        let read_codes = |bits: &mut BitReader, shape: &[usize], b: u32| {
            let n: usize = shape.iter().product();
            IntTensor::new(shape.to_vec(), (0..n).map(|_| bits.signed(b)).collect())
        };
        let weights = if l.bits == FLOAT_BITS {
            let weight = read_float(&mut bits, &l.weight_shape).map_err(bad)?;
            let bias = match &l.bias_shape {
                Some(s) => Some(read_float(&mut bits, s).map_err(bad)?),
                None => None,
            };
            StoredWeights::Float { weight, bias }
        } else {
            let scale = l
                .weight_scale
                .as_deref()
                .ok_or_else(|| Error::format(16, format!("layer {}: missing weight scale", l.index)))?;
            let params = AffineParams::new(parse_dec(scale, "weight_scale")?, 0, l.bits).map_err(bad)?;
            let codes = read_codes(&mut bits, &l.weight_shape, l.bits).map_err(bad)?;
            let (bias_codes, bias_params) = match (&l.bias_shape, &l.bias_scale) {
                (Some(s), Some(sc)) => (
                    Some(read_codes(&mut bits, s, l.bits).map_err(bad)?),
                    Some(AffineParams::new(parse_dec(sc, "bias_scale")?, 0, l.bits).map_err(bad)?),
                ),
                (None, None) => (None, None),
                _ => return Err(Error::format(16, format!("layer {}: bias shape without scale", l.index))),
            };
            StoredWeights::Int {
                codes,
                params,
                bias_codes,
                bias_params,
            }
        };
        stored.push((l.bits, weights, l.act.params()?));
        template_layers.push(LayerSpec {
            index: l.index,
            kind: l.kind,
            weight: Tensor::zeros(l.weight_shape.clone(), DType::F64).map_err(bad)?,
            bias: None,
            activation: l.activation,
            quantizable: l.quantizable,
            stride: l.stride,
        });
    }

    let mut norms = Vec::with_capacity(h.norms.len());
    for (i, nm) in h.norms.iter().enumerate() {
        let eps = parse_dec(&nm.eps, "eps")?;
        let gamma = blobs.tensor(&nm.gamma, &format!("norm {i} gamma"))?;
        let beta = blobs.tensor(&nm.beta, &format!("norm {i} beta"))?;
        norms.push(NormParams { gamma, beta, eps });
    }
    blobs.finish()?;

    let sizes: Vec<usize> = h
        .layers
        .iter()
        .map(|l| l.weight_shape.iter().product::<usize>() + l.bias_shape.as_ref().map_or(0, |s| s.iter().product()))
        .collect();
    let plan = BitPlan::new(h.plan.bits, &sizes).map_err(|e| Error::format(16, format!("plan: {e}")))?;
    let template = GraphTemplate {
        name: h.name,
        input_shape: h.input_shape,
        layers: template_layers,
        norms,
        nodes: h.graph,
        config: h.config,
    };
    QuantizedModel::assemble(template, h.dtype, h.source_fingerprint, plan, stored)
}

pub fn save_quantized(qm: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &qmodel_to_bytes(qm)?)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    qmodel_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_encoder, EncoderConfig};
    use crate::quant::{quantize_model, run_quantized, ScaleDenominator};

    fn qmodel(bits: impl Fn(usize) -> u32) -> QuantizedModel {
        let m = build_toy_encoder(&EncoderConfig::default(), 4).unwrap();
        let plan = BitPlan::new((0..m.num_layers()).map(bits).collect(), &m.param_count()).unwrap();
        let act: Vec<ActParams> = m
            .layers
            .iter()
            .map(|l| {
                if l.activation.is_two_range() {
                    ActParams::TwoRange(TwoRangeParams::new(0.003, 0.05, 8).unwrap())
                } else {
                    ActParams::Affine(
                        crate::quant::activation_params_minmax(-3.0, 3.0, 8, ScaleDenominator::Pow2Bm1).unwrap(),
                    )
                }
            })
            .collect();
        quantize_model(&m, &plan, &act).unwrap()
    }

    #[test]
    fn bit_writer_roundtrip() {
        let mut w = BitWriter::default();
        let vals = [(-4i32, 3u32), (3, 3), (-1, 1), (0, 1), (100, 8), (-100_000, 18), (i32::MIN, 32)];
        for &(v, b) in &vals {
            w.push(v as u32, b);
        }
        assert_eq!(w.nbits, vals.iter().map(|&(_, b)| b as u64).sum::<u64>());
        let mut r = BitReader { bytes: &w.bytes, pos: 0 };
        for &(v, b) in &vals {
            assert_eq!(r.signed(b), v);
        }
    }

    #[test]
    fn little_endian_bit_order() {
        let mut w = BitWriter::default();
        w.push(1, 3);
        w.push(0b101, 3);
        assert_eq!(w.bytes, vec![0b0010_1001]);
    }

    #[test]
    fn roundtrip_mixed_plan() {
        let qm = qmodel(|l| [3, 8, 32, 5][l % 4]);
        let bytes = qmodel_to_bytes(&qm).unwrap();
        let back = qmodel_from_bytes(&bytes).unwrap();
        assert_eq!(back, qm);
        assert_eq!(qmodel_to_bytes(&back).unwrap(), bytes);
        let x = Tensor::full(vec![8, 64], 0.3, DType::F32).unwrap();
        assert_eq!(run_quantized(&back, &x).unwrap(), run_quantized(&qm, &x).unwrap());
    }

    #[test]
    fn payload_size_is_plan_size() {
        let qm = qmodel(|l| 2 + l as u32 % 7);
        let bytes = qmodel_to_bytes(&qm).unwrap();
        let (json, end) = read_header(&bytes, QMODEL_MAGIC, QMODEL_VERSION).unwrap();
        let h: Header = serde_json::from_slice(json).unwrap();
        assert_eq!(h.payload_bits, qm.payload_bits());
        let norm_bytes: usize = qm.graph.norms.iter().map(|n| 4 * (n.gamma.len() + n.beta.len())).sum();
        assert_eq!(bytes.len() - end - norm_bytes, h.payload_bits.div_ceil(8) as usize);
    }

    #[test]
    fn corrupt_files() {
        let bytes = qmodel_to_bytes(&qmodel(|_| 4)).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'Q';
        assert!(matches!(qmodel_from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(qmodel_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    }
}
