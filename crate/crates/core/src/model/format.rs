//! MYQM model files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MYQM"
//! 4       4     version, u32 LE (= 1)
//! 8       8     metadata length N, u64 LE
//! 16      N     UTF-8 JSON metadata
//! 16+N    ...   raw little-endian IEEE-754 blobs, in order:
//!               for each layer: weight, then bias if present;
//!               then for each norm: gamma, beta
//! ```
//!
//! Every blob is described in the metadata by its shape, dtype and byte
//! length. The file must end exactly after the last blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ActivationTag, EncoderConfig, GraphNode, LayerKind, LayerSpec, ModelGraph, NormParams};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"MYQM";
pub const MODEL_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct BlobMeta {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub bytes: u64,
}

impl BlobMeta {
    pub(crate) fn of(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            dtype: t.dtype(),
            bytes: (t.len() * t.dtype().size_bytes()) as u64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerMeta {
    index: usize,
    kind: LayerKind,
    activation: ActivationTag,
    quantizable: bool,
    stride: usize,
    weight: BlobMeta,
    bias: Option<BlobMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NormMeta {
    index: usize,
    /// Decimal string so the value survives any JSON float handling.
    eps: String,
    gamma: BlobMeta,
    beta: BlobMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    name: String,
    input_shape: Vec<usize>,
    config: Option<EncoderConfig>,
    graph: Vec<GraphNode>,
    layers: Vec<LayerMeta>,
    norms: Vec<NormMeta>,
}

pub(crate) fn write_blob(out: &mut Vec<u8>, t: &Tensor) {
    match t.dtype() {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

/// Reads blobs sequentially out of a byte buffer, reporting absolute offsets.
pub(crate) struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn take(&mut self, n: u64, what: &str) -> Result<&'a [u8]> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n > remaining {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: declared {n} bytes, {remaining} available"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    pub fn tensor(&mut self, meta: &BlobMeta, what: &str) -> Result<Tensor> {
        let offset = self.offset();
        let count: usize = meta.shape.iter().product();
        let expected = (count * meta.dtype.size_bytes()) as u64;
        if meta.bytes != expected {
            return Err(Error::format(
                offset,
                format!(
                    "{what}: declared blob length {} does not match shape {:?} ({expected} bytes)",
                    meta.bytes, meta.shape
                ),
            ));
        }
        let raw = self.take(meta.bytes, what)?;
        let t = match meta.dtype {
            DType::F32 => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect();
                Tensor::from_f32(meta.shape.clone(), &v)
            }
            DType::F64 => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                Tensor::new(meta.shape.clone(), v)
            }
        };
        t.map_err(|e| Error::format(offset, format!("{what}: {e}")))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes after last blob", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Parses the fixed 16-byte header and the JSON metadata slice that follows it.
pub(crate) fn read_header<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<(&'a [u8], usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!("bad magic: expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::format(4, format!("unsupported version {found}, expected {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let available = bytes.len() as u64 - HEADER_LEN;
    if len > available {
        return Err(Error::format(
            8,
            format!("metadata length {len} exceeds the {available} bytes that follow"),
        ));
    }
    let end = (HEADER_LEN + len) as usize;
    Ok((&bytes[HEADER_LEN as usize..end], end))
}

pub(crate) fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], version: u32, json: &[u8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json);
}

pub fn model_to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    let meta = Metadata {
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        config: model.config.clone(),
        graph: model.nodes.clone(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerMeta {
                index: l.index,
                kind: l.kind,
                activation: l.activation,
                quantizable: l.quantizable,
                stride: l.stride,
                weight: BlobMeta::of(&l.weight),
                bias: l.bias.as_ref().map(BlobMeta::of),
            })
            .collect(),
        norms: model
            .norms
            .iter()
            .enumerate()
            .map(|(i, n)| NormMeta {
                index: i,
                eps: format!("{:?}", n.eps),
                gamma: BlobMeta::of(&n.gamma),
                beta: BlobMeta::of(&n.beta),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    write_header(&mut out, MODEL_MAGIC, MODEL_VERSION, &json);
    for l in &model.layers {
        write_blob(&mut out, &l.weight);
        if let Some(b) = &l.bias {
            write_blob(&mut out, b);
        }
    }
    for n in &model.norms {
        write_blob(&mut out, &n.gamma);
        write_blob(&mut out, &n.beta);
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let (json, end) = read_header(bytes, MODEL_MAGIC, MODEL_VERSION)?;
    let meta: Metadata = serde_json::from_slice(json)
        .map_err(|e| Error::format(HEADER_LEN, format!("invalid metadata: {e}")))?;
    let mut r = BlobReader::new(bytes, end);
    let mut layers = Vec::with_capacity(meta.layers.len());
    for lm in &meta.layers {
        let weight = r.tensor(&lm.weight, &format!("layer {} weight", lm.index))?;
        let bias = match &lm.bias {
            Some(bm) => Some(r.tensor(bm, &format!("layer {} bias", lm.index))?),
            None => None,
        };
        layers.push(LayerSpec {
            index: lm.index,
            kind: lm.kind,
            weight,
            bias,
            activation: lm.activation,
            quantizable: lm.quantizable,
            stride: lm.stride,
        });
    }
    let mut norms = Vec::with_capacity(meta.norms.len());
    for nm in &meta.norms {
        let eps: f64 = nm
            .eps
            .parse()
            .map_err(|_| Error::format(HEADER_LEN, format!("norm {}: bad eps {:?}", nm.index, nm.eps)))?;
        let gamma = r.tensor(&nm.gamma, &format!("norm {} gamma", nm.index))?;
        let beta = r.tensor(&nm.beta, &format!("norm {} beta", nm.index))?;
        norms.push(NormParams { gamma, beta, eps });
    }
    r.finish()?;
    ModelGraph::new(meta.name, meta.input_shape, layers, norms, meta.graph, meta.config)
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    model_from_bytes(&fs::read(path)?)
}

/// SHA-256 of the serialized model, hex encoded.
pub fn fingerprint(model: &ModelGraph) -> Result<String> {
    Ok(hex::encode(Sha256::digest(model_to_bytes(model)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_encoder, EncoderConfig};

    fn toy() -> ModelGraph {
        build_toy_encoder(&EncoderConfig::default(), 11).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let m = toy();
        let bytes = model_to_bytes(&m).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
        assert_eq!(back.param_count(), m.param_count());
    }

    #[test]
    fn f64_weights_roundtrip() {
        let mut g = crate::model::GraphBuilder::new("f64", vec![1, 2]);
        let x = g.input();
        let w = Tensor::new(vec![2, 2], vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap();
        g.linear(x, LayerKind::Linear, w, None);
        let m = g.finish().unwrap();
        assert_eq!(model_from_bytes(&model_to_bytes(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = model_to_bytes(&toy()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = model_to_bytes(&toy()).unwrap();
        bytes[4] = 2;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncated_blob_reports_offset() {
        let bytes = model_to_bytes(&toy()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match model_from_bytes(cut) {
            Err(Error::Format { offset, message }) => {
                assert!(offset > HEADER_LEN && offset < cut.len() as u64, "{offset}");
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn declared_length_mismatch() {
        let m = toy();
        let bytes = model_to_bytes(&m).unwrap();
        let (json, end) = read_header(&bytes, MODEL_MAGIC, MODEL_VERSION).unwrap();
        let mut meta: Metadata = serde_json::from_slice(json).unwrap();
        meta.layers[0].weight.bytes += 4;
        let json = serde_json::to_vec(&meta).unwrap();
        let mut forged = Vec::new();
        write_header(&mut forged, MODEL_MAGIC, MODEL_VERSION, &json);
        forged.extend_from_slice(&bytes[end..]);
        match model_from_bytes(&forged) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, HEADER_LEN + json.len() as u64);
                assert!(message.contains("declared blob length"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = model_to_bytes(&toy()).unwrap();
        bytes.push(0);
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn file_roundtrip_and_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.myqm");
        let m = toy();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(fingerprint(&back).unwrap(), fingerprint(&m).unwrap());
        assert_eq!(fingerprint(&m).unwrap().len(), 64);
    }
}
