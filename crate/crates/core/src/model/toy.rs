use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GraphBuilder, LayerKind, ModelGraph};
use crate::error::{Error, Result};
use crate::ops::conv1d_out_len;
use crate::tensor::{DType, Tensor};

/// Shape of the desk-scale speech encoder: an optional two-layer conv stem
/// followed by pre-norm transformer blocks and a per-frame classifier head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub conv_stem: bool,
    pub input_channels: usize,
    pub input_len: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 4,
            conv_stem: true,
            input_channels: 8,
            input_len: 64,
            ffn: 64,
            vocab: 32,
            kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("input_channels", self.input_channels),
            ("input_len", self.input_len),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("kernel", self.kernel),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.conv_stem && self.frames().is_none() {
            return Err(Error::Config(format!(
                "input length {} is too short for two kernel-{} convolutions",
                self.input_len, self.kernel
            )));
        }
        Ok(())
    }

    /// Output frames per utterance.
    pub fn frames(&self) -> Option<usize> {
        if !self.conv_stem {
            return Some(self.input_len);
        }
        let t1 = conv1d_out_len(self.input_len, self.kernel, 1)?;
        conv1d_out_len(t1, self.kernel, 2)
    }

    /// Closed-form `Σ |W_l|` (biases included, LayerNorm excluded).
    pub fn param_count(&self) -> usize {
        let (h, c, k, f, v) = (self.hidden, self.input_channels, self.kernel, self.ffn, self.vocab);
        let stem = if self.conv_stem {
            (h * c * k + h) + (h * h * k + h)
        } else {
            h * c + h
        };
        let block = 4 * (h * h + h) + (f * h + f) + (h * f + h);
        stem + self.layers * block + (v * h + v)
    }

    /// Number of quantizable layers.
    pub fn num_layers(&self) -> usize {
        let stem = if self.conv_stem { 2 } else { 1 };
        stem + 6 * self.layers + 1
    }
}

/// Builds a randomly initialized encoder. Weights are drawn from
/// `N(0, 1/fan_in)`, biases from `N(0, 0.1²)`; LayerNorms start at identity.
/// Weights are stored in single precision.
pub fn build_toy_encoder(config: &EncoderConfig, seed: u64) -> Result<ModelGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |shape: Vec<usize>, std: f64| -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is positive and finite");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor::with_dtype(shape, data, DType::F32).expect("shape matches data")
    };
    let ones = |n: usize| Tensor::full(vec![n], 1.0, DType::F32).expect("n > 0");
    let zeros = |n: usize| Tensor::zeros(vec![n], DType::F32).expect("n > 0");
    const BIAS_STD: f64 = 0.1;
    const EPS: f64 = 1e-5;

    let (h, c, k, f, v) = (config.hidden, config.input_channels, config.kernel, config.ffn, config.vocab);
    let mut g = GraphBuilder::new("toy-encoder", vec![c, config.input_len]).with_config(config.clone());
    let x = g.input();

    let mut hcur = if config.conv_stem {
        let w0 = gaussian(vec![h, c, k], 1.0 / ((c * k) as f64).sqrt());
        let b0 = gaussian(vec![h], BIAS_STD);
        let c0 = g.conv1d(x, w0, Some(b0), 1);
        let a0 = g.gelu(c0);
        let w1 = gaussian(vec![h, h, k], 1.0 / ((h * k) as f64).sqrt());
        let b1 = gaussian(vec![h], BIAS_STD);
        let c1 = g.conv1d(a0, w1, Some(b1), 2);
        let a1 = g.gelu(c1);
        g.transpose(a1)
    } else {
        let xt = g.transpose(x);
        let w = gaussian(vec![h, c], 1.0 / (c as f64).sqrt());
        let b = gaussian(vec![h], BIAS_STD);
        g.linear(xt, LayerKind::Linear, w, Some(b))
    };

    let std_h = 1.0 / (h as f64).sqrt();
    let std_f = 1.0 / (f as f64).sqrt();
    for _ in 0..config.layers {
        let n1 = g.layernorm(hcur, ones(h), zeros(h), EPS);
        let mut proj = |g: &mut GraphBuilder, kind| {
            let w = gaussian(vec![h, h], std_h);
            let b = gaussian(vec![h], BIAS_STD);
            g.linear(n1, kind, w, Some(b))
        };
        let q = proj(&mut g, LayerKind::AttnQ);
        let kk = proj(&mut g, LayerKind::AttnK);
        let vv = proj(&mut g, LayerKind::AttnV);
        let ctx = g.attention(q, kk, vv, config.heads);
        let wo = gaussian(vec![h, h], std_h);
        let bo = gaussian(vec![h], BIAS_STD);
        let o = g.linear(ctx, LayerKind::AttnOut, wo, Some(bo));
        let r1 = g.add(hcur, o);

        let n2 = g.layernorm(r1, ones(h), zeros(h), EPS);
        let w1 = gaussian(vec![f, h], std_h);
        let b1 = gaussian(vec![f], BIAS_STD);
        let f1 = g.linear(n2, LayerKind::Ffn1, w1, Some(b1));
        let a = g.gelu(f1);
        let w2 = gaussian(vec![h, f], std_f);
        let b2 = gaussian(vec![h], BIAS_STD);
        let f2 = g.linear(a, LayerKind::Ffn2, w2, Some(b2));
        hcur = g.add(r1, f2);
    }

    let nf = g.layernorm(hcur, ones(h), zeros(h), EPS);
    let wh = gaussian(vec![v, h], std_h);
    let bh = gaussian(vec![v], BIAS_STD);
    g.linear(nf, LayerKind::Linear, wh, Some(bh));
    g.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActivationTag;

    #[test]
    fn default_count_matches_closed_form() {
        let cfg = EncoderConfig::default();
        let m = build_toy_encoder(&cfg, 0).unwrap();
        assert_eq!(m.total_params(), cfg.param_count());
        // 800 + 3104 + 2·8416 + 1056, worked by hand for the default config.
        assert_eq!(cfg.param_count(), 21_792);
        assert_eq!(m.num_layers(), cfg.num_layers());
    }

    #[test]
    fn count_without_stem() {
        let cfg = EncoderConfig {
            conv_stem: false,
            layers: 1,
            ..EncoderConfig::default()
        };
        let m = build_toy_encoder(&cfg, 3).unwrap();
        assert_eq!(m.total_params(), cfg.param_count());
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = EncoderConfig::default();
        assert_eq!(build_toy_encoder(&cfg, 7).unwrap(), build_toy_encoder(&cfg, 7).unwrap());
        assert_ne!(build_toy_encoder(&cfg, 7).unwrap(), build_toy_encoder(&cfg, 8).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let bad_heads = EncoderConfig {
            heads: 5,
            ..EncoderConfig::default()
        };
        assert!(matches!(build_toy_encoder(&bad_heads, 0), Err(Error::Config(_))));
        let too_short = EncoderConfig {
            input_len: 3,
            ..EncoderConfig::default()
        };
        assert!(matches!(build_toy_encoder(&too_short, 0), Err(Error::Config(_))));
    }

    #[test]
    fn layer_kinds_and_tags() {
        let m = build_toy_encoder(&EncoderConfig::default(), 0).unwrap();
        let kinds: Vec<_> = m.layers.iter().map(|l| l.kind).collect();
        assert_eq!(&kinds[..2], &[LayerKind::Conv1d, LayerKind::Conv1d]);
        assert_eq!(
            &kinds[2..8],
            &[
                LayerKind::AttnQ,
                LayerKind::AttnK,
                LayerKind::AttnV,
                LayerKind::AttnOut,
                LayerKind::Ffn1,
                LayerKind::Ffn2
            ]
        );
        assert_eq!(m.layers[1].activation, ActivationTag::Gelu);
        assert_eq!(m.layers[5].activation, ActivationTag::SoftmaxContext);
        assert_eq!(m.layers[7].activation, ActivationTag::Gelu);
        assert_eq!(m.layers[2].activation, ActivationTag::None);
        let x = Tensor::zeros(vec![8, 64], DType::F32).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[30, 32]);
    }
}
