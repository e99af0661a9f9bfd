//! Finite-difference gradient checks shared by the test targets.
#![allow(dead_code)]

use myq_core::model::{GraphBuilder, LayerExecutor, LayerKind, LayerSpec};
use myq_core::ops::{self, Op};
use myq_core::{build_toy_encoder, DType, EncoderConfig, ModelGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `|g_analytic − g_fd| / (|g_fd| + 1e-8)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (n.abs() + 1e-8)
}

fn with_value(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut d = t.to_vec();
    d[i] = v;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

/// Largest relative error between `analytic` and central differences of `f` around `x`.
fn check(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let v = x.data()[i];
        let num = (f(&with_value(x, i, v + H)) - f(&with_value(x, i, v - H))) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], num));
    }
    worst
}

/// Input gradients of `op` under the loss `Σ c ⊙ op(inputs)`.
fn check_op(op: &Op, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let out = op.forward(&refs).unwrap();
    let c = rand_tensor(rng, out.shape());
    let grads = op.vjp(&refs, &out, &c).unwrap();
    assert_eq!(grads.len(), inputs.len());
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        let e = check(&inputs[k], g, |xk| {
            let mut v: Vec<&Tensor> = inputs.iter().collect();
            v[k] = xk;
            dot(&op.forward(&v).unwrap(), &c)
        });
        worst = worst.max(e);
    }
    worst
}

/// Worst input-gradient error per op case, named by op.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, hidden, heads) = (5, 6, 2);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let cw = rand_tensor(&mut rng, &[3, 2, 3]);
    let cb = rand_tensor(&mut rng, &[3]);
    let gamma = rand_tensor(&mut rng, &[hidden]);
    let beta = rand_tensor(&mut rng, &[hidden]);
    let probs = ops::softmax(&rand_tensor(&mut rng, &[heads, t, t]), 2).unwrap();
    let cases: Vec<(Op, Vec<Tensor>)> = vec![
        (
            Op::Linear {
                weight: w,
                bias: Some(b),
            },
            vec![rand_tensor(&mut rng, &[t, 3])],
        ),
        (
            Op::Conv1d {
                weight: cw.clone(),
                bias: Some(cb),
                stride: 1,
            },
            vec![rand_tensor(&mut rng, &[2, 9])],
        ),
        (
            Op::Conv1d {
                weight: cw,
                bias: None,
                stride: 2,
            },
            vec![rand_tensor(&mut rng, &[2, 10])],
        ),
        (Op::Gelu, vec![rand_tensor(&mut rng, &[3, 4])]),
        (Op::Softmax { axis: 1 }, vec![rand_tensor(&mut rng, &[3, 4])]),
        (Op::Softmax { axis: 0 }, vec![rand_tensor(&mut rng, &[3, 4])]),
        (
            Op::LayerNorm {
                gamma,
                beta,
                eps: 1e-5,
            },
            vec![rand_tensor(&mut rng, &[t, hidden])],
        ),
        (Op::Add, vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])]),
        (Op::Mul, vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3])]),
        (Op::Transpose, vec![rand_tensor(&mut rng, &[2, 3])]),
        (Op::Reshape { shape: vec![3, 2] }, vec![rand_tensor(&mut rng, &[2, 3])]),
        (
            Op::AttnScores { heads },
            vec![rand_tensor(&mut rng, &[t, hidden]), rand_tensor(&mut rng, &[t, hidden])],
        ),
        (Op::AttnContext { heads }, vec![probs, rand_tensor(&mut rng, &[t, hidden])]),
    ];
    cases
        .iter()
        .map(|(op, inputs)| (op.name(), check_op(op, inputs, &mut rng)))
        .collect()
}

/// Worst parameter-gradient error for linear, conv1d and layernorm.
pub fn param_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[5, 3]);
    let b = rand_tensor(&mut rng, &[5]);
    let c = rand_tensor(&mut rng, &[4, 5]);
    let (_, gw, gb) = ops::linear_vjp(&x, &w, &c).unwrap();
    out.push(("linear.weight", check(&w, &gw, |w| dot(&ops::linear(&x, w, Some(&b)).unwrap(), &c))));
    out.push(("linear.bias", check(&b, &gb, |b| dot(&ops::linear(&x, &w, Some(b)).unwrap(), &c))));

    let x = rand_tensor(&mut rng, &[2, 11]);
    let w = rand_tensor(&mut rng, &[3, 2, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let c = rand_tensor(&mut rng, &[3, 5]);
    let (_, gw, gb) = ops::conv1d_vjp(&x, &w, 2, &c).unwrap();
    out.push(("conv1d.weight", check(&w, &gw, |w| dot(&ops::conv1d(&x, w, Some(&b), 2).unwrap(), &c))));
    out.push(("conv1d.bias", check(&b, &gb, |b| dot(&ops::conv1d(&x, &w, Some(b), 2).unwrap(), &c))));

    let x = rand_tensor(&mut rng, &[3, 4]);
    let g = rand_tensor(&mut rng, &[4]);
    let be = rand_tensor(&mut rng, &[4]);
    let c = rand_tensor(&mut rng, &[3, 4]);
    let (_, gg, gbe) = ops::layernorm_vjp(&x, &g, 1e-5, &c).unwrap();
    out.push(("layernorm.gamma", check(&g, &gg, |g| dot(&ops::layernorm(&x, g, &be, 1e-5).unwrap(), &c))));
    out.push(("layernorm.beta", check(&be, &gbe, |be| dot(&ops::layernorm(&x, &g, be, 1e-5).unwrap(), &c))));
    out
}

/// Adds `delta` to one layer's output during execution.
struct Perturb {
    layer: usize,
    delta: Tensor,
}

impl LayerExecutor for Perturb {
    fn run_layer(&mut self, layer: &LayerSpec, input: &Tensor) -> myq_core::Result<Tensor> {
        let y = layer.apply(input)?;
        if layer.index == self.layer {
            ops::add(&y, &self.delta)
        } else {
            Ok(y)
        }
    }
}

/// Checks `∂L/∂o_l` from the tape for `L = Σ c ⊙ logits` on up to
/// `max_elems` entries of each layer output.
pub fn model_error(model: &ModelGraph, x: &Tensor, max_elems: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (outs, mut tape) = model.forward_with_tape(x).unwrap();
    let logits = tape.output().unwrap().clone();
    let c = rand_tensor(rng, logits.shape());
    let grads = tape.backward(&c).unwrap();
    assert_eq!(grads.len(), model.num_layers());
    let mut worst: f64 = 0.0;
    for (l, o) in outs.iter().enumerate() {
        let g = &grads[&l];
        assert_eq!(g.shape(), o.shape());
        let step = (o.len() / max_elems).max(1);
        for i in (0..o.len()).step_by(step) {
            let loss = |h: f64| {
                let mut d = vec![0.0; o.len()];
                d[i] = h;
                let mut exec = Perturb {
                    layer: l,
                    delta: Tensor::new(o.shape().to_vec(), d).unwrap(),
                };
                dot(model.execute(x, &mut exec).unwrap().logits(), &c)
            };
            let num = (loss(H) - loss(-H)) / (2.0 * H);
            worst = worst.max(rel_err(g.data()[i], num));
        }
    }
    worst
}

/// conv1d → GELU → linear → LayerNorm → linear, all in double precision.
pub fn three_layer_model(rng: &mut ChaCha8Rng) -> ModelGraph {
    let mut g = GraphBuilder::new("three-layer", vec![3, 9]);
    let x = g.input();
    let c = g.conv1d(x, rand_tensor(rng, &[4, 3, 3]), Some(rand_tensor(rng, &[4])), 1);
    let a = g.gelu(c);
    let t = g.transpose(a);
    let h = g.linear(t, LayerKind::Linear, rand_tensor(rng, &[6, 4]), Some(rand_tensor(rng, &[6])));
    let n = g.layernorm(h, rand_tensor(rng, &[6]), rand_tensor(rng, &[6]), 1e-5);
    g.linear(n, LayerKind::Linear, rand_tensor(rng, &[5, 6]), None);
    g.finish().unwrap()
}

pub fn three_layer_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = three_layer_model(&mut rng);
    assert_eq!(model.num_layers(), 3);
    assert_eq!(model.dtype(), DType::F64);
    let x = rand_tensor(&mut rng, &[3, 9]);
    model_error(&model, &x, usize::MAX, &mut rng)
}

/// A one-block toy encoder promoted to double precision.
pub fn toy_encoder_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        ffn: 16,
        vocab: 6,
        input_channels: 3,
        input_len: 12,
        ..EncoderConfig::default()
    };
    let mut model = build_toy_encoder(&cfg, seed).unwrap();
    for l in &mut model.layers {
        l.weight = l.weight.to_dtype(DType::F64);
        l.bias = l.bias.as_ref().map(|b| b.to_dtype(DType::F64));
    }
    for n in &mut model.norms {
        n.gamma = n.gamma.to_dtype(DType::F64);
        n.beta = n.beta.to_dtype(DType::F64);
    }
    let x = rand_tensor(&mut rng, &[3, 12]);
    model_error(&model, &x, 12, &mut rng)
}
