//! Activation-quantizer calibration.
//!
//! Search methods score a grid of candidate scales per layer and keep the
//! best one. Every layer is calibrated on its floating-point input, so the
//! result for one layer never depends on another.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGraph, Trace};
use crate::ops;
use crate::quant::{
    activation_params_minmax, dequantize, quantize, weight_params_symmetric, ActParams, AffineParams,
    ScaleDenominator, TwoRangeParams,
};
use crate::sensitivity::{observe_all, BitPlan, LayerStats, DEFAULT_MEDIAN_CAP};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMethod {
    /// Fixed, data-independent range `[−1, 1]`.
    None,
    Minmax,
    L1,
    L2,
    LinwL2,
    SqwL2,
    Hess,
    Cosine,
}

impl CalibMethod {
    pub const ALL: [CalibMethod; 8] = [
        Self::None,
        Self::Minmax,
        Self::L1,
        Self::L2,
        Self::LinwL2,
        Self::SqwL2,
        Self::Hess,
        Self::Cosine,
    ];

    pub const SEARCH: [CalibMethod; 6] = [Self::L1, Self::L2, Self::LinwL2, Self::SqwL2, Self::Hess, Self::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Minmax => "minmax",
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::LinwL2 => "linw_l2",
            Self::SqwL2 => "sqw_l2",
            Self::Hess => "hess",
            Self::Cosine => "cosine",
        }
    }

    pub fn is_search(self) -> bool {
        !matches!(self, Self::None | Self::Minmax)
    }
}

impl fmt::Display for CalibMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CalibMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown calibration method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub method: CalibMethod,
    /// Activation bit depth; 32 leaves activations in floating point.
    pub act_bits: u32,
    pub candidates: usize,
    pub rounds: usize,
    pub grid: (f64, f64),
    pub scale_denominator: ScaleDenominator,
    pub median_cap: Option<usize>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            method: CalibMethod::Minmax,
            act_bits: 8,
            candidates: 100,
            rounds: 3,
            grid: (0.1, 1.2),
            scale_denominator: ScaleDenominator::default(),
            median_cap: Some(DEFAULT_MEDIAN_CAP),
        }
    }
}

impl CalibConfig {
    pub fn with_method(method: CalibMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.grid;
        if self.candidates < 2 {
            return Err(Error::Config(format!("need at least 2 candidates, got {}", self.candidates)));
        }
        if self.rounds < 1 {
            return Err(Error::Config("need at least 1 search round".into()));
        }
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::Config(format!("grid [{lo}, {hi}] must satisfy 0 < lo < hi")));
        }
        if self.act_bits != 32 && !(2..=16).contains(&self.act_bits) {
            return Err(Error::Config(format!(
                "activation bits {} must be in 2..=16 or 32",
                self.act_bits
            )));
        }
        Ok(())
    }
}

/// `t` multipliers linearly spaced over the grid, ascending. A multiplier
/// within `1e-9` of 1.0 is snapped to exactly 1.0; if none is, 1.0 is inserted.
pub fn candidate_multipliers(cfg: &CalibConfig) -> Vec<f64> {
    let (lo, hi) = cfg.grid;
    let t = cfg.candidates;
    let mut m: Vec<f64> = (0..t)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / (t - 1) as f64;
            if (v - 1.0).abs() <= 1e-9 {
                1.0
            } else {
                v
            }
        })
        .collect();
    if !m.contains(&1.0) {
        let at = m.partition_point(|&v| v < 1.0);
        m.insert(at, 1.0);
    }
    m
}

/// Candidate scales for a base scale.
pub fn candidate_grid(base_scale: f64, cfg: &CalibConfig) -> Vec<f64> {
    candidate_multipliers(cfg).into_iter().map(|m| m * base_scale).collect()
}

fn check_pair(q: &Tensor, o: &Tensor) -> Result<()> {
    if q.shape() != o.shape() {
        return Err(Error::dim("objective", q.shape(), o.shape()));
    }
    Ok(())
}

/// `Σ |Δ|`.
pub fn objective_l1(q: &Tensor, o: &Tensor) -> Result<f64> {
    check_pair(q, o)?;
    Ok(q.data().iter().zip(o.data()).map(|(a, b)| (a - b).abs()).sum())
}

/// `Σ Δ²`.
pub fn objective_l2(q: &Tensor, o: &Tensor) -> Result<f64> {
    check_pair(q, o)?;
    Ok(q.data().iter().zip(o.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `Σ |o|·Δ²`.
pub fn objective_linw_l2(q: &Tensor, o: &Tensor) -> Result<f64> {
    check_pair(q, o)?;
    Ok(q.data().iter().zip(o.data()).map(|(a, b)| b.abs() * (a - b) * (a - b)).sum())
}

/// `Σ o²·Δ²`.
pub fn objective_sqw_l2(q: &Tensor, o: &Tensor) -> Result<f64> {
    check_pair(q, o)?;
    Ok(q.data().iter().zip(o.data()).map(|(a, b)| b * b * (a - b) * (a - b)).sum())
}

/// `Σ g²·Δ²` with `g = ∂L/∂o`.
pub fn objective_hessian(q: &Tensor, o: &Tensor, grad: &Tensor) -> Result<f64> {
    check_pair(q, o)?;
    check_pair(grad, o)?;
    Ok(q.data()
        .iter()
        .zip(o.data())
        .zip(grad.data())
        .map(|((a, b), g)| g * g * ((a - b) * (a - b)))
        .sum())
}

/// `1 − cos(q, o)` on the flattened tensors; a zero vector scores 1.
pub fn objective_cosine(q: &Tensor, o: &Tensor) -> Result<f64> {
    check_pair(q, o)?;
    let (mut dot, mut nq, mut no) = (0.0, 0.0, 0.0);
    for (a, b) in q.data().iter().zip(o.data()) {
        dot += a * b;
        nq += a * a;
        no += b * b;
    }
    if nq == 0.0 || no == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - dot / (nq * no).sqrt())
}

/// Per-sample objective of `method`. `grad` is required for `hess`.
pub fn objective(method: CalibMethod, q: &Tensor, o: &Tensor, grad: Option<&Tensor>) -> Result<f64> {
    match method {
        CalibMethod::L1 => objective_l1(q, o),
        CalibMethod::L2 => objective_l2(q, o),
        CalibMethod::LinwL2 => objective_linw_l2(q, o),
        CalibMethod::SqwL2 => objective_sqw_l2(q, o),
        CalibMethod::Cosine => objective_cosine(q, o),
        CalibMethod::Hess => {
            let g = grad.ok_or_else(|| Error::Usage("hessian objective needs gradients".into()))?;
            objective_hessian(q, o, g)
        }
        m => Err(Error::Usage(format!("{m} has no search objective"))),
    }
}

/// Gradient of the summed per-frame cross-entropy against the logits' own
/// argmax: `softmax(z) − onehot(argmax z)`.
pub fn pseudo_label_grad(logits: &Tensor) -> Result<Tensor> {
    let labels = logits.argmax_rows()?;
    let p = ops::softmax(&logits.to_dtype(DType::F64), 1)?;
    let cols = logits.shape()[1];
    let mut data = p.to_vec();
    for (r, &y) in labels.iter().enumerate() {
        data[r * cols + y] -= 1.0;
    }
    Tensor::new(logits.shape().to_vec(), data)
}

/// `∂L/∂o_l` for every layer, with `L` the pseudo-label cross-entropy.
pub fn layer_gradients(model: &ModelGraph, x: &Tensor) -> Result<Vec<Tensor>> {
    let (_, mut tape) = model.forward_with_tape(x)?;
    let logits = tape.output().expect("non-empty tape").clone();
    let grads = tape.backward(&pseudo_label_grad(&logits)?)?;
    Ok(grads.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalib {
    pub params: ActParams,
    /// Objective of the chosen parameters; absent for methods without search.
    pub objective: Option<f64>,
    /// Objective of the min-max starting point.
    pub base_objective: Option<f64>,
    /// Chosen multiplier(s) of the base scale: one for affine layers,
    /// `[negative, positive]` for two-range layers.
    pub multipliers: Vec<f64>,
    /// Best objective after each half-round of a two-range search.
    pub history: Vec<f64>,
}

impl LayerCalib {
    fn fixed(params: ActParams) -> Self {
        Self {
            params,
            objective: None,
            base_objective: None,
            multipliers: Vec::new(),
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibResult {
    pub method: CalibMethod,
    pub layers: Vec<LayerCalib>,
    pub seconds: f64,
}

impl CalibResult {
    pub fn act_params(&self) -> Vec<ActParams> {
        self.layers.iter().map(|l| l.params).collect()
    }
}

/// Min-max parameters from per-layer input statistics.
pub fn calibrate_minmax(input_stats: &[LayerStats], bits: u32, denom: ScaleDenominator) -> Result<CalibResult> {
    let start = Instant::now();
    let layers = input_stats
        .iter()
        .enumerate()
        .map(|(l, s)| {
            if bits == 32 {
                return Ok(LayerCalib::fixed(ActParams::Float));
            }
            activation_params_minmax(s.min, s.max, bits, denom)
                .map(|p| LayerCalib::fixed(ActParams::Affine(p)))
                .map_err(|e| e.at_layer(l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibResult {
        method: CalibMethod::Minmax,
        layers,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The data-independent range `[−1, 1]` for every layer.
pub fn calibrate_none(layers: usize, bits: u32, denom: ScaleDenominator) -> Result<CalibResult> {
    let params = if bits == 32 {
        ActParams::Float
    } else {
        ActParams::Affine(activation_params_minmax(-1.0, 1.0, bits, denom)?)
    };
    Ok(CalibResult {
        method: CalibMethod::None,
        layers: vec![LayerCalib::fixed(params); layers],
        seconds: 0.0,
    })
}

/// Everything a per-layer search needs, computed once: FP traces, input
/// statistics, quantized weights and, for `hess`, cached gradients.
pub struct CalibContext<'a> {
    model: &'a ModelGraph,
    cfg: CalibConfig,
    traces: Vec<Trace>,
    inputs: Vec<LayerStats>,
    weights: Vec<(Tensor, Option<Tensor>)>,
    grads: Option<Vec<Vec<Tensor>>>,
}

impl<'a> CalibContext<'a> {
    pub fn new(model: &'a ModelGraph, calib: &[Tensor], plan: &BitPlan, cfg: &CalibConfig) -> Result<Self> {
        cfg.validate()?;
        if plan.bits.len() != model.num_layers() {
            return Err(Error::Usage(format!(
                "plan covers {} layers, model has {}",
                plan.bits.len(),
                model.num_layers()
            )));
        }
        let obs = observe_all(model, calib, cfg.median_cap)?;
        let traces = calib.par_iter().map(|x| model.trace(x)).collect::<Result<Vec<_>>>()?;
        let weights = model
            .layers
            .iter()
            .zip(&plan.bits)
            .map(|(spec, &bits)| {
                let fake = |t: &Tensor| -> Result<Tensor> {
                    if bits == 32 {
                        return Ok(t.to_dtype(DType::F64));
                    }
                    let p = weight_params_symmetric(t, bits)?;
                    Ok(dequantize(&quantize(t, &p), &p))
                };
                Ok((fake(&spec.weight)?, spec.bias.as_ref().map(fake).transpose()?))
            })
            .collect::<Result<Vec<_>>>()?;
        let grads = if cfg.method == CalibMethod::Hess {
            Some(calib.par_iter().map(|x| layer_gradients(model, x)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Self {
            model,
            cfg: cfg.clone(),
            traces,
            inputs: obs.inputs,
            weights,
            grads,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.model.num_layers()
    }

    /// Mean objective over the calibration set for one candidate.
    pub fn score(&self, l: usize, params: &ActParams) -> Result<f64> {
        let spec = &self.model.layers[l];
        let (w, b) = &self.weights[l];
        let mut total = 0.0;
        for (s, tr) in self.traces.iter().enumerate() {
            let x = params.fake_quant(&tr.layer_input(l).to_dtype(DType::F64));
            let q = spec.apply_with(&x, w, b.as_ref())?;
            let g = self.grads.as_ref().map(|g| &g[s][l]);
            total += objective(self.cfg.method, &q, tr.layer_output(l), g)?;
        }
        Ok(total / self.traces.len() as f64)
    }

    /// Scores `make(m)` for every grid multiplier and returns the winner
    /// `(multiplier, objective)`. Ties go to the multiplier nearest 1.0, then
    /// the smaller one; non-finite scores are discarded.
    fn search(&self, l: usize, mults: &[f64], make: impl Fn(f64) -> Result<ActParams>) -> Result<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for &m in mults {
            let Ok(p) = make(m) else { continue };
            let score = self.score(l, &p)?;
            if !score.is_finite() {
                continue;
            }
            let better = match best {
                None => true,
                Some((bm, bs)) => {
                    score < bs || (score == bs && ((m - 1.0).abs(), m) < ((bm - 1.0).abs(), bm))
                }
            };
            if better {
                best = Some((m, score));
            }
        }
        best.ok_or_else(|| Error::Calibration {
            layer: l,
            message: "every candidate scale produced a non-finite objective".into(),
        })
    }

    /// Calibrates layer `l` alone.
    pub fn calibrate_layer(&self, l: usize) -> Result<LayerCalib> {
        let bits = self.cfg.act_bits;
        if bits == 32 {
            return Ok(LayerCalib::fixed(ActParams::Float));
        }
        let stats = &self.inputs[l];
        let mults = candidate_multipliers(&self.cfg);
        if self.model.layers[l].activation.is_two_range() {
            let base = TwoRangeParams::symmetric_start(stats.max_abs, bits).map_err(|e| e.at_layer(l))?;
            let make = |mn: f64, mp: f64| -> Result<ActParams> {
                Ok(ActParams::TwoRange(TwoRangeParams::new(
                    base.scale_neg * mn,
                    base.scale_pos * mp,
                    bits,
                )?))
            };
            let base_objective = self.score(l, &make(1.0, 1.0)?)?;
            let (mut mn, mut mp) = (1.0, 1.0);
            let mut best = base_objective;
            let mut history = Vec::with_capacity(2 * self.cfg.rounds);
            for _ in 0..self.cfg.rounds {
                (mn, best) = self.search(l, &mults, |m| make(m, mp))?;
                history.push(best);
                (mp, best) = self.search(l, &mults, |m| make(mn, m))?;
                history.push(best);
            }
            Ok(LayerCalib {
                params: make(mn, mp)?,
                objective: Some(best),
                base_objective: Some(base_objective),
                multipliers: vec![mn, mp],
                history,
            })
        } else {
            let base: AffineParams = activation_params_minmax(stats.min, stats.max, bits, self.cfg.scale_denominator)
                .map_err(|e| e.at_layer(l))?;
            let make = |m: f64| -> Result<ActParams> { Ok(ActParams::Affine(base.rescaled(base.scale * m, stats.min)?)) };
            let base_objective = self.score(l, &make(1.0)?)?;
            let (m, best) = self.search(l, &mults, make)?;
            Ok(LayerCalib {
                params: make(m)?,
                objective: Some(best),
                base_objective: Some(base_objective),
                multipliers: vec![m],
                history: vec![best],
            })
        }
    }
}

/// Calibrates every layer with a grid search under `cfg.method`.
/// `none` and `minmax` need no search and are dispatched directly.
pub fn calibrate_search(model: &ModelGraph, calib: &[Tensor], plan: &BitPlan, cfg: &CalibConfig) -> Result<CalibResult> {
    cfg.validate()?;
    let start = Instant::now();
    match cfg.method {
        CalibMethod::None => return calibrate_none(model.num_layers(), cfg.act_bits, cfg.scale_denominator),
        CalibMethod::Minmax => {
            let obs = observe_all(model, calib, cfg.median_cap)?;
            let mut r = calibrate_minmax(&obs.inputs, cfg.act_bits, cfg.scale_denominator)?;
            r.seconds = start.elapsed().as_secs_f64();
            return Ok(r);
        }
        _ => {}
    }
    let ctx = CalibContext::new(model, calib, plan, cfg)?;
    let layers = (0..ctx.num_layers())
        .into_par_iter()
        .map(|l| ctx.calibrate_layer(l))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibResult {
        method: cfg.method,
        layers,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Calibration entry point for any method.
pub fn calibrate(model: &ModelGraph, calib: &[Tensor], plan: &BitPlan, cfg: &CalibConfig) -> Result<CalibResult> {
    calibrate_search(model, calib, plan, cfg)
}
