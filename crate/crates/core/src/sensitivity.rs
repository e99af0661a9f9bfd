//! Activation observers, sensitivity ranking and bit allocation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::quant::{dequantize, quantize, weight_params_symmetric};
use crate::tensor::Tensor;

/// Default per-layer cap on the population kept for the median.
pub const DEFAULT_MEDIAN_CAP: usize = 1 << 22;
const RESERVOIR_SEED: u64 = 0x6d79_715f_6d65_6421;

/// Summary statistics of every scalar a layer produced over a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub mean: f64,
    pub max_abs: f64,
    pub std: f64,
    pub count: u64,
}

impl LayerStats {
    /// Statistics of `values`. Min, max, mean and std cover every value; the
    /// median is exact over at most `cap` values drawn by a seeded reservoir.
    pub fn from_values(values: &[f64], cap: Option<usize>, seed: u64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Usage("no values to summarize".into()));
        }
        let n = values.len() as f64;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        let mean = sum / n;
        let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut pop = match cap {
            Some(c) if c > 0 && values.len() > c => reservoir(values, c, seed),
            _ => values.to_vec(),
        };
        Ok(Self {
            min,
            max,
            median: median_in_place(&mut pop),
            mean,
            max_abs: min.abs().max(max.abs()),
            std: var.sqrt(),
            count: values.len() as u64,
        })
    }

    pub fn get(&self, metric: SensitivityMetric) -> Option<f64> {
        Some(match metric {
            SensitivityMetric::Avg => self.mean,
            SensitivityMetric::Median => self.median,
            SensitivityMetric::Max => self.max,
            SensitivityMetric::MaxAbs => self.max_abs,
            SensitivityMetric::Std => self.std,
            _ => return None,
        })
    }
}

/// Exact median; the midpoint of the two central values for even counts.
pub fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn reservoir(values: &[f64], cap: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = values[..cap].to_vec();
    for (i, &v) in values.iter().enumerate().skip(cap) {
        let j = rng.random_range(0..=i);
        if j < cap {
            keep[j] = v;
        }
    }
    keep
}

/// Output (`o_l`) and input (`X_l`) statistics for every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub outputs: Vec<LayerStats>,
    pub inputs: Vec<LayerStats>,
}

fn check_calib(calib: &[Tensor]) -> Result<()> {
    if calib.is_empty() {
        return Err(Error::Usage("calibration set is empty".into()));
    }
    Ok(())
}

/// Runs the FP model over `calib` and summarizes every layer's inputs and outputs.
/// Samples are evaluated in parallel; populations are concatenated in sample order.
pub fn observe_all(model: &ModelGraph, calib: &[Tensor], cap: Option<usize>) -> Result<Observations> {
    check_calib(calib)?;
    let traces = calib
        .par_iter()
        .map(|x| model.trace(x))
        .collect::<Result<Vec<_>>>()?;
    let summarize = |l: usize, outputs: bool| -> Result<LayerStats> {
        let mut pop = Vec::new();
        for tr in &traces {
            let t = if outputs { tr.layer_output(l) } else { tr.layer_input(l) };
            pop.extend_from_slice(t.data());
        }
        LayerStats::from_values(&pop, cap, RESERVOIR_SEED ^ l as u64).map_err(|e| e.at_layer(l))
    };
    let layers: Vec<usize> = (0..model.num_layers()).collect();
    let outputs = layers
        .par_iter()
        .map(|&l| summarize(l, true))
        .collect::<Result<Vec<_>>>()?;
    let inputs = layers
        .par_iter()
        .map(|&l| summarize(l, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(Observations { outputs, inputs })
}

/// Output statistics per layer.
pub fn observe(model: &ModelGraph, calib: &[Tensor], cap: Option<usize>) -> Result<Vec<LayerStats>> {
    Ok(observe_all(model, calib, cap)?.outputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMetric {
    Avg,
    Median,
    Max,
    MaxAbs,
    Std,
    L1,
    L2,
    Sn,
    Frob,
    Kl,
}

impl SensitivityMetric {
    pub const ALL: [SensitivityMetric; 10] = [
        Self::Avg,
        Self::Median,
        Self::Max,
        Self::MaxAbs,
        Self::Std,
        Self::L1,
        Self::L2,
        Self::Sn,
        Self::Frob,
        Self::Kl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Avg => "avg",
            Self::Median => "median",
            Self::Max => "max",
            Self::MaxAbs => "max_abs",
            Self::Std => "std",
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::Sn => "sn",
            Self::Frob => "frob",
            Self::Kl => "kl",
        }
    }

    /// Reduction metrics summarize FP activations; the rest compare
    /// quantized and FP outputs.
    pub fn is_reduction(self) -> bool {
        matches!(self, Self::Avg | Self::Median | Self::Max | Self::MaxAbs | Self::Std)
    }
}

impl fmt::Display for SensitivityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SensitivityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankOrder {
    /// Smallest value first: that layer loses bits first.
    #[default]
    Asc,
    Desc,
}

impl FromStr for RankOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asc" => Ok(Self::Asc),
            "desc" => Ok(Self::Desc),
            _ => Err(Error::Usage(format!("unknown rank order {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRank {
    /// `q̂`: layer indices in the order they are decremented.
    pub order: Vec<usize>,
    pub metric: SensitivityMetric,
    /// Raw per-layer metric values, indexed by layer.
    pub values: Vec<f64>,
}

impl SensitivityRank {
    /// Sorts layers by `|value|`; ties go to the lower index.
    pub fn from_values(values: Vec<f64>, metric: SensitivityMetric, order: RankOrder) -> Self {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| {
            let c = values[a].abs().total_cmp(&values[b].abs());
            let c = if order == RankOrder::Desc { c.reverse() } else { c };
            c.then(a.cmp(&b))
        });
        Self {
            order: idx,
            metric,
            values,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let mut seen = vec![false; layers];
        if self.order.len() != layers {
            return Err(Error::Usage(format!(
                "rank lists {} layers, expected {layers}",
                self.order.len()
            )));
        }
        for &l in &self.order {
            if l >= layers || std::mem::replace(&mut seen[l], true) {
                return Err(Error::Usage(format!("rank is not a permutation of 0..{layers}")));
            }
        }
        Ok(())
    }
}

pub fn rank_by_reduction(stats: &[LayerStats], metric: SensitivityMetric, order: RankOrder) -> Result<SensitivityRank> {
    if !metric.is_reduction() {
        return Err(Error::Usage(format!("{metric} is not a reduction metric")));
    }
    let values = stats.iter().map(|s| s.get(metric).expect("reduction metric")).collect();
    Ok(SensitivityRank::from_values(values, metric, order))
}

pub const KL_BINS: usize = 2048;
pub const KL_EPS: f64 = 1e-10;
const SN_MAX_ITERS: usize = 100;
const SN_TOL: f64 = 1e-8;

/// Distance between a quantized output `q` and its FP reference `o`.
pub fn distance(metric: SensitivityMetric, q: &Tensor, o: &Tensor) -> Result<f64> {
    if q.shape() != o.shape() {
        return Err(Error::dim("distance", q.shape(), o.shape()));
    }
    let delta = || q.data().iter().zip(o.data()).map(|(a, b)| a - b);
    Ok(match metric {
        SensitivityMetric::L1 => delta().map(f64::abs).sum(),
        // The Frobenius norm of the 2-D difference is the flattened 2-norm.
        SensitivityMetric::L2 | SensitivityMetric::Frob => delta().map(|d| d * d).sum::<f64>().sqrt(),
        SensitivityMetric::Sn => {
            let cols = *o.shape().last().expect("non-empty shape");
            spectral_norm(&delta().collect::<Vec<_>>(), cols)
        }
        SensitivityMetric::Kl => kl_divergence(o.data(), q.data()),
        m => return Err(Error::Usage(format!("{m} is not a distance metric"))),
    })
}

/// Largest singular value of a row-major `[n/cols × cols]` matrix by power iteration.
pub fn spectral_norm(a: &[f64], cols: usize) -> f64 {
    let rows = a.len() / cols;
    if a.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut sigma = 0.0;
    for _ in 0..SN_MAX_ITERS {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let u: Vec<f64> = (0..rows)
            .map(|r| a[r * cols..(r + 1) * cols].iter().zip(&v).map(|(x, y)| x * y).sum())
            .collect();
        let next = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut w = vec![0.0; cols];
        for r in 0..rows {
            for (wc, &x) in w.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
                *wc += x * u[r];
            }
        }
        let converged = (next - sigma).abs() <= SN_TOL * next;
        sigma = next;
        if converged || w.iter().all(|&x| x == 0.0) {
            break;
        }
        v = w;
    }
    sigma
}

/// `KL(p‖q)` between histograms of `p_vals` and `q_vals` over their common range,
/// with `ε` added to every bin probability.
pub fn kl_divergence(p_vals: &[f64], q_vals: &[f64]) -> f64 {
    let lo = p_vals.iter().chain(q_vals).copied().fold(f64::INFINITY, f64::min);
    let hi = p_vals.iter().chain(q_vals).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return 0.0;
    }
    let width = (hi - lo) / KL_BINS as f64;
    let hist = |vals: &[f64]| {
        let mut h = vec![0.0; KL_BINS];
        for &v in vals {
            let b = (((v - lo) / width) as usize).min(KL_BINS - 1);
            h[b] += 1.0;
        }
        let total = vals.len() as f64;
        let z = 1.0 + KL_BINS as f64 * KL_EPS;
        h.iter_mut().for_each(|c| *c = (*c / total + KL_EPS) / z);
        h
    };
    let p = hist(p_vals);
    let q = hist(q_vals);
    p.iter().zip(&q).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// Quantizes each layer's weights alone at `probe_bits`, feeds it the FP
/// input, and ranks layers by the mean distance of its output to the FP output.
pub fn rank_by_distance(
    model: &ModelGraph,
    calib: &[Tensor],
    probe_bits: u32,
    metric: SensitivityMetric,
    order: RankOrder,
) -> Result<SensitivityRank> {
    check_calib(calib)?;
    if metric.is_reduction() {
        return Err(Error::Usage(format!("{metric} is not a distance metric")));
    }
    if !(2..=16).contains(&probe_bits) {
        return Err(Error::Usage(format!("probe bits {probe_bits} outside 2..=16")));
    }
    let traces = calib
        .par_iter()
        .map(|x| model.trace(x))
        .collect::<Result<Vec<_>>>()?;
    let values = model
        .layers
        .par_iter()
        .map(|spec| {
            let probe = |t: &Tensor| -> Result<Tensor> {
                let p = weight_params_symmetric(t, probe_bits)?;
                Ok(dequantize(&quantize(t, &p), &p).to_dtype(t.dtype()))
            };
            let w = probe(&spec.weight)?;
            let b = spec.bias.as_ref().map(probe).transpose()?;
            let mut total = 0.0;
            for tr in &traces {
                let q = spec.apply_with(tr.layer_input(spec.index), &w, b.as_ref())?;
                total += distance(metric, &q, tr.layer_output(spec.index))?;
            }
            Ok(total / traces.len() as f64)
        })
        .collect::<Vec<Result<f64>>>()
        .into_iter()
        .enumerate()
        .map(|(l, r)| r.map_err(|e| e.at_layer(l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityRank::from_values(values, metric, order))
}

const BITS_PER_MB: f64 = 8.0 * 1024.0 * 1024.0;

fn check_sizes(bits: &[u32], sizes: &[usize]) -> Result<()> {
    if bits.len() != sizes.len() {
        return Err(Error::Usage(format!(
            "{} bit depths for {} layers",
            bits.len(),
            sizes.len()
        )));
    }
    Ok(())
}

fn total_bits(bits: &[u32], sizes: &[usize]) -> u128 {
    bits.iter().zip(sizes).map(|(&b, &n)| b as u128 * n as u128).sum()
}

/// `Σ (b_l/8)·|W_l| / 1024²`.
pub fn compute_model_size(bits: &[u32], sizes: &[usize]) -> Result<f64> {
    check_sizes(bits, sizes)?;
    Ok(total_bits(bits, sizes) as f64 / BITS_PER_MB)
}

/// Size of the model with every layer at `bits`.
pub fn uniform_size(bits: u32, sizes: &[usize]) -> f64 {
    sizes.iter().map(|&n| bits as u128 * n as u128).sum::<u128>() as f64 / BITS_PER_MB
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitPlan {
    pub bits: Vec<u32>,
    pub size_mb: f64,
}

impl BitPlan {
    pub fn new(bits: Vec<u32>, sizes: &[usize]) -> Result<Self> {
        if let Some(&b) = bits.iter().find(|&&b| !(1..=32).contains(&b)) {
            return Err(Error::Usage(format!("bit depth {b} outside 1..=32")));
        }
        let size_mb = compute_model_size(&bits, sizes)?;
        Ok(Self { bits, size_mb })
    }

    pub fn uniform(bits: u32, sizes: &[usize]) -> Result<Self> {
        Self::new(vec![bits; sizes.len()], sizes)
    }

    pub fn spread(&self) -> u32 {
        let max = self.bits.iter().max().copied().unwrap_or(0);
        let min = self.bits.iter().min().copied().unwrap_or(0);
        max - min
    }
}

/// Greedy uniformity-constrained allocation: start at 32 bits everywhere and
/// sweep `q̂` repeatedly, removing one bit from one layer at a time, until the
/// model fits in `budget_mb`. A budget at or above the FP size returns 32s.
pub fn allocate_uniform_constrained(rank: &SensitivityRank, sizes: &[usize], budget_mb: f64) -> Result<BitPlan> {
    rank.validate(sizes.len())?;
    if budget_mb.is_nan() {
        return Err(Error::Usage("budget is NaN".into()));
    }
    let floor_mb = uniform_size(1, sizes);
    if budget_mb < floor_mb {
        return Err(Error::Budget { budget_mb, floor_mb });
    }
    let mut bits = vec![32u32; sizes.len()];
    let mut total = total_bits(&bits, sizes);
    let fits = |total: u128| total as f64 / BITS_PER_MB <= budget_mb;
    if !fits(total) {
        'sweeps: loop {
            for &l in &rank.order {
                bits[l] -= 1;
                total -= sizes[l] as u128;
                if fits(total) {
                    break 'sweeps;
                }
            }
        }
    }
    BitPlan::new(bits, sizes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpPlan {
    pub plan: BitPlan,
    pub budget_mb: f64,
    pub within_budget: bool,
}

/// Linear map from sensitivity to bit depth: the largest value gets
/// `min_bit`, the smallest gets `max_bit`. Equal values all get `max_bit`.
pub fn allocate_minmax_interp(
    values: &[f64],
    min_bit: u32,
    max_bit: u32,
    sizes: &[usize],
    budget_mb: f64,
) -> Result<InterpPlan> {
    if !(1..=32).contains(&min_bit) || !(1..=32).contains(&max_bit) || min_bit >= max_bit {
        return Err(Error::Usage(format!("need 1 ≤ min_bit < max_bit ≤ 32, got {min_bit}, {max_bit}")));
    }
    if values.len() != sizes.len() {
        return Err(Error::Usage(format!("{} values for {} layers", values.len(), sizes.len())));
    }
    let vmin = values.iter().copied().fold(f64::INFINITY, f64::min);
    let vmax = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (max_bit - min_bit) as f64;
    let bits = values
        .iter()
        .map(|&v| {
            if vmax > vmin {
                (max_bit as f64 - (v - vmin) / (vmax - vmin) * span).round() as u32
            } else {
                max_bit
            }
        })
        .collect();
    let plan = BitPlan::new(bits, sizes)?;
    Ok(InterpPlan {
        within_budget: plan.size_mb <= budget_mb,
        plan,
        budget_mb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanTransform {
    #[default]
    None,
    Shuffle,
    Reverse,
}

impl FromStr for PlanTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "shuffle" => Ok(Self::Shuffle),
            "reverse" => Ok(Self::Reverse),
            _ => Err(Error::Usage(format!("unknown plan transform {s:?}"))),
        }
    }
}

fn permute<T>(v: &mut [T], t: PlanTransform, seed: u64) {
    match t {
        PlanTransform::None => {}
        PlanTransform::Reverse => v.reverse(),
        PlanTransform::Shuffle => v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
}

/// Permutes `q̂` before allocation.
pub fn transform_rank(rank: &SensitivityRank, t: PlanTransform, seed: u64) -> SensitivityRank {
    let mut out = rank.clone();
    permute(&mut out.order, t, seed);
    out
}

/// Permutes the final bit depths across layers; the size is recomputed.
pub fn transform_bits(plan: &BitPlan, sizes: &[usize], t: PlanTransform, seed: u64) -> Result<BitPlan> {
    let mut bits = plan.bits.clone();
    permute(&mut bits, t, seed);
    BitPlan::new(bits, sizes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: usize = 1 << 20;

    #[test]
    fn model_size_examples() {
        assert_eq!(compute_model_size(&[8], &[MB]).unwrap(), 1.0);
        assert_eq!(compute_model_size(&[4], &[MB]).unwrap(), 0.5);
        assert_eq!(compute_model_size(&[8, 7, 7], &[MB; 3]).unwrap(), 2.75);
        assert!(compute_model_size(&[8], &[MB, MB]).is_err());
    }

    #[test]
    fn reduction_rank_examples() {
        let r = SensitivityRank::from_values(vec![0.3, 0.1, 0.2], SensitivityMetric::Median, RankOrder::Asc);
        assert_eq!(r.order, vec![1, 2, 0]);
        let r = SensitivityRank::from_values(vec![-0.5, 0.1], SensitivityMetric::Median, RankOrder::Asc);
        assert_eq!(r.order, vec![1, 0]);
        let r = SensitivityRank::from_values(vec![0.2, 0.2], SensitivityMetric::Median, RankOrder::Asc);
        assert_eq!(r.order, vec![0, 1]);
        let r = SensitivityRank::from_values(vec![0.3, 0.1, 0.2], SensitivityMetric::Median, RankOrder::Desc);
        assert_eq!(r.order, vec![0, 2, 1]);
    }

    #[test]
    fn hand_traced_allocation() {
        let rank = SensitivityRank::from_values(vec![0.3, 0.1, 0.2], SensitivityMetric::Median, RankOrder::Asc);
        let plan = allocate_uniform_constrained(&rank, &[MB; 3], 2.8).unwrap();
        assert_eq!(plan.bits, vec![8, 7, 7]);
        assert_eq!(plan.size_mb, 2.75);
    }

    #[test]
    fn single_decrement() {
        let rank = SensitivityRank::from_values(vec![1.0], SensitivityMetric::Median, RankOrder::Asc);
        let fp = uniform_size(32, &[MB]);
        let plan = allocate_uniform_constrained(&rank, &[MB], fp - 0.01).unwrap();
        assert_eq!(plan.bits, vec![31]);
    }

    #[test]
    fn budget_edges() {
        let rank = SensitivityRank::from_values(vec![1.0, 2.0], SensitivityMetric::Median, RankOrder::Asc);
        let sizes = [MB, MB];
        assert_eq!(allocate_uniform_constrained(&rank, &sizes, 100.0).unwrap().bits, vec![32, 32]);
        match allocate_uniform_constrained(&rank, &sizes, 0.2) {
            Err(Error::Budget { floor_mb, .. }) => assert_eq!(floor_mb, 0.25),
            other => panic!("{other:?}"),
        }
        assert_eq!(allocate_uniform_constrained(&rank, &sizes, 0.25).unwrap().bits, vec![1, 1]);
    }

    #[test]
    fn interp_examples() {
        let sizes = [10; 3];
        assert_eq!(allocate_minmax_interp(&[0.1, 0.9], 5, 8, &sizes[..2], 1.0).unwrap().plan.bits, vec![8, 5]);
        assert_eq!(
            allocate_minmax_interp(&[0.1, 0.5, 0.9], 5, 8, &sizes, 1.0).unwrap().plan.bits,
            vec![8, 7, 5]
        );
        assert_eq!(allocate_minmax_interp(&[0.4; 3], 5, 8, &sizes, 1.0).unwrap().plan.bits, vec![8; 3]);
        let out = allocate_minmax_interp(&[0.1, 0.9], 5, 8, &[MB, MB], 1.0).unwrap();
        assert!(!out.within_budget);
    }

    #[test]
    fn median_even_count() {
        assert_eq!(median_in_place(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median_in_place(&mut [3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn stats_and_reservoir() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let s = LayerStats::from_values(&v, None, 0).unwrap();
        assert_eq!((s.min, s.max, s.median, s.mean), (0.0, 999.0, 499.5, 499.5));
        let capped = LayerStats::from_values(&v, Some(101), 3).unwrap();
        assert_eq!(capped, LayerStats::from_values(&v, Some(101), 3).unwrap());
        assert_eq!(capped.max, 999.0);
        assert!((capped.median - 499.5).abs() < 150.0);
    }

    #[test]
    fn distances() {
        let q = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let o = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(distance(SensitivityMetric::L1, &q, &o).unwrap(), 1.0);
        assert_eq!(distance(SensitivityMetric::L2, &q, &o).unwrap(), 1.0);
        assert_eq!(distance(SensitivityMetric::Kl, &o, &o).unwrap(), 0.0);
        let a = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, -2.0]).unwrap();
        let z = Tensor::zeros(vec![2, 2], crate::tensor::DType::F64).unwrap();
        assert!((distance(SensitivityMetric::Sn, &a, &z).unwrap() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn transforms() {
        let rank = SensitivityRank::from_values(vec![0.3, 0.1, 0.2], SensitivityMetric::Median, RankOrder::Asc);
        assert_eq!(transform_rank(&rank, PlanTransform::Reverse, 0).order, vec![0, 2, 1]);
        let mut sh = transform_rank(&rank, PlanTransform::Shuffle, 9).order;
        sh.sort();
        assert_eq!(sh, vec![0, 1, 2]);
        let plan = BitPlan::new(vec![8, 7, 6], &[1, 2, 3]).unwrap();
        let rev = transform_bits(&plan, &[1, 2, 3], PlanTransform::Reverse, 0).unwrap();
        assert_eq!(rev.bits, vec![6, 7, 8]);
    }
}
