//! End-to-end runs: sense, allocate, calibrate, quantize, evaluate.

use serde::{Deserialize, Serialize};

use super::decimal;
use super::domain::{make_domain, DomainSpec};
use super::eval::{evaluate, EvalResult};
use crate::calib::{calibrate, CalibConfig, CalibResult};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::quant::{quantize_model, QuantizedModel};
use crate::sensitivity::{
    allocate_uniform_constrained, observe, rank_by_distance, rank_by_reduction, transform_rank, BitPlan,
    PlanTransform, RankOrder, SensitivityMetric, SensitivityRank,
};
use crate::tensor::Tensor;

pub const THREADS_ENV: &str = "MYQ_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub metric: SensitivityMetric,
    pub rank_order: RankOrder,
    /// Weight bit depth used to probe layers for the distance metrics.
    pub probe_bits: u32,
    pub plan_transform: PlanTransform,
    /// Seed for the shuffle transform.
    pub seed: u64,
    pub calib: CalibConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            metric: SensitivityMetric::Median,
            rank_order: RankOrder::Asc,
            probe_bits: 4,
            plan_transform: PlanTransform::None,
            seed: 0,
            calib: CalibConfig::default(),
        }
    }
}

/// Ranks layers on `calib` under `cfg.metric`.
pub fn sense(model: &ModelGraph, calib: &[Tensor], cfg: &PipelineConfig) -> Result<SensitivityRank> {
    if cfg.metric.is_reduction() {
        let stats = observe(model, calib, cfg.calib.median_cap)?;
        rank_by_reduction(&stats, cfg.metric, cfg.rank_order)
    } else {
        rank_by_distance(model, calib, cfg.probe_bits, cfg.metric, cfg.rank_order)
    }
}

/// A ranking together with the plan allocated from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifact {
    #[serde(with = "decimal")]
    pub budget_mb: f64,
    pub rank_order: RankOrder,
    pub transform: PlanTransform,
    pub rank: SensitivityRank,
    pub plan: BitPlan,
}

/// Applies the configured transform to `rank` and allocates under the budget.
pub fn allocate(
    model: &ModelGraph,
    rank: SensitivityRank,
    budget_mb: f64,
    cfg: &PipelineConfig,
) -> Result<PlanArtifact> {
    rank.validate(model.num_layers())?;
    let rank = transform_rank(&rank, cfg.plan_transform, cfg.seed);
    let plan = allocate_uniform_constrained(&rank, &model.param_count(), budget_mb)?;
    Ok(PlanArtifact {
        budget_mb,
        rank_order: cfg.rank_order,
        transform: cfg.plan_transform,
        rank,
        plan,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub plan: PlanArtifact,
    pub calib: CalibResult,
    pub qmodel: QuantizedModel,
    pub eval: EvalResult,
}

/// Plans and calibrates on `calib`, then evaluates on `eval`.
pub fn run_pipeline(
    model: &ModelGraph,
    calib: &[Tensor],
    eval: &[Tensor],
    budget_mb: f64,
    cfg: &PipelineConfig,
) -> Result<PipelineRun> {
    let plan = allocate(model, sense(model, calib, cfg)?, budget_mb, cfg)?;
    let calib_result = calibrate(model, calib, &plan.plan, &cfg.calib)?;
    let qmodel = quantize_model(model, &plan.plan, &calib_result.act_params())?;
    let eval = evaluate(model, &qmodel, eval)?;
    Ok(PipelineRun {
        plan,
        calib: calib_result,
        qmodel,
        eval,
    })
}

/// Same-domain and cross-domain results. `cells[i][j]` is calibrated on
/// domain `i` and evaluated on the held-out split of domain `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbResult {
    #[serde(with = "decimal")]
    pub budget_mb: f64,
    pub plans: [BitPlan; 2],
    pub cells: [[EvalResult; 2]; 2],
}

impl AbResult {
    pub fn same_domain(&self, i: usize) -> &EvalResult {
        &self.cells[i][i]
    }

    pub fn cross_domain(&self, i: usize) -> &EvalResult {
        &self.cells[1 - i][i]
    }
}

pub fn ab_experiment(
    model: &ModelGraph,
    a: &DomainSpec,
    b: &DomainSpec,
    budget_mb: f64,
    cfg: &PipelineConfig,
) -> Result<AbResult> {
    let calib = [make_domain(a)?, make_domain(b)?];
    let eval = [make_domain(&a.held_out())?, make_domain(&b.held_out())?];
    let mut plans = Vec::with_capacity(2);
    let mut cells = Vec::with_capacity(2);
    for c in &calib {
        let run = run_pipeline(model, c, &eval[0], budget_mb, cfg)?;
        let other = evaluate(model, &run.qmodel, &eval[1])?;
        plans.push(run.plan.plan);
        cells.push([run.eval, other]);
    }
    Ok(AbResult {
        budget_mb,
        plans: plans.try_into().expect("two plans"),
        cells: cells.try_into().expect("two rows"),
    })
}

/// Sizes the global worker pool from `MYQ_THREADS` when set; returns the
/// thread count in effect.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
