//! JSON run reports.
//!
//! A report has the sections `model`, `sensitivity`, `plan`, `calibration`,
//! `eval` and `environment`. Floats in every section except `environment` are
//! decimal strings. `sha256` covers the compact serialization of the five
//! hashed sections, so identical runs produce identical digests regardless of
//! timing or host.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::decimal;
use super::eval::EvalResult;
use super::pipeline::{AbResult, PlanArtifact};
use crate::calib::{CalibConfig, CalibResult};
use crate::error::{Error, Result};
use crate::model::{fingerprint, write_atomic, ModelGraph};
use crate::quant::ActParams;
use crate::sensitivity::{uniform_size, PlanTransform, RankOrder, SensitivityMetric};
use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub name: String,
    pub fingerprint: String,
    pub dtype: DType,
    pub layers: usize,
    pub params: Vec<usize>,
    pub total_params: usize,
    #[serde(with = "decimal")]
    pub fp_size_mb: f64,
}

impl ModelSection {
    pub fn of(model: &ModelGraph) -> Result<Self> {
        let params = model.param_count();
        Ok(Self {
            name: model.name.clone(),
            fingerprint: fingerprint(model)?,
            dtype: model.dtype(),
            layers: model.num_layers(),
            total_params: model.total_params(),
            fp_size_mb: uniform_size(32, &params),
            params,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySection {
    pub metric: SensitivityMetric,
    pub rank_order: RankOrder,
    pub probe_bits: Option<u32>,
    #[serde(with = "decimal::vec")]
    pub values: Vec<f64>,
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSection {
    #[serde(with = "decimal")]
    pub budget_mb: f64,
    pub transform: PlanTransform,
    pub order: Vec<usize>,
    pub bits: Vec<u32>,
    #[serde(with = "decimal")]
    pub size_mb: f64,
    pub spread: u32,
}

impl PlanSection {
    pub fn of(p: &PlanArtifact) -> Self {
        Self {
            budget_mb: p.budget_mb,
            transform: p.transform,
            order: p.rank.order.clone(),
            bits: p.plan.bits.clone(),
            size_mb: p.plan.size_mb,
            spread: p.plan.spread(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibLayerEntry {
    /// `float`, `affine` or `two_range`.
    pub kind: String,
    pub bits: u32,
    #[serde(with = "decimal::option", default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_point: Option<i64>,
    #[serde(with = "decimal::option", default, skip_serializing_if = "Option::is_none")]
    pub scale_neg: Option<f64>,
    #[serde(with = "decimal::option", default, skip_serializing_if = "Option::is_none")]
    pub scale_pos: Option<f64>,
    #[serde(with = "decimal::option")]
    pub objective: Option<f64>,
    #[serde(with = "decimal::option")]
    pub base_objective: Option<f64>,
    #[serde(with = "decimal::vec")]
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSection {
    pub method: crate::calib::CalibMethod,
    pub act_bits: u32,
    pub candidates: usize,
    pub rounds: usize,
    #[serde(with = "decimal::vec")]
    pub grid: Vec<f64>,
    pub layers: Vec<CalibLayerEntry>,
}

impl CalibrationSection {
    pub fn of(cfg: &CalibConfig, r: &CalibResult) -> Self {
        let layers = r
            .layers
            .iter()
            .map(|l| {
                let mut e = CalibLayerEntry {
                    kind: String::new(),
                    bits: l.params.bits(),
                    scale: None,
                    zero_point: None,
                    scale_neg: None,
                    scale_pos: None,
                    objective: l.objective,
                    base_objective: l.base_objective,
                    multipliers: l.multipliers.clone(),
                };
                match l.params {
                    ActParams::Float => e.kind = "float".into(),
                    ActParams::Affine(p) => {
                        e.kind = "affine".into();
                        e.scale = Some(p.scale);
                        e.zero_point = Some(p.zero_point);
                    }
                    ActParams::TwoRange(p) => {
                        e.kind = "two_range".into();
                        e.scale_neg = Some(p.scale_neg);
                        e.scale_pos = Some(p.scale_pos);
                    }
                }
                e
            })
            .collect();
        Self {
            method: r.method,
            act_bits: cfg.act_bits,
            candidates: cfg.candidates,
            rounds: cfg.rounds,
            grid: vec![cfg.grid.0, cfg.grid.1],
            layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub calibrated_on: String,
    pub evaluated_on: String,
    pub samples: usize,
    #[serde(flatten)]
    pub metrics: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub runs: Vec<EvalEntry>,
}

impl EvalSection {
    pub fn single(calibrated_on: &str, evaluated_on: &str, samples: usize, metrics: EvalResult) -> Self {
        Self {
            runs: vec![EvalEntry {
                calibrated_on: calibrated_on.into(),
                evaluated_on: evaluated_on.into(),
                samples,
                metrics,
            }],
        }
    }

    /// The 2×2 domain matrix, row-major by calibration domain.
    pub fn matrix(ab: &AbResult, names: [&str; 2], samples: [usize; 2]) -> Self {
        let mut runs = Vec::with_capacity(4);
        for (i, row) in ab.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                runs.push(EvalEntry {
                    calibrated_on: names[i].into(),
                    evaluated_on: names[j].into(),
                    samples: samples[j],
                    metrics: *cell,
                });
            }
        }
        Self { runs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSection {
    pub version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    /// Wall-clock seconds per step.
    pub seconds: BTreeMap<String, f64>,
}

impl EnvironmentSection {
    pub fn current() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: rayon::current_num_threads(),
            seconds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivitySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<EnvironmentSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Serialize)]
struct Hashed<'a> {
    model: &'a Option<ModelSection>,
    sensitivity: &'a Option<SensitivitySection>,
    plan: &'a Option<PlanSection>,
    calibration: &'a Option<CalibrationSection>,
    eval: &'a Option<EvalSection>,
}

impl Report {
    /// Compact JSON of the hashed sections.
    pub fn hashed_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&Hashed {
            model: &self.model,
            sensitivity: &self.sensitivity,
            plan: &self.plan,
            calibration: &self.calibration,
            eval: &self.eval,
        })?)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.hashed_bytes()?)))
    }

    /// Sets `sha256` to the current digest.
    pub fn seal(&mut self) -> Result<()> {
        self.sha256 = Some(self.digest()?);
        Ok(())
    }

    /// Overwrites every section present in `other`.
    pub fn merge(&mut self, other: Report) {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if other.$f.is_some() {
                    self.$f = other.$f;
                }
            )*};
        }
        take!(model, sensitivity, plan, calibration, eval);
        match (&mut self.environment, other.environment) {
            (Some(mine), Some(theirs)) => {
                mine.seconds.extend(theirs.seconds);
                mine.threads = theirs.threads;
            }
            (mine, theirs) => {
                if theirs.is_some() {
                    *mine = theirs;
                }
            }
        }
        self.sha256 = None;
    }

    /// Sealed, pretty-printed JSON.
    pub fn to_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.seal()?;
        Ok(serde_json::to_string_pretty(&r)? + "\n")
    }

    /// Parses a report and checks its digest when one is present.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text)?;
        if let Some(d) = &r.sha256 {
            let actual = r.digest()?;
            if *d != actual {
                return Err(Error::Usage(format!("report digest mismatch: recorded {d}, computed {actual}")));
            }
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Loads `path` if it exists, merges `update` into it and saves.
    pub fn update_file(path: impl AsRef<Path>, update: Report) -> Result<Report> {
        let path = path.as_ref();
        let mut r = if path.exists() { Self::load(path)? } else { Report::default() };
        r.merge(update);
        r.seal()?;
        r.save(path)?;
        Ok(r)
    }
}
