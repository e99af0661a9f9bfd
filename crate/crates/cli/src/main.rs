use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use myq_core::calib::{calibrate, CalibConfig, CalibMethod, CalibResult};
use myq_core::harness::pipeline::{allocate, sense, PlanArtifact, THREADS_ENV};
use myq_core::harness::report::{
    CalibrationSection, EnvironmentSection, EvalSection, ModelSection, PlanSection, Report, SensitivitySection,
};
use myq_core::harness::{ab_experiment, configure_threads, evaluate, make_domain, read_samples, write_samples, DomainSpec, PipelineConfig};
use myq_core::model::{load_model, save_model, write_atomic};
use myq_core::quant::{load_quantized, quantize_model, save_quantized, StoredWeights};
use myq_core::sensitivity::{PlanTransform, RankOrder, SensitivityMetric};
use myq_core::{build_toy_encoder, EncoderConfig, Error, ModelGraph};

#[derive(Parser)]
#[command(name = "myq", version, about = "Mixed-precision post-training quantization under a memory budget")]
#[command(after_help = "Set MYQ_THREADS to cap the worker pool.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a model's layers and sizes.
    Inspect(InspectArgs),
    /// Rank layers by sensitivity and allocate bit depths under a budget.
    Sense(SenseArgs),
    /// Choose activation quantization parameters for a plan.
    Calibrate(CalibrateArgs),
    /// Quantize a model with a plan and calibration.
    Quantize(QuantizeArgs),
    /// Compare a quantized model against its source on a sample set.
    Eval(EvalArgs),
    /// Two-domain calibration experiment.
    Ab(AbArgs),
    /// Verify a report and print its digest.
    Report(ReportArgs),
    /// Build a randomly initialized toy encoder.
    Toy(ToyArgs),
    /// Write a synthetic sample set.
    Domain(DomainArgs),
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Also show the layer storage of a quantized model.
    #[arg(long)]
    qmodel: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct RankArgs {
    #[arg(long, default_value = "median")]
    metric: SensitivityMetric,
    #[arg(long, default_value = "asc")]
    rank_order: RankOrder,
    /// Weight bits used to probe layers for the distance metrics.
    #[arg(long, default_value_t = 4)]
    probe_bits: u32,
    #[arg(long, default_value = "none")]
    plan_transform: PlanTransform,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct CalibArgs {
    #[arg(long, default_value = "minmax")]
    calib_method: CalibMethod,
    #[arg(long, default_value_t = 8)]
    act_bits: u32,
    #[arg(long, default_value_t = 100)]
    candidates: usize,
    #[arg(long, default_value_t = 3)]
    rounds: usize,
    /// Multiplier search range as LO,HI.
    #[arg(long, default_value = "0.1,1.2", value_parser = parse_grid)]
    grid: (f64, f64),
}

impl CalibArgs {
    fn config(&self) -> CalibConfig {
        CalibConfig {
            method: self.calib_method,
            act_bits: self.act_bits,
            candidates: self.candidates,
            rounds: self.rounds,
            grid: self.grid,
            ..CalibConfig::default()
        }
    }
}

fn parse_grid(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

#[derive(Args)]
struct SenseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib_dir: PathBuf,
    #[arg(long)]
    budget_mb: f64,
    #[command(flatten)]
    rank: RankArgs,
    /// Plan artifact (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib_dir: PathBuf,
    /// Plan artifact written by `sense`.
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    /// Calibration artifact (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Calibration artifact written by `calibrate`.
    #[arg(long)]
    calib: PathBuf,
    /// Quantized model (MYQZ).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    qmodel: PathBuf,
    #[arg(long)]
    eval_dir: PathBuf,
    /// Name of the calibration set, recorded in the report.
    #[arg(long, default_value = "calib")]
    calib_label: String,
    /// Name of the evaluation set, recorded in the report.
    #[arg(long, default_value = "eval")]
    eval_label: String,
    /// Metrics (JSON); printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AbArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    budget_mb: f64,
    #[arg(long, default_value_t = 0.2)]
    scale_a: f64,
    #[arg(long, default_value_t = 5.0)]
    scale_b: f64,
    /// Calibration and evaluation samples per domain.
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[command(flatten)]
    rank: RankArgs,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    ffn: usize,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    length: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DomainArgs {
    /// Take the sample shape from this model's input.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    channels: Option<usize>,
    #[arg(long, required_unless_present = "model")]
    length: Option<usize>,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    mean: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw the held-out split of the domain instead.
    #[arg(long)]
    held_out: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Calibration output: the configuration and the per-layer result.
#[derive(Serialize, Deserialize)]
struct CalibArtifact {
    config: CalibConfig,
    result: CalibResult,
}

fn pipeline_config(rank: &RankArgs, calib: CalibConfig) -> PipelineConfig {
    PipelineConfig {
        metric: rank.metric,
        rank_order: rank.rank_order,
        probe_bits: rank.probe_bits,
        plan_transform: rank.plan_transform,
        seed: rank.seed,
        calib,
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn model(path: &Path) -> Result<ModelGraph> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn samples(dir: &Path) -> Result<Vec<myq_core::Tensor>> {
    read_samples(dir).with_context(|| format!("reading samples from {}", dir.display()))
}

/// Merges `update` into the report at `path`, timing it under `step`.
fn update_report(path: Option<&PathBuf>, step: &str, start: Instant, mut update: Report) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut env = EnvironmentSection::current();
    env.seconds.insert(step.into(), start.elapsed().as_secs_f64());
    update.environment = Some(env);
    Report::update_file(path, update).with_context(|| format!("updating {}", path.display()))?;
    Ok(())
}

fn sensitivity_section(plan: &PlanArtifact, cfg: &PipelineConfig, values: Vec<f64>, order: Vec<usize>) -> SensitivitySection {
    SensitivitySection {
        metric: plan.rank.metric,
        rank_order: plan.rank_order,
        probe_bits: (!cfg.metric.is_reduction()).then_some(cfg.probe_bits),
        values,
        order,
    }
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let start = Instant::now();
    let m = model(&a.model)?;
    let section = ModelSection::of(&m)?;
    println!("{} ({:?}), input {:?}", section.name, section.dtype, m.input_shape);
    println!("fingerprint {}", section.fingerprint);
    println!("{:>5}  {:<10} {:>10}  {:<10}", "layer", "kind", "params", "activation");
    for l in &m.layers {
        println!(
            "{:>5}  {:<10} {:>10}  {:<10}",
            l.index,
            format!("{:?}", l.kind).to_lowercase(),
            l.param_count(),
            format!("{:?}", l.activation).to_lowercase()
        );
    }
    println!(
        "{} quantizable params, {} norm params, {:.6} MB at 32 bits",
        section.total_params,
        m.norm_param_count(),
        section.fp_size_mb
    );
    if let Some(q) = &a.qmodel {
        let q = load_quantized(q).with_context(|| format!("loading {}", q.display()))?;
        if q.source_fingerprint != section.fingerprint {
            println!("warning: quantized model was built from a different source model");
        }
        println!("quantized: {:.6} MB", q.plan.size_mb);
        for l in &q.layers {
            let storage = match l.weights {
                StoredWeights::Float { .. } => "float",
                StoredWeights::Int { .. } => "int",
            };
            println!("{:>5}  {:>2} bits  {:<5}  act {} bits", l.index, l.bits, storage, l.act.bits());
        }
    }
    update_report(
        a.report.as_ref(),
        "inspect",
        start,
        Report {
            model: Some(section),
            ..Report::default()
        },
    )
}

fn run_sense(a: &SenseArgs) -> Result<()> {
    let start = Instant::now();
    let m = model(&a.model)?;
    let calib = samples(&a.calib_dir)?;
    let cfg = pipeline_config(&a.rank, CalibConfig::default());
    let rank = sense(&m, &calib, &cfg)?;
    let (values, order) = (rank.values.clone(), rank.order.clone());
    let plan = allocate(&m, rank, a.budget_mb, &cfg)?;
    write_json(&a.out, &plan)?;
    println!("bits {:?}, {:.6} MB of {} MB", plan.plan.bits, plan.plan.size_mb, a.budget_mb);
    update_report(
        a.report.as_ref(),
        "sense",
        start,
        Report {
            model: Some(ModelSection::of(&m)?),
            sensitivity: Some(sensitivity_section(&plan, &cfg, values, order)),
            plan: Some(PlanSection::of(&plan)),
            ..Report::default()
        },
    )
}

fn run_calibrate(a: &CalibrateArgs) -> Result<()> {
    let start = Instant::now();
    let m = model(&a.model)?;
    let calib = samples(&a.calib_dir)?;
    let plan: PlanArtifact = read_json(&a.plan)?;
    let config = a.calib.config();
    let result = calibrate(&m, &calib, &plan.plan, &config)?;
    println!("{} calibration of {} layers in {:.2}s", result.method, result.layers.len(), result.seconds);
    let section = CalibrationSection::of(&config, &result);
    write_json(&a.out, &CalibArtifact { config, result })?;
    update_report(
        a.report.as_ref(),
        "calibrate",
        start,
        Report {
            calibration: Some(section),
            ..Report::default()
        },
    )
}

fn run_quantize(a: &QuantizeArgs) -> Result<()> {
    let m = model(&a.model)?;
    let plan: PlanArtifact = read_json(&a.plan)?;
    let calib: CalibArtifact = read_json(&a.calib)?;
    let q = quantize_model(&m, &plan.plan, &calib.result.act_params())?;
    save_quantized(&q, &a.out)?;
    println!("wrote {} ({:.6} MB of weights)", a.out.display(), q.plan.size_mb);
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let m = model(&a.model)?;
    let q = load_quantized(&a.qmodel).with_context(|| format!("loading {}", a.qmodel.display()))?;
    let fp = myq_core::model::fingerprint(&m)?;
    if q.source_fingerprint != fp {
        return Err(Error::Usage(format!("{} was not quantized from {}", a.qmodel.display(), a.model.display())).into());
    }
    let inputs = samples(&a.eval_dir)?;
    let result = evaluate(&m, &q, &inputs)?;
    match &a.out {
        Some(p) => write_json(p, &result)?,
        None => println!("{}", serde_json::to_string_pretty(&result)?),
    }
    update_report(
        a.report.as_ref(),
        "eval",
        start,
        Report {
            eval: Some(EvalSection::single(&a.calib_label, &a.eval_label, inputs.len(), result)),
            ..Report::default()
        },
    )
}

fn run_ab(a: &AbArgs) -> Result<()> {
    let start = Instant::now();
    let m = model(&a.model)?;
    let [channels, length] = m.input_shape[..] else {
        bail!(Error::Usage(format!("model input must be [channels, length], got {:?}", m.input_shape)));
    };
    let cfg = pipeline_config(&a.rank, a.calib.config());
    let domain = |scale: f64, salt: u64| DomainSpec::scaled(channels, length, a.count, scale, a.rank.seed.wrapping_add(salt));
    let r = ab_experiment(&m, &domain(a.scale_a, 0), &domain(a.scale_b, 1), a.budget_mb, &cfg)?;
    for (i, name) in ["a", "b"].iter().enumerate() {
        let (same, cross) = (r.same_domain(i), r.cross_domain(i));
        println!(
            "eval on {name}: distance {:.6} same vs {:.6} cross, fidelity {:.4} same vs {:.4} cross",
            same.cosine_distance, cross.cosine_distance, same.fidelity, cross.fidelity
        );
    }
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    update_report(
        a.report.as_ref(),
        "ab",
        start,
        Report {
            model: Some(ModelSection::of(&m)?),
            eval: Some(EvalSection::matrix(&r, ["a", "b"], [a.count; 2])),
            ..Report::default()
        },
    )
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let r = Report::from_json(&text)?;
    let present: Vec<&str> = [
        ("model", r.model.is_some()),
        ("sensitivity", r.sensitivity.is_some()),
        ("plan", r.plan.is_some()),
        ("calibration", r.calibration.is_some()),
        ("eval", r.eval.is_some()),
        ("environment", r.environment.is_some()),
    ]
    .into_iter()
    .filter_map(|(n, p)| p.then_some(n))
    .collect();
    println!("sha256 {}", r.digest()?);
    println!("sections: {}", present.join(", "));
    if let Some(e) = &r.eval {
        for run in &e.runs {
            println!(
                "{} -> {}: wer {:.4} cer {:.4} top1 {:.4} fidelity {:.4} distance {:.6}",
                run.calibrated_on,
                run.evaluated_on,
                run.metrics.wer,
                run.metrics.cer,
                run.metrics.top1,
                run.metrics.fidelity,
                run.metrics.cosine_distance
            );
        }
    }
    Ok(())
}

fn run_toy(a: &ToyArgs) -> Result<()> {
    let cfg = EncoderConfig {
        layers: a.layers,
        hidden: a.hidden,
        heads: a.heads,
        ffn: a.ffn,
        vocab: a.vocab,
        input_channels: a.channels,
        input_len: a.length,
        ..EncoderConfig::default()
    };
    let m = build_toy_encoder(&cfg, a.seed)?;
    save_model(&m, &a.out)?;
    println!("wrote {} ({} layers, {} params)", a.out.display(), m.num_layers(), m.total_params());
    Ok(())
}

fn run_domain(a: &DomainArgs) -> Result<()> {
    let (channels, length) = match &a.model {
        Some(p) => match model(p)?.input_shape[..] {
            [c, l] => (c, l),
            ref s => bail!(Error::Usage(format!("model input must be [channels, length], got {s:?}"))),
        },
        None => (a.channels.unwrap_or_default(), a.length.unwrap_or_default()),
    };
    let mut spec = DomainSpec::scaled(channels, length, a.count, a.scale, a.seed);
    spec.mean = vec![a.mean; channels];
    if a.held_out {
        spec = spec.held_out();
    }
    let files = write_samples(&a.out, &make_domain(&spec)?)?;
    println!("wrote {} samples of [{channels}, {length}] to {}", files.len(), a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads().with_context(|| format!("reading {THREADS_ENV}"))?;
    match &cli.command {
        Command::Inspect(a) => inspect(a),
        Command::Sense(a) => run_sense(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Quantize(a) => run_quantize(a),
        Command::Eval(a) => run_eval(a),
        Command::Ab(a) => run_ab(a),
        Command::Report(a) => run_report(a),
        Command::Toy(a) => run_toy(a),
        Command::Domain(a) => run_domain(a),
    }
}

/// 3 for an infeasible budget, 1 for I/O failures, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Budget { .. }) => 3,
        Some(Error::Io(_)) => 1,
        Some(_) => 2,
        None if e.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
