use myq_core::calib::{calibrate, CalibConfig, CalibContext, CalibMethod, CalibResult};
use myq_core::harness::{ab_experiment, evaluate, make_domain, run_pipeline, sense, DomainSpec, PipelineConfig};
use myq_core::model::{load_model, save_model};
use myq_core::quant::{load_quantized, quantize_model, run_quantized, save_quantized, ActParams};
use myq_core::sensitivity::{uniform_size, BitPlan};
use myq_core::{build_toy_encoder, EncoderConfig, ModelGraph, Tensor};

fn small() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab: 12,
        input_channels: 4,
        input_len: 24,
        ..EncoderConfig::default()
    }
}

fn samples(cfg: &EncoderConfig, count: usize, scale: f64, seed: u64) -> Vec<Tensor> {
    make_domain(&DomainSpec::scaled(cfg.input_channels, cfg.input_len, count, scale, seed)).unwrap()
}

fn search_cfg(method: CalibMethod) -> CalibConfig {
    CalibConfig {
        method,
        candidates: 30,
        rounds: 2,
        ..CalibConfig::default()
    }
}

fn setup(seed: u64) -> (ModelGraph, Vec<Tensor>, BitPlan) {
    let cfg = small();
    let model = build_toy_encoder(&cfg, seed).unwrap();
    let calib = samples(&cfg, 4, 1.0, seed + 100);
    let plan = BitPlan::uniform(6, &model.param_count()).unwrap();
    (model, calib, plan)
}

fn strip_time(mut r: CalibResult) -> CalibResult {
    r.seconds = 0.0;
    r
}

#[test]
fn search_never_loses_to_minmax_base() {
    let (model, calib, plan) = setup(1);
    for m in CalibMethod::SEARCH {
        let r = calibrate(&model, &calib, &plan, &search_cfg(m)).unwrap();
        assert_eq!(r.layers.len(), model.num_layers());
        for (l, lc) in r.layers.iter().enumerate() {
            let (best, base) = (lc.objective.unwrap(), lc.base_objective.unwrap());
            assert!(best <= base, "{m} layer {l}: {best} > {base}");
        }
    }
}

#[test]
fn two_range_history_is_non_increasing() {
    let (model, calib, plan) = setup(2);
    let r = calibrate(&model, &calib, &plan, &search_cfg(CalibMethod::L2)).unwrap();
    let mut two_range = 0;
    for (l, lc) in r.layers.iter().enumerate() {
        if let ActParams::TwoRange(_) = lc.params {
            two_range += 1;
            assert_eq!(lc.history.len(), 4);
            assert!(lc.history[0] <= lc.base_objective.unwrap());
            for w in lc.history.windows(2) {
                assert!(w[1] <= w[0], "layer {l}: {:?}", lc.history);
            }
        }
    }
    assert!(two_range > 0, "the toy encoder has post-GELU layers");
}

#[test]
fn calibration_is_deterministic_and_layer_independent() {
    let (model, calib, plan) = setup(3);
    let cfg = search_cfg(CalibMethod::Hess);
    let a = strip_time(calibrate(&model, &calib, &plan, &cfg).unwrap());
    let b = strip_time(calibrate(&model, &calib, &plan, &cfg).unwrap());
    assert_eq!(a, b);
    let ctx = CalibContext::new(&model, &calib, &plan, &cfg).unwrap();
    for l in (0..model.num_layers()).rev() {
        assert_eq!(ctx.calibrate_layer(l).unwrap(), a.layers[l]);
    }
}

#[test]
fn float_activations_skip_search() {
    let (model, calib, plan) = setup(4);
    let cfg = CalibConfig {
        act_bits: 32,
        ..search_cfg(CalibMethod::L1)
    };
    let r = calibrate(&model, &calib, &plan, &cfg).unwrap();
    assert!(r.act_params().iter().all(|p| *p == ActParams::Float));
}

#[test]
fn full_precision_plan_has_perfect_fidelity() {
    let (model, calib, _) = setup(5);
    let plan = BitPlan::uniform(32, &model.param_count()).unwrap();
    let q = quantize_model(&model, &plan, &vec![ActParams::Float; model.num_layers()]).unwrap();
    let e = evaluate(&model, &q, &calib).unwrap();
    assert_eq!(e.fidelity, 1.0);
    assert_eq!(e.top1, 1.0);
    assert_eq!(e.wer, 0.0);
    assert_eq!(e.cer, 0.0);
    assert_eq!(e.cosine_distance, 0.0);
}

#[test]
fn more_bits_do_not_hurt_fidelity() {
    let cfg = small();
    for seed in 0..3 {
        let model = build_toy_encoder(&cfg, seed).unwrap();
        let calib = samples(&cfg, 8, 1.0, seed + 10);
        let eval = samples(&cfg, 8, 1.0, seed + 20);
        let fid = |bits: u32| {
            let plan = BitPlan::uniform(bits, &model.param_count()).unwrap();
            let c = calibrate(
                &model,
                &calib,
                &plan,
                &CalibConfig {
                    act_bits: bits,
                    ..CalibConfig::with_method(CalibMethod::Minmax)
                },
            )
            .unwrap();
            let q = quantize_model(&model, &plan, &c.act_params()).unwrap();
            evaluate(&model, &q, &eval).unwrap().fidelity
        };
        assert!(fid(8) >= fid(2), "seed {seed}");
    }
}

#[test]
fn eight_bit_budget_gives_uniform_eight_bit_plan() {
    let (model, calib, _) = setup(6);
    let budget = uniform_size(8, &model.param_count());
    let run = run_pipeline(&model, &calib, &calib, budget, &PipelineConfig::default()).unwrap();
    assert!(run.plan.plan.bits.iter().all(|&b| b == 8));
    assert_eq!(run.plan.plan.size_mb, budget);
}

#[test]
fn ab_experiment_symmetries() {
    let cfg = small();
    let model = build_toy_encoder(&cfg, 7).unwrap();
    let a = DomainSpec::scaled(cfg.input_channels, cfg.input_len, 4, 1.0, 70);
    let pc = PipelineConfig {
        calib: CalibConfig::with_method(CalibMethod::Minmax),
        ..PipelineConfig::default()
    };
    let budget = uniform_size(6, &model.param_count());
    let same = ab_experiment(&model, &a, &a, budget, &pc).unwrap();
    assert_eq!(same.cells[0], same.cells[1]);
    assert_eq!(same.cells[0][0], same.cells[0][1]);

    let fp = uniform_size(32, &model.param_count());
    let pc_fp = PipelineConfig {
        calib: CalibConfig {
            act_bits: 32,
            ..pc.calib.clone()
        },
        ..pc
    };
    let b = DomainSpec::scaled(cfg.input_channels, cfg.input_len, 4, 5.0, 71);
    let full = ab_experiment(&model, &a, &b, fp, &pc_fp).unwrap();
    for row in &full.cells {
        for c in row {
            assert!(c.cosine_distance.abs() < 1e-12);
            assert_eq!(c.fidelity, 1.0);
        }
    }
}

#[test]
fn model_artifacts_round_trip() {
    let cfg = small();
    let model = build_toy_encoder(&cfg, 8).unwrap();
    assert_eq!(model, build_toy_encoder(&cfg, 8).unwrap());
    assert_ne!(model, build_toy_encoder(&cfg, 9).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let mpath = dir.path().join("m.myqm");
    save_model(&model, &mpath).unwrap();
    let back = load_model(&mpath).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.param_count(), model.param_count());

    let calib = samples(&cfg, 3, 1.0, 80);
    let rank = sense(&model, &calib, &PipelineConfig::default()).unwrap();
    assert_eq!(rank.values.len(), model.num_layers());
    let mut bits = vec![4; model.num_layers()];
    bits[0] = 32;
    bits[1] = 3;
    let plan = BitPlan::new(bits, &model.param_count()).unwrap();
    let c = calibrate(&model, &calib, &plan, &CalibConfig::with_method(CalibMethod::Minmax)).unwrap();
    let q = quantize_model(&model, &plan, &c.act_params()).unwrap();
    let qpath = dir.path().join("q.myqz");
    save_quantized(&q, &qpath).unwrap();
    let q2 = load_quantized(&qpath).unwrap();
    for x in &calib {
        assert_eq!(run_quantized(&q, x).unwrap(), run_quantized(&q2, x).unwrap());
    }
}
