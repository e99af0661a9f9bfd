use myq_core::calib::{objective_cosine, objective_hessian, objective_l2};
use myq_core::harness::decimal;
use myq_core::harness::eval::{cer, edit_distance, wer};
use myq_core::harness::report::{EvalSection, PlanSection, Report};
use myq_core::harness::EvalResult;
use myq_core::ops;
use myq_core::quant::{
    activation_params_minmax, float_sim_matmul_requant, int_matmul_requant, weight_params_symmetric, AffineParams,
    IntTensor, ScaleDenominator, TwoRangeParams,
};
use myq_core::sensitivity::{
    allocate_uniform_constrained, compute_model_size, distance, PlanTransform, RankOrder, SensitivityMetric,
    SensitivityRank,
};
use myq_core::Tensor;
use proptest::prelude::*;

fn rank(values: Vec<f64>) -> SensitivityRank {
    SensitivityRank::from_values(values, SensitivityMetric::Median, RankOrder::Asc)
}

fn size_of(bits: &[u32], sizes: &[usize]) -> f64 {
    compute_model_size(bits, sizes).unwrap()
}

/// Sizes, sensitivity values, and a budget between the 1-bit floor and FP size.
fn allocation_instance() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, f64)> {
    (3usize..=50)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(1_000usize..=10_000_000, n),
                prop::collection::vec(-10.0f64..10.0, n),
                0.0f64..1.0,
            )
        })
        .prop_map(|(sizes, values, t)| {
            let floor = size_of(&vec![1; sizes.len()], &sizes);
            let fp = size_of(&vec![32; sizes.len()], &sizes);
            (sizes, values, floor + t * (fp - floor))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn allocation_is_feasible_uniform_and_maximal((sizes, values, budget) in allocation_instance()) {
        let r = rank(values);
        let plan = allocate_uniform_constrained(&r, &sizes, budget).unwrap();
        prop_assert!(plan.size_mb <= budget);
        prop_assert!(plan.spread() <= 1);
        prop_assert_eq!(plan.size_mb, size_of(&plan.bits, &sizes));
        let lo = *plan.bits.iter().min().unwrap();
        if lo < 32 {
            let k = plan.bits.iter().filter(|&&b| b == lo).count();
            let last = r.order[k - 1];
            for (pos, &l) in r.order.iter().enumerate() {
                prop_assert_eq!(plan.bits[l] == lo, pos < k);
            }
            let mut up = plan.bits.clone();
            up[last] += 1;
            prop_assert!(size_of(&up, &sizes) > budget);
        }
    }

    #[test]
    fn equal_sizes_make_allocation_rank_agnostic(
        n in 3usize..20,
        size in 1_000usize..100_000,
        t in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let sizes = vec![size; n];
        let floor = size_of(&vec![1; n], &sizes);
        let fp = size_of(&vec![32; n], &sizes);
        let budget = floor + t * (fp - floor);
        let base = rank((0..n).map(|i| i as f64).collect());
        let shuffled = myq_core::sensitivity::transform_rank(&base, PlanTransform::Shuffle, seed);
        let mut a = allocate_uniform_constrained(&base, &sizes, budget).unwrap().bits;
        let mut b = allocate_uniform_constrained(&shuffled, &sizes, budget).unwrap().bits;
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rank_ignores_sign(values in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let neg: Vec<f64> = values.iter().map(|v| -v).collect();
        prop_assert_eq!(rank(values).order, rank(neg).order);
    }

    #[test]
    fn rank_is_a_permutation(values in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let n = values.len();
        let mut order = rank(values).order;
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn model_size_is_linear(
        bits in prop::collection::vec(1u32..=16, 1..20),
        sizes_seed in prop::collection::vec(1usize..1_000_000, 20),
        k in 1u32..=2,
    ) {
        let sizes = &sizes_seed[..bits.len()];
        let base = size_of(&bits, sizes);
        let scaled_bits: Vec<u32> = bits.iter().map(|b| b * k).collect();
        prop_assert_eq!(size_of(&scaled_bits, sizes), base * k as f64);
        let doubled: Vec<usize> = sizes.iter().map(|s| s * 2).collect();
        prop_assert_eq!(size_of(&bits, &doubled), base * 2.0);
        let per_layer: f64 = bits.iter().zip(sizes).map(|(&b, &s)| size_of(&[b], &[s])).sum();
        prop_assert!((per_layer - base).abs() <= base * 1e-12);
    }

    #[test]
    fn frobenius_and_l2_agree(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in prop::collection::vec(-3.0f64..3.0, 72),
    ) {
        let n = rows * cols;
        let q = Tensor::new(vec![rows, cols], seed[..n].to_vec()).unwrap();
        let o = Tensor::new(vec![rows, cols], seed[n..2 * n].to_vec()).unwrap();
        prop_assert_eq!(
            distance(SensitivityMetric::Frob, &q, &o).unwrap(),
            distance(SensitivityMetric::L2, &q, &o).unwrap()
        );
    }

    #[test]
    fn affine_roundtrip_error_bounds(
        lo in -100.0f64..100.0,
        width in 1e-3f64..100.0,
        bits in prop::sample::select(vec![2u32, 4, 6, 8]),
        t in 0.0f64..=1.0,
    ) {
        let hi = lo + width;
        let p = activation_params_minmax(lo, hi, bits, ScaleDenominator::Pow2Bm1).unwrap();
        let x = lo + t * width;
        let q = p.quantize_value(x);
        let err = (p.dequantize_value(q) - x).abs();
        let (cmin, cmax) = p.code_range();
        prop_assert!(err <= p.scale * (1.0 + 1e-9));
        if q > cmin && q < cmax {
            prop_assert!(err <= p.scale * (0.5 + 1e-9));
        }
    }

    #[test]
    fn quantize_is_monotone(
        lo in -10.0f64..10.0,
        width in 1e-2f64..10.0,
        bits in 2u32..=8,
        a in -30.0f64..30.0,
        b in -30.0f64..30.0,
    ) {
        let p = activation_params_minmax(lo, lo + width, bits, ScaleDenominator::Pow2Bm1).unwrap();
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(p.quantize_value(x) <= p.quantize_value(y));
    }

    #[test]
    fn two_range_is_continuous_at_zero(
        sn in 1e-4f64..10.0,
        sp in 1e-4f64..10.0,
        bits in 2u32..=8,
        x in -5.0f64..5.0,
    ) {
        let p = TwoRangeParams::new(sn, sp, bits).unwrap();
        prop_assert_eq!(p.quantize_value(0.0), 0);
        prop_assert_eq!(p.dequantize_value(0), 0.0);
        let q = p.quantize_value(x);
        let same_side = if x < 0.0 { q <= 0 } else { q >= 0 };
        prop_assert!(same_side);
        let s = if x < 0.0 { sn } else { sp };
        let lim = if x < 0.0 { -((1i64 << (bits - 1)) as f64) * sn } else { ((1i64 << (bits - 1)) - 1) as f64 * sp };
        if x.abs() <= lim.abs() {
            prop_assert!((p.dequantize_value(q) - x).abs() <= s * (0.5 + 1e-9));
        }
    }

    #[test]
    fn integer_kernel_within_one_lsb(
        m in 1usize..16,
        k in 1usize..16,
        n in 1usize..16,
        bits in prop::sample::select(vec![4u32, 8]),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = myq_core::quant::code_range(bits);
        let mut codes = |len: usize| -> Vec<i32> { (0..len).map(|_| rng.random_range(lo..=hi) as i32).collect() };
        let x = IntTensor::new(vec![m, k], codes(m * k)).unwrap();
        let w = IntTensor::new(vec![k, n], codes(k * n)).unwrap();
        let px = AffineParams::new(0.05, 3, bits).unwrap();
        let pw = AffineParams::new(0.02, 0, bits).unwrap();
        let po = AffineParams::new(0.01 * (k as f64).sqrt(), -2, bits).unwrap();
        let a = int_matmul_requant(&x, &w, None, &px, &pw, &po).unwrap();
        let b = float_sim_matmul_requant(&x, &w, None, &px, &pw, &po).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() <= 1, "{u} vs {v}");
        }
    }

    #[test]
    fn symmetric_weight_roundtrip(w in prop::collection::vec(-4.0f64..4.0, 1..64), bits in 2u32..=8) {
        let t = Tensor::new(vec![w.len()], w.clone()).unwrap();
        let p = weight_params_symmetric(&t, bits).unwrap();
        prop_assert_eq!(p.zero_point, 0);
        for &v in &w {
            prop_assert!((p.dequantize_value(p.quantize_value(v)) - v).abs() <= p.scale * (1.0 + 1e-9));
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        q in prop::collection::vec(-3.0f64..3.0, 1..50),
        o_seed in prop::collection::vec(-3.0f64..3.0, 50),
        e in -20i32..20,
        c in 1e-3f64..1e3,
    ) {
        let o = Tensor::new(vec![q.len()], o_seed[..q.len()].to_vec()).unwrap();
        let qt = Tensor::new(vec![q.len()], q).unwrap();
        let base = objective_cosine(&qt, &o).unwrap();
        // Power-of-two scaling is exact in floating point, so the objective is too.
        prop_assert_eq!(objective_cosine(&qt.scale(2f64.powi(e)), &o).unwrap(), base);
        prop_assert!((objective_cosine(&qt.scale(c), &o).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn hessian_with_ones_is_l2(pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..60)) {
        let n = pairs.len();
        let q = Tensor::new(vec![n], pairs.iter().map(|p| p.0).collect()).unwrap();
        let o = Tensor::new(vec![n], pairs.iter().map(|p| p.1).collect()).unwrap();
        let ones = Tensor::new(vec![n], vec![1.0; n]).unwrap();
        prop_assert_eq!(objective_hessian(&q, &o, &ones).unwrap(), objective_l2(&q, &o).unwrap());
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let x = Tensor::new(vec![3, 4], v).unwrap();
        for axis in 0..2 {
            let y = ops::softmax(&x, axis).unwrap();
            prop_assert!(y.data().iter().all(|&p| p >= 0.0));
            let (r, c) = (3, 4);
            if axis == 1 {
                for i in 0..r {
                    let s: f64 = y.data()[i * c..(i + 1) * c].iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
            } else {
                for j in 0..c {
                    let s: f64 = (0..r).map(|i| y.data()[i * c + j]).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop(
        m in 1usize..=32,
        k in 1usize..=32,
        n in 1usize..=32,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = ops::matmul(&Tensor::new(vec![m, k], a.clone()).unwrap(), &Tensor::new(vec![k, n], b.clone()).unwrap()).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                prop_assert!((c.data()[i * n + j] - s).abs() <= 1e-12);
            }
        }
    }
}

/// Textbook full-matrix Levenshtein distance.
fn oracle_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "dd", "eee"]).prop_map(String::from), 0..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn wer_and_cer_match_oracle(r in words(), h in words()) {
        let (rs, hs) = (r.join(" "), h.join(" "));
        prop_assert_eq!(edit_distance(&r, &h), oracle_distance(&r, &h));
        if r.is_empty() {
            prop_assert!(wer(&rs, &hs).is_err());
        } else {
            prop_assert_eq!(wer(&rs, &hs).unwrap(), oracle_distance(&r, &h) as f64 / r.len() as f64);
            let rc: Vec<char> = rs.chars().collect();
            let hc: Vec<char> = hs.chars().collect();
            prop_assert_eq!(cer(&rs, &hs).unwrap(), oracle_distance(&rc, &hc) as f64 / rc.len() as f64);
        }
    }

    #[test]
    fn decimal_strings_round_trip(v in any::<f64>()) {
        let back = decimal::parse(&decimal::to_string(v)).unwrap();
        prop_assert!(back.to_bits() == v.to_bits() || (v.is_nan() && back.is_nan()));
    }

    #[test]
    fn report_round_trips(
        vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 7),
        bits in prop::collection::vec(1u32..=32, 1..10),
    ) {
        let r = Report {
            plan: Some(PlanSection {
                budget_mb: vals[0],
                transform: PlanTransform::Reverse,
                order: (0..bits.len()).collect(),
                bits: bits.clone(),
                size_mb: vals[1],
                spread: 0,
            }),
            eval: Some(EvalSection::single("x", "y", 4, EvalResult {
                wer: vals[2],
                cer: vals[3],
                top1: vals[4],
                fidelity: vals[5],
                cosine_distance: vals[6],
            })),
            ..Report::default()
        };
        let mut back = Report::from_json(&r.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.sha256.take(), Some(r.digest().unwrap()));
        prop_assert_eq!(back, r);
    }
}
