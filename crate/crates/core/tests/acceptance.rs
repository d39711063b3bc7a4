//! Acceptance suite. Each test checks one exit criterion and prints a
//! `PASS`/`FAIL` line with the measured values.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sqformat::calibration::{smooth, CalibStats, DEFAULT_ALPHA};
use sqformat::format::{
    decode_weight, encode_weight, quantize_group, quantize_uniform, sentinel_code,
    symmetric_range, BankConfig, Granularity, PrecisionPair, SqConfig, SqWeightMatrix,
};
use sqformat::gemm::{gemm_oracle, gemm_sq_activations, gemm_sq_weights};
use sqformat::harness::{
    gen_synthetic_layer, run_sweep, LayerShape, Method, SweepConfig, SynthSpec,
};
use sqformat::matrix::{relative_frobenius, Mask, Matrix};
use sqformat::perfmodel::{
    equivalent_bits_activation, equivalent_bits_weight, estimate_mask_storage,
    static_split_speedup, LayerDims,
};
use sqformat::quantizers::{
    build_activation_plan, quantize_activations_dynamic,
    quantize_activations_static, quantize_weights_for_plan, select_weight_mask, sparse_2_4,
    ChannelImportance, WeightImportance,
};

const BANK_SIZES: [usize; 6] = [4, 8, 16, 32, 64, 128];
const SPARSITIES: [f64; 4] = [0.5, 0.75, 0.875, 0.9375];
const PRECISIONS: [(u8, u8); 4] = [(8, 4), (8, 3), (8, 2), (4, 2)];

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("[criterion {id}] {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn grid() -> Vec<SqConfig> {
    let mut out = Vec::new();
    for &(h, l) in &PRECISIONS {
        for &b in &BANK_SIZES {
            for &s in &SPARSITIES {
                if let Ok(c) = SqConfig::new(b, s, h, l) {
                    out.push(c);
                }
            }
        }
    }
    out
}

/// Gaussian matrix where a few rows are scaled up and some entries zeroed.
fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let row_gain: Vec<f64> = (0..rows)
        .map(|_| if rng.random_bool(0.05) { 40.0 } else { 1.0 })
        .collect();
    Matrix::from_fn(rows, cols, |r, _| {
        if rng.random_bool(0.02) {
            0.0
        } else {
            normal.sample(rng) * row_gain[r]
        }
    })
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, banking: BankConfig) -> Mask {
    let scores = Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>());
    select_weight_mask(&WeightImportance::new(scores).unwrap(), banking).unwrap()
}

#[test]
fn criterion_1_format_properties() {
    let start = Instant::now();
    let configs = grid();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5154_0001);
    let draws = 1200;
    let mut failures = Vec::new();
    for draw in 0..draws {
        let cfg = configs[draw % configs.len()];
        let b = cfg.banking.bank_size();
        let k = b * rng.random_range(1..=3);
        let n = rng.random_range(1..=6);
        let w = random_matrix(&mut rng, k, n);
        let mask = random_mask(&mut rng, k, n, cfg.banking);
        let sq = encode_weight(&w, &mask, cfg.banking, cfg.precision).unwrap();

        // round-trip stability
        let again = encode_weight(&decode_weight(&sq).unwrap(), &mask, cfg.banking, cfg.precision).unwrap();
        if again != sq {
            failures.push(format!("draw {draw} {cfg}: re-encode differs"));
        }

        // sentinel census
        let sentinel = sentinel_code(cfg.precision.low());
        let n_high = cfg.banking.n_high();
        for col in 0..n {
            let mut column_total = 0;
            for bank in 0..k / b {
                let census = (bank * b..(bank + 1) * b)
                    .filter(|&r| sq.low_code(r, col) == sentinel)
                    .count();
                column_total += census;
                if census != n_high {
                    failures.push(format!("draw {draw} {cfg}: census {census} != {n_high}"));
                }
            }
            if column_total != (k / b) * n_high {
                failures.push(format!("draw {draw} {cfg}: column {col} high count mismatch"));
            }
        }

        // range safety
        let (_, lmax) = symmetric_range(cfg.precision.low());
        let (_, hmax) = symmetric_range(cfg.precision.high());
        let high_sentinel = sentinel_code(cfg.precision.high());
        if sq
            .low_codes()
            .iter()
            .any(|&c| c != sentinel && i32::from(c).abs() > lmax)
            || sq
                .high_codes()
                .iter()
                .any(|&c| c == high_sentinel || i32::from(c).abs() > hmax)
        {
            failures.push(format!("draw {draw} {cfg}: code out of range"));
        }

        // scale dominance against uniform h_low quantization of the full group
        for bank in 0..k / b {
            for col in 0..n {
                let full: Vec<f64> = (bank * b..(bank + 1) * b).map(|r| w.get(r, col)).collect();
                let (_, uniform_scale) = quantize_group(&full, cfg.precision.low()).unwrap();
                if sq.scales().low(bank, col) > uniform_scale {
                    failures.push(format!("draw {draw} {cfg}: s_low exceeds uniform scale"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed.as_secs() < 120;
    report(
        1,
        "format property suite",
        pass,
        format!(
            "{draws} draws over {} configs, {} violations, {:.1?}",
            configs.len(),
            failures.len(),
            elapsed
        ),
    );
    assert!(pass, "{:?}", &failures[..failures.len().min(10)]);
}

fn weight_side_deviation(rng: &mut ChaCha8Rng, cfg: SqConfig, k: usize) -> f64 {
    let (m, n) = (64, 64);
    let a = random_matrix(rng, m, k);
    let w = random_matrix(rng, k, n);
    let mask = random_mask(rng, k, n, cfg.banking);
    let sq = encode_weight(&w, &mask, cfg.banking, cfg.precision).unwrap();
    let a_q = quantize_uniform(&a, 8, Granularity::PerRow).unwrap();
    let hybrid = gemm_sq_weights(&a_q, &sq).unwrap();
    let oracle = gemm_oracle(&a_q.dequantize(), &decode_weight(&sq).unwrap()).unwrap();
    relative_frobenius(&oracle, &hybrid.y).unwrap()
}

fn activation_side_deviation(rng: &mut ChaCha8Rng, cfg: SqConfig, k: usize) -> (f64, f64) {
    let (m, n) = (64, 64);
    let a = random_matrix(rng, m, k);
    let w = random_matrix(rng, k, n);
    let importance = ChannelImportance::new((0..k).map(|_| rng.random::<f64>()).collect()).unwrap();
    let plan = build_activation_plan(&importance, cfg.banking, cfg.precision).unwrap();

    let w_plan = quantize_weights_for_plan(&w, &plan, 4).unwrap();
    let split = quantize_activations_static(&a, &plan).unwrap();
    let hybrid = gemm_sq_activations(&split, &w_plan).unwrap();
    let w_deq = w_plan.dequantize().permute_rows(&plan.inverse_perm()).unwrap();
    let oracle = gemm_oracle(&split.dequantize(), &w_deq).unwrap();
    let static_dev = relative_frobenius(&oracle, &hybrid.y).unwrap();

    let w_q = quantize_uniform(
        &w,
        4,
        Granularity::PerBankColumn {
            bank_size: cfg.banking.bank_size(),
        },
    )
    .unwrap();
    let split = quantize_activations_dynamic(&a, cfg.banking, cfg.precision).unwrap();
    let hybrid = gemm_sq_activations(&split, &w_q).unwrap();
    let oracle = gemm_oracle(&split.dequantize(), &w_q.dequantize()).unwrap();
    (static_dev, relative_frobenius(&oracle, &hybrid.y).unwrap())
}

#[test]
fn criterion_2_oracle_equivalence() {
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5154_0002);
    let mut worst = [0.0f64; 3];
    let configs = grid();
    for cfg in &configs {
        // K = 64 cannot hold a bank of 128
        let k = cfg.banking.bank_size().max(64);
        for _ in 0..100 {
            worst[0] = worst[0].max(weight_side_deviation(&mut rng, *cfg, k));
            let (s, d) = activation_side_deviation(&mut rng, *cfg, k);
            worst[1] = worst[1].max(s);
            worst[2] = worst[2].max(d);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&w| w <= TOL) && elapsed.as_secs() < 120;
    report(
        2,
        "hybrid GEMM vs dequantize-float oracle",
        pass,
        format!(
            "{} configs x 100 instances; max rel. Frobenius weight-side {:.2e}, act-static {:.2e}, act-dynamic {:.2e} (tol {TOL:e}), {:.1?}",
            configs.len(),
            worst[0],
            worst[1],
            worst[2],
            elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_two_four_sparsity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5154_0003);
    let mut bad_groups = 0usize;
    let mut groups = 0usize;
    let matrices = 200;
    for _ in 0..matrices {
        let k = 4 * rng.random_range(1..=32);
        let n = rng.random_range(1..=16);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let w = Matrix::from_fn(k, n, |_, _| normal.sample(&mut rng));
        let sq: SqWeightMatrix = sparse_2_4(&w, 8).unwrap();
        let d = decode_weight(&sq).unwrap();
        for col in 0..n {
            for g in 0..k / 4 {
                groups += 1;
                let nonzero = (0..4).filter(|i| d.get(g * 4 + i, col) != 0.0).count();
                if nonzero != 2 {
                    bad_groups += 1;
                }
            }
        }
    }
    let pass = bad_groups == 0;
    report(
        3,
        "2:4 special case (s=0.5, h_low=0, b=4)",
        pass,
        format!("{matrices} matrices, {groups} groups of 4, {bad_groups} without exactly 2 nonzeros"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_static_split_speedup() {
    let expected = [(0.5, 1.32), (0.75, 1.56), (0.875, 1.71)];
    let mut detail = Vec::new();
    let mut pass = true;
    for (s, want) in expected {
        let got = static_split_speedup(s, 1.92, 0.0).unwrap();
        pass &= (got - want).abs() <= 0.02;
        detail.push(format!("s={s}: {got:.3} (expected {want})"));
    }
    report(4, "Llama-3-70B speedup column", pass, detail.join(", "));
    assert!(pass);
}

#[test]
fn criterion_5_mask_storage() {
    let bytes = estimate_mask_storage(&LayerDims::llama3_70b());
    let mib = bytes as f64 / (1024.0 * 1024.0);
    let pass = bytes == 6_225_920 && format!("{mib:.2}") == "5.94";
    report(5, "Llama-3-70B mask storage", pass, format!("{bytes} bytes = {mib:.4} MiB"));
    assert!(pass);
}

#[test]
fn criterion_6_equivalent_bits() {
    let pp = |h, l| PrecisionPair::new(h, l).unwrap();
    let weight = [(0.5, 8.0), (0.75, 6.0), (0.875, 5.0), (0.9375, 4.5)];
    let act = [(0.5, 6.0), (0.75, 5.0), (0.875, 4.5), (0.9375, 4.25)];
    let mut pass = true;
    let mut detail = Vec::new();
    for (s, x) in weight {
        let got = equivalent_bits_weight(pp(8, 4), s);
        pass &= got == x;
        detail.push(format!("W(8/4,{s})={got}"));
    }
    for (s, y) in act {
        let got = equivalent_bits_activation(pp(8, 4), s);
        pass &= got == y;
        detail.push(format!("A(8/4,{s})={got}"));
    }
    let got = equivalent_bits_activation(pp(8, 2), 0.9375);
    pass &= got == 2.375;
    detail.push(format!("A(8/2,0.9375)={got}"));
    report(6, "equivalent-bit notation", pass, detail.join(" "));
    assert!(pass);
}

const OUTLIER_SEEDS: u64 = 20;
const OUTLIER_K: usize = 1024;
const OUTLIER_M: usize = 64;

fn outlier_sweep(methods: Vec<Method>, bank_sizes: Vec<usize>, sparsities: Vec<f64>) -> sqformat::harness::SweepReport {
    run_sweep(&SweepConfig {
        bank_sizes,
        sparsities,
        precisions: vec![PrecisionPair::new(8, 4).unwrap()],
        methods,
        seeds: (0..OUTLIER_SEEDS).collect(),
        shapes: vec![LayerShape {
            k: OUTLIER_K,
            n: OUTLIER_K,
            m: OUTLIER_M,
        }],
        outlier_frac: 0.01,
        outlier_scale: 50.0,
        ..SweepConfig::default()
    })
    .unwrap()
}

/// Mean relative output error of per-row INT4 on the smoothed activations.
fn uniform_int4_activation_error() -> f64 {
    let mut total = 0.0;
    for seed in 0..OUTLIER_SEEDS {
        let layer = gen_synthetic_layer(&SynthSpec {
            k: OUTLIER_K,
            n: OUTLIER_K,
            m: OUTLIER_M,
            outlier_frac: 0.01,
            outlier_scale: 50.0,
            seed,
        })
        .unwrap();
        let stats = CalibStats::from_batch(&layer.calib).unwrap();
        let sm = smooth(&layer.w, &stats, DEFAULT_ALPHA).unwrap();
        let a_s = sm.smooth_activations(&layer.eval).unwrap();
        let a_hat = quantize_uniform(&a_s, 4, Granularity::PerRow).unwrap().dequantize();
        let y_true = layer.eval.matmul(&layer.w).unwrap();
        total += relative_frobenius(&y_true, &a_hat.matmul(&sm.w_smoothed).unwrap()).unwrap();
    }
    total / OUTLIER_SEEDS as f64
}

#[test]
fn criterion_7_error_reduction_on_outlier_layers() {
    let start = Instant::now();
    let pp84 = PrecisionPair::new(8, 4).unwrap();

    let weights = outlier_sweep(
        vec![Method::SqWeights, Method::Uniform],
        BANK_SIZES.to_vec(),
        vec![0.75, 0.875, 0.9375],
    );
    let sq_w = weights.mean_out_err(Method::SqWeights, 32, 0.75, pp84).unwrap();
    let uni_w = weights.mean_out_err(Method::Uniform, 32, 1.0, pp84).unwrap();
    let weights_ok = sq_w < uni_w;
    report(
        7,
        "SQ weights 32-(8/4)-0.75 vs uniform INT4 per (bank, column)",
        weights_ok,
        format!("mean out_err {sq_w:.5} vs {uni_w:.5} over {OUTLIER_SEEDS} seeds"),
    );

    let acts = outlier_sweep(vec![Method::SqActStatic], vec![16], vec![0.5]);
    let sq_a = acts.mean_out_err(Method::SqActStatic, 16, 0.5, pp84).unwrap();
    let uni_a = uniform_int4_activation_error();
    let acts_ok = sq_a < uni_a;
    report(
        7,
        "SQ activations static 16-(8/4)-0.5 vs uniform INT4 per token",
        acts_ok,
        format!("mean out_err {sq_a:.5} vs {uni_a:.5} over {OUTLIER_SEEDS} seeds"),
    );

    let mut trend_ok = false;
    let mut curves = Vec::new();
    for s in [0.875, 0.9375] {
        let curve: Vec<(usize, f64)> = BANK_SIZES
            .iter()
            .filter_map(|&b| weights.mean_out_err(Method::SqWeights, b, s, pp84).map(|e| (b, e)))
            .collect();
        let argmin = curve
            .iter()
            .enumerate()
            .min_by(|x, y| x.1 .1.total_cmp(&y.1 .1))
            .map(|(i, _)| i)
            .unwrap();
        let interior = argmin > 0 && argmin + 1 < curve.len();
        trend_ok |= interior;
        curves.push(format!(
            "s={s}: [{}] optimum b={}{}",
            curve
                .iter()
                .map(|(b, e)| format!("{b}:{e:.5}"))
                .collect::<Vec<_>>()
                .join(" "),
            curve[argmin].0,
            if interior { " (interior)" } else { "" }
        ));
    }
    report(7, "interior-optimum bank size at s >= 0.875", trend_ok, curves.join("; "));

    let elapsed = start.elapsed();
    let time_ok = elapsed.as_secs() < 600;
    report(7, "runtime", time_ok, format!("{elapsed:.1?} (limit 10 min)"));
    assert!(weights_ok && acts_ok && trend_ok && time_ok);
}

#[test]
fn criterion_8_static_close_to_dynamic() {
    let pp84 = PrecisionPair::new(8, 4).unwrap();
    let report_ = outlier_sweep(
        vec![Method::SqActStatic, Method::SqActDynamic],
        vec![16],
        vec![0.5],
    );
    let st = report_.mean_out_err(Method::SqActStatic, 16, 0.5, pp84).unwrap();
    let dy = report_.mean_out_err(Method::SqActDynamic, 16, 0.5, pp84).unwrap();
    let excess = st / dy - 1.0;
    let pass = excess <= 0.25;
    report(
        8,
        "static plan vs dynamic split, 16-(8/4)-0.5",
        pass,
        format!("mean out_err static {st:.5}, dynamic {dy:.5}, excess {:.1}% (limit 25%)", excess * 100.0),
    );
    assert!(pass);
}

#[test]
fn sparse24_method_is_the_sq_special_case() {
    // the sweep's sparse24 record is SQ at b=4, s=0.5, h_low=0
    let report_ = run_sweep(&SweepConfig {
        bank_sizes: vec![4],
        sparsities: vec![0.5],
        precisions: vec![PrecisionPair::new(8, 4).unwrap()],
        methods: vec![Method::Sparse24],
        seeds: vec![1],
        shapes: vec![LayerShape { k: 64, n: 32, m: 32 }],
        ..SweepConfig::default()
    })
    .unwrap();
    let r = &report_.records[0];
    assert_eq!((r.b, r.s, r.h_low), (4, 0.5, 0));
    assert_eq!(r.eq_bits, 4.0);
}
