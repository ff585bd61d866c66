//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them all).
//!
//! Criterion 1 pins the published 4x4 reference diagonal verbatim and is
//! expected to fail on its third entry: the rotation preserves total
//! variance (trace 42), so the published value 8.75 is arithmetically
//! impossible for the printed matrices — the true value is 7.50. The
//! companion check in criterion 3 and the `appendix-golden` subcommand pin
//! the trace-consistent diagonal instead.

use std::time::Instant;

use mquant::calib::{collect_stats, smoothing_factors};
use mquant::cli::{cli_main, fixture_matrix, generate_calib};
use mquant::model::{init_model, ModelConfig, ScanKind, Tap};
use mquant::quant::QuantConfig;
use mquant::report::{cost_model, scheme_comparison, CostInputs};
use mquant::rng::Xoshiro256PlusPlus;
use mquant::rotation::{covariance, hadamard, klt_enhanced, rotated_channel_variances};
use mquant::scan::{pscan_parallel, pscan_sequential, ScanInputs};
use mquant::tensor::{matmul, spread_ratio, Tensor};
use mquant::transform::{
    apply_offline_rotation, apply_plan, apply_smooth_matmul, apply_smooth_outproj,
    attach_online_hadamard, build_plan, compare_outputs, equivalence_check, fold_norm_scales,
    Scheme,
};

fn verdict(criterion: u32, ok: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} - {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

/// The fixed-seed outlier-injected toy configuration shared by criteria 5-8.
fn toy_config(seed: u64, outliers: bool) -> ModelConfig {
    let mut cfg = ModelConfig::new(64, 128, 16, 4, 4, 4, seed);
    if outliers {
        cfg.outlier_frac = 0.05;
        cfg.outlier_gain = 50.0;
    }
    cfg
}

#[test]
fn acceptance_1_fixture_diagonal_reference_values() {
    let start = Instant::now();
    let r = fixture_matrix();
    let h = hadamard(4).unwrap();
    let rh = matmul(&r, h.matrix()).unwrap();
    let cov = matmul(&rh.transpose(), &rh).unwrap().map(|v| v / 3.0);
    let diag: Vec<f64> = (0..4).map(|i| cov.at(i, i)).collect();
    let reference = [1.83, 30.50, 8.75, 2.17];
    let elapsed = start.elapsed();

    let ok = diag
        .iter()
        .zip(reference)
        .all(|(d, e)| (d - e).abs() <= 0.01)
        && elapsed.as_secs_f64() < 1e-3;
    verdict(
        1,
        ok,
        &format!(
            "computed diagonal {diag:?} vs reference {reference:?} (+-0.01), {elapsed:?}"
        ),
    );
    assert!(
        elapsed.as_secs_f64() < 1e-3,
        "fixture must evaluate in under a millisecond, took {elapsed:?}"
    );
    for (i, (d, e)) in diag.iter().zip(reference).enumerate() {
        assert!(
            (d - e).abs() <= 0.01,
            "entry {i}: computed {d:.6} vs reference {e}. The reference table's third \
             entry is inconsistent with trace conservation: the rotation preserves \
             total variance 42, so the diagonal must sum to 42, forcing 7.50 where \
             the table prints 8.75 (its row sums to 43.25). Entries 1, 2, and 4 match."
        );
    }
}

#[test]
fn acceptance_2_enhanced_rotation_equalizes_variances() {
    let start = Instant::now();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0xe9 ^ 0x51);
    let n = 256;
    let mut worst_spread = 0.0f64;
    let mut worst_trace = 0.0f64;
    for case in 0..50 {
        let m = [8usize, 16, 64][case % 3];
        // heavy-tailed per-channel scales spanning three decades
        let scales: Vec<f64> = (0..m).map(|_| 10f64.powf(rng.uniform(0.0, 3.0))).collect();
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            for j in 0..m {
                data[r * m + j] = rng.normal() * scales[j];
            }
        }
        // center columns exactly
        for j in 0..m {
            let mean: f64 = (0..n).map(|r| data[r * m + j]).sum::<f64>() / n as f64;
            for r in 0..n {
                data[r * m + j] -= mean;
            }
        }
        let x = Tensor::from_vec(vec![n, m], data).unwrap();
        let cov = covariance(&x, true).unwrap();
        let rot = klt_enhanced(&cov, "synthetic").unwrap();
        let rv = rotated_channel_variances(&x, &rot.h_k).unwrap();
        let spread = spread_ratio(&rv.variances) - 1.0;
        worst_spread = worst_spread.max(spread);
        let trace: f64 = (0..m).map(|i| cov.at(i, i)).sum();
        let sum: f64 = rv.variances.iter().sum();
        worst_trace = worst_trace.max((sum - trace).abs() / trace);
    }
    let elapsed = start.elapsed();
    let ok = worst_spread <= 1e-6 && worst_trace <= 1e-9 && elapsed.as_secs_f64() < 5.0;
    verdict(
        2,
        ok,
        &format!(
            "50 matrices: worst relative variance spread {worst_spread:.3e} (<= 1e-6), \
             worst trace mismatch {worst_trace:.3e} (<= 1e-9), {elapsed:?}"
        ),
    );
    assert!(worst_spread <= 1e-6);
    assert!(worst_trace <= 1e-9);
    assert!(elapsed.as_secs_f64() < 5.0);
}

#[test]
fn acceptance_3_plain_rotation_leaves_fixture_uneven() {
    let r = fixture_matrix();
    let h = hadamard(4).unwrap();
    let rv = rotated_channel_variances(&r, h.matrix()).unwrap();
    let spread = spread_ratio(&rv.variances);
    let ok = spread >= 10.0;
    verdict(
        3,
        ok,
        &format!("variance spread after plain rotation {spread:.2} (>= 10, computed ~16.6)"),
    );
    assert!(ok);
}

#[test]
fn acceptance_4_scan_equivalence() {
    let start = Instant::now();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0x5ca9);
    let mut worst = 0.0f64;
    for case in 0..200u64 {
        let t = (case as usize % 65) + 1;
        let (e, n) = (4usize, 4usize);
        let fill = |rng: &mut Xoshiro256PlusPlus, len: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..len).map(|_| rng.uniform(lo, hi)).collect()
        };
        let s = ScanInputs {
            a_bar: Tensor::from_vec(vec![t, e, n], fill(&mut rng, t * e * n, 0.0, 1.0)).unwrap(),
            b_bar_x: Tensor::from_vec(vec![t, e, n], fill(&mut rng, t * e * n, -1.0, 1.0))
                .unwrap(),
            c_bar: Tensor::from_vec(vec![t, n], fill(&mut rng, t * n, -1.0, 1.0)).unwrap(),
            h0: Tensor::from_vec(vec![e, n], fill(&mut rng, e * n, -1.0, 1.0)).unwrap(),
        };
        let seq = pscan_sequential(&s).unwrap();
        let par = pscan_parallel(&s).unwrap();
        for (a, b) in seq.h.data().iter().zip(par.h.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-12 && elapsed.as_secs_f64() < 5.0;
    verdict(
        4,
        ok,
        &format!("200 cases, T in 1..=65 with nonzero initial state: max |diff| {worst:.3e} (<= 1e-12), {elapsed:?}"),
    );
    assert!(worst <= 1e-12);
    assert!(elapsed.as_secs_f64() < 5.0);
}

#[test]
fn acceptance_5_transform_invariance_suite() {
    let start = Instant::now();
    let mut model = init_model(&toy_config(5150, false)).unwrap();
    model.scan_kind = ScanKind::Parallel;
    // meaningful norm scales so folding is exercised
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5151);
    for b in &mut model.blocks {
        for g in &mut b.norm_gamma {
            *g = rng.uniform(0.5, 1.5);
        }
    }
    for g in &mut model.final_gamma {
        *g = rng.uniform(0.5, 1.5);
    }
    let probe = {
        let mut r = Xoshiro256PlusPlus::seed_from_u64(5152);
        Tensor::from_vec(vec![32, 64], (0..32 * 64).map(|_| r.uniform(-1.0, 1.0)).collect())
            .unwrap()
    };
    let calib = generate_calib(64, 4, 32, 5153, false);
    let stats = collect_stats(
        &model,
        &calib,
        &[Tap::ResidStream, Tap::LoraMid, Tap::OutprojIn, Tap::MatmulH],
    )
    .unwrap();
    let folded = fold_norm_scales(&model).unwrap();
    let resid_rot = klt_enhanced(
        &stats.tap(Tap::ResidStream).unwrap().covariance().unwrap(),
        "resid_stream",
    )
    .unwrap();
    let lora_rot = klt_enhanced(
        &stats.tap(Tap::LoraMid).unwrap().covariance().unwrap(),
        "lora_mid",
    )
    .unwrap();
    let s_out = smoothing_factors(&stats, Tap::OutprojIn).unwrap();
    let s_mm = smoothing_factors(&stats, Tap::MatmulH).unwrap();

    let mut worst = 0.0f64;
    let mut record = |name: &str, rep: mquant::transform::EquivalenceReport| {
        println!("  rewrite {name}: max_rel {:.3e}", rep.max_rel);
        worst = worst.max(rep.max_rel);
    };
    record("fold_norm", equivalence_check(&model, &folded, &probe).unwrap());
    record(
        "offline resid_stream",
        equivalence_check(
            &model,
            &apply_offline_rotation(&folded, &resid_rot.h_k, Tap::ResidStream).unwrap(),
            &probe,
        )
        .unwrap(),
    );
    record(
        "offline lora_mid",
        equivalence_check(
            &model,
            &apply_offline_rotation(&folded, &lora_rot.h_k, Tap::LoraMid).unwrap(),
            &probe,
        )
        .unwrap(),
    );
    record(
        "smooth outproj",
        equivalence_check(&model, &apply_smooth_outproj(&model, &s_out.s).unwrap(), &probe)
            .unwrap(),
    );
    record(
        "smooth matmul",
        equivalence_check(&model, &apply_smooth_matmul(&model, &s_mm.s).unwrap(), &probe)
            .unwrap(),
    );
    record(
        "online hadamard",
        equivalence_check(
            &model,
            &attach_online_hadamard(&model, &[Tap::OutprojIn, Tap::MatmulH]).unwrap(),
            &probe,
        )
        .unwrap(),
    );
    let plan = build_plan(&model, &stats, Scheme::Full).unwrap();
    let full = apply_plan(&model, &plan).unwrap();
    record("full pipeline", equivalence_check(&model, &full, &probe).unwrap());

    // ablation: with nonzero initial state, stripping the first-token
    // correction must break equivalence
    let smoothed = apply_smooth_matmul(&model, &s_mm.s).unwrap();
    let h0: Vec<Tensor> = (0..4)
        .map(|i| {
            let mut r = Xoshiro256PlusPlus::seed_from_u64(5200 + i);
            Tensor::from_vec(
                vec![128, 16],
                (0..128 * 16).map(|_| r.uniform(-3.0, 3.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    let base_out = model.forward_with(&probe, Some(&h0), None).unwrap();
    let with_corr = smoothed.forward_with(&probe, Some(&h0), None).unwrap();
    let corr_rep = compare_outputs(&base_out, &with_corr);
    worst = worst.max(corr_rep.max_rel);
    let mut stripped = smoothed.clone();
    for b in &mut stripped.blocks {
        b.delta1_corr = None;
    }
    let without = stripped.forward_with(&probe, Some(&h0), None).unwrap();
    let ablation_rel = compare_outputs(&base_out, &without).max_rel;

    let elapsed = start.elapsed();
    let ok = worst <= 1e-9 && ablation_rel > 1e-3 && elapsed.as_secs_f64() < 10.0;
    verdict(
        5,
        ok,
        &format!(
            "worst rewrite max_rel {worst:.3e} (<= 1e-9); correction-stripped divergence \
             {ablation_rel:.3e} (> 1e-3); {elapsed:?}"
        ),
    );
    assert!(worst <= 1e-9, "rewrite drift {worst:.3e}");
    assert!(ablation_rel > 1e-3, "ablation failed to diverge: {ablation_rel:.3e}");
    assert!(elapsed.as_secs_f64() < 10.0);
}

#[test]
fn acceptance_6_quantization_error_ordering() {
    let start = Instant::now();
    let model = init_model(&toy_config(11, true)).unwrap();
    let calib = generate_calib(64, 8, 32, 12, true);
    let probe = generate_calib(64, 4, 32, 13, true);

    // 4-bit per-tensor loss at the gate-projection input, per scheme
    let qcfg4 = QuantConfig::new(4, 8);
    let s4 = scheme_comparison(
        &model,
        &calib,
        &probe,
        &qcfg4,
        &[Scheme::Rtn, Scheme::Hadamard, Scheme::Klt],
    )
    .unwrap();
    let l1_rtn = s4["rtn"].tap_l1["resid_stream"];
    let l1_had = s4["hadamard"].tap_l1["resid_stream"];
    let l1_klt = s4["klt"].tap_l1["resid_stream"];
    // the enhanced rotation equalizes the calibration-set channel variances
    // at the rotated interface exactly
    let klt_spread = s4["klt"].tap_variance_spread["resid_stream"] - 1.0;
    assert!(klt_spread <= 1e-6, "in-sample variance spread {klt_spread:.3e}");

    // end-to-end fidelity at W8A8
    let qcfg8 = QuantConfig::new(8, 8);
    let s8 = scheme_comparison(&model, &calib, &probe, &qcfg8, &[Scheme::Rtn, Scheme::Full])
        .unwrap();
    let cos_rtn = s8["rtn"].output_cosine;
    let cos_full = s8["full"].output_cosine;

    let elapsed = start.elapsed();
    let ordering = l1_klt < l1_had && l1_had < l1_rtn;
    let halved = l1_klt <= 0.75 * l1_had;
    let cosine_ok = cos_full >= cos_rtn;
    let ok = ordering && halved && cosine_ok && elapsed.as_secs_f64() < 30.0;
    verdict(
        6,
        ok,
        &format!(
            "gate-input 4-bit l1: enhanced {l1_klt:.0} < plain {l1_had:.0} < none {l1_rtn:.0}, \
             ratio {:.3} (<= 0.75); W8A8 cosine full {cos_full:.8} >= rtn {cos_rtn:.8}; {elapsed:?}",
            l1_klt / l1_had
        ),
    );
    assert!(ordering, "l1 ordering violated: {l1_klt} vs {l1_had} vs {l1_rtn}");
    assert!(halved, "enhanced/plain ratio {:.3} > 0.75", l1_klt / l1_had);
    assert!(cosine_ok, "full {cos_full} < rtn {cos_rtn}");
    assert!(elapsed.as_secs_f64() < 30.0);
}

#[test]
fn acceptance_7_cost_model_reference_values() {
    let start = Instant::now();
    let c = cost_model(&CostInputs {
        d_inner: 5120,
        d_state: 16,
        n_blocks: 64,
        n_tokens: 1024,
        base_params: 2.8e9,
        base_flops: 2.8e12,
    })
    .unwrap();
    let elapsed = start.elapsed();
    let param = format!("{:.2}", c.param_overhead_pct);
    let flop = format!("{:.2}", c.flop_overhead_pct);
    let ok = param == "0.01" && flop == "0.91" && elapsed.as_secs_f64() < 1e-3;
    verdict(7, ok, &format!("parameter overhead {param}% and flop overhead {flop}%, {elapsed:?}"));
    assert_eq!(param, "0.01");
    assert_eq!(flop, "0.91");
    assert!(elapsed.as_secs_f64() < 1e-3);
}

#[test]
fn acceptance_8_smoothing_contract() {
    let model = init_model(&toy_config(88, true)).unwrap();
    let calib = generate_calib(64, 8, 32, 89, true);
    let stats = collect_stats(&model, &calib, &[Tap::OutprojIn]).unwrap();
    let sv = smoothing_factors(&stats, Tap::OutprojIn).unwrap();

    let log_mean: f64 = sv.s.iter().map(|v| v.ln()).sum::<f64>() / sv.s.len() as f64;
    let geomean = log_mean.exp();

    let smoothed = apply_smooth_outproj(&model, &sv.s).unwrap();
    let restats = collect_stats(&smoothed, &calib, &[Tap::OutprojIn]).unwrap();
    let stds: Vec<f64> = restats
        .tap(Tap::OutprojIn)
        .unwrap()
        .variances()
        .unwrap()
        .iter()
        .map(|v| v.sqrt())
        .collect();
    let spread = spread_ratio(&stds) - 1.0;
    let gm_err = (geomean - 1.0).abs();
    let ok = spread <= 1e-6 && gm_err <= 1e-9;
    verdict(
        8,
        ok,
        &format!(
            "re-measured channel stds relative spread {spread:.3e} (<= 1e-6); \
             smoothing geometric mean off by {gm_err:.3e} (<= 1e-9)"
        ),
    );
    assert!(spread <= 1e-6, "std spread {spread:.3e}");
    assert!(gm_err <= 1e-9);
}

#[test]
fn acceptance_9_file_formats_and_golden_command() {
    use mquant::io;
    let dir = tempfile::tempdir().unwrap();

    // bit-exact round trips
    let model = init_model(&toy_config(99, true)).unwrap();
    let ckpt = dir.path().join("m.mqck");
    io::write_model(&ckpt, &model).unwrap();
    let bytes_a = std::fs::read(&ckpt).unwrap();
    let reloaded = io::read_model(&ckpt).unwrap();
    io::write_model(&ckpt, &reloaded).unwrap();
    let bytes_b = std::fs::read(&ckpt).unwrap();
    let roundtrip_ok = bytes_a == bytes_b;

    let calib = generate_calib(64, 2, 8, 100, false);
    let cpath = dir.path().join("c.mqcd");
    io::write_calib(&cpath, &calib).unwrap();
    let cbytes_a = std::fs::read(&cpath).unwrap();
    let creload = io::read_calib(&cpath).unwrap();
    io::write_calib(&cpath, &creload).unwrap();
    let cbytes_b = std::fs::read(&cpath).unwrap();
    let calib_ok = cbytes_a == cbytes_b;

    // the five corruption classes
    let mut classes_ok = true;
    {
        let good = bytes_a.clone();
        let corrupt = |bytes: Vec<u8>| -> String {
            let p = dir.path().join("bad.mqck");
            std::fs::write(&p, bytes).unwrap();
            io::read_container(&p).unwrap_err().to_string()
        };
        let mut b = good.clone();
        b[0] = b'Q';
        classes_ok &= corrupt(b).contains("bad magic");
        let mut b = good.clone();
        b[4] = 77;
        classes_ok &= corrupt(b).contains("version mismatch");
        let mut b = good.clone();
        let len = b.len();
        b.truncate(len - 9);
        classes_ok &= corrupt(b).contains("truncated payload");
        // overlap and duplicates need a handcrafted small container
        let mut entries = std::collections::BTreeMap::new();
        entries.insert("x".to_string(), io::Entry::f64(vec![2], vec![1.0, 2.0]));
        entries.insert("y".to_string(), io::Entry::f64(vec![2], vec![3.0, 4.0]));
        let p2 = dir.path().join("two.mqck");
        io::write_container(&p2, &entries).unwrap();
        let two = std::fs::read(&p2).unwrap();
        let entry_len = 2 + 1 + 1 + 1 + 4 + 8;
        let mut b = two.clone();
        let off_pos = 12 + entry_len + (2 + 1 + 1 + 1 + 4);
        for (k, byte) in 0u64.to_le_bytes().iter().enumerate() {
            b[off_pos + k] = *byte;
        }
        classes_ok &= corrupt(b).contains("overlapping");
        let mut b = two;
        b[12 + entry_len + 2] = b'x';
        classes_ok &= corrupt(b).contains("duplicate");
    }

    let golden = cli_main(["mquant", "appendix-golden"]);
    let golden_ok = golden == 0;
    let ok = roundtrip_ok && calib_ok && classes_ok && golden_ok;
    verdict(
        9,
        ok,
        &format!(
            "container round-trip byte-identical: {roundtrip_ok}; calibration file: {calib_ok}; \
             corruption classes rejected: {classes_ok}; golden command exit {golden}"
        ),
    );
    assert!(roundtrip_ok);
    assert!(calib_ok);
    assert!(classes_ok);
    assert!(golden_ok);
}
