//! Acceptance checks. Runs without the libtest harness so every check
//! prints one PASS/FAIL line with its measured numbers; `cargo test --test
//! acceptance -- 4 7` runs a subset.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use accelsim::accelconfig::{
    load_config, validate_config, ConfigFileError, ConfigNotice, ControllerType, HardwareConfig, MsNetworkType,
    ReduceNetworkType, ValidatedConfig,
};
use accelsim::graph::{infer_shapes, parse_model, ConvLayerParams, FcLayerParams, Model};
use accelsim::mapping::{enumerate_space, Mapping, MappingFile, SpacePolicy, Workload};
use accelsim::runner::{layer_parameters, run_model, RunOptions};
use accelsim::simulator::{count_psums, simulate_sparse_gemm};
use accelsim::tensorops::{conv2d_ref, dense_ref, gemm_ref, im2col, kernel_matrix, LayoutTag, Tensor, ValueMode};
use accelsim::tuner::{sweep_hardware, trial_cost, tune_model, tune_workload, Objective, Strategy, TunerOptions};

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn load_model(name: &str) -> Model {
    infer_shapes(&parse_model(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()).unwrap()
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn pow2_upto(rng: &mut ChaCha8Rng, lo: u32, hi: u32) -> u32 {
    let (a, b) = (lo.trailing_zeros(), hi.trailing_zeros());
    1 << rng.gen_range(a..=b)
}

fn random_conv(rng: &mut ChaCha8Rng) -> (ConvLayerParams, &'static str) {
    let g = [1, 2, 4][rng.gen_range(0..3)];
    let c = g * rng.gen_range(1..=16 / g);
    let k = g * rng.gen_range(1..=16 / g);
    let r = rng.gen_range(1..=5);
    let s = rng.gen_range(1..=5);
    let h = rng.gen_range(r..=16);
    let w = rng.gen_range(s..=16);
    let mut p = ConvLayerParams::new(r, s, c, k, g, h, w)
        .with_padding(rng.gen_range(0..r.min(3)), rng.gen_range(0..s.min(3)))
        .with_stride(rng.gen_range(1..=2), rng.gen_range(1..=2));
    p.infer_output().unwrap();
    (p, if rng.gen_bool(0.5) { "NCHW" } else { "NHWC" })
}

fn conv_json(p: &ConvLayerParams, layout: &str) -> String {
    let kernel = if layout == "NCHW" { "KCRS" } else { "RSCK" };
    format!(
        r#"{{"id":"L","op":"conv2d","layout":"{layout}","kernel_layout":"{kernel}","r":{},"s":{},"c":{},"k":{},"g":{},"h":{},"w":{},"pad_h":{},"pad_w":{},"stride_h":{},"stride_w":{}}}"#,
        p.r, p.s, p.c, p.k, p.g, p.h, p.w, p.pad_h, p.pad_w, p.stride_h, p.stride_w
    )
}

fn one_layer_model(layer_json: &str, seed: u64) -> Model {
    let text = format!(r#"{{"name":"case","seed":{seed},"layers":[{layer_json}]}}"#);
    infer_shapes(&parse_model(&text).unwrap()).unwrap()
}

fn random_configs(rng: &mut ChaCha8Rng) -> Vec<ValidatedConfig> {
    let ms = pow2_upto(rng, 8, 64);
    let flex = HardwareConfig::flex_linear(ms, pow2_upto(rng, 1, ms));
    let mut sparse = HardwareConfig::sparse_gemm(pow2_upto(rng, 8, 64), pow2_upto(rng, 1, 64), rng.gen_range(0..=60));
    sparse.rn_bw = pow2_upto(rng, 1, 64);
    let tpu = HardwareConfig::systolic_os(pow2_upto(rng, 1, 8), pow2_upto(rng, 1, 8));
    [flex, sparse, tpu]
        .iter()
        .map(|c| validate_config(c).unwrap())
        .collect()
}

fn exact(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// Random conv2d and dense layers through the full runner on all three
/// controllers; outputs must equal both the naive oracle and the reference
/// kernels, and flexible-array counters must equal their closed forms.
fn functional_oracle_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let (mut layers, mut runs, mut failures) = (0, 0, Vec::new());
    for case in 0..120u64 {
        let is_conv = case % 3 != 2;
        let (json, conv) = if is_conv {
            let (p, layout) = random_conv(&mut rng);
            (conv_json(&p, layout), Some(p))
        } else {
            let (i, o) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            (
                format!(r#"{{"id":"L","op":"dense","in_features":{i},"out_features":{o}}}"#),
                None,
            )
        };
        let model = one_layer_model(&json, case);
        let layer = &model.layers[0];
        layers += 1;
        for cfg in random_configs(&mut rng) {
            let mut file = MappingFile::default();
            let workload = Workload::from_layer(layer).unwrap();
            if cfg.controller() == ControllerType::FlexLinear {
                let space = enumerate_space(&workload, &cfg, SpacePolicy::Full).unwrap();
                let m = *space.get(rng.gen_range(0..space.len())).unwrap();
                file.insert("L", &m);
            }
            let run = run_model(&model, &cfg, Some(&file), None, &RunOptions::default()).unwrap();
            runs += 1;
            let w = layer_parameters(layer, 0, case, ValueMode::Integer, cfg.config().sparsity_ratio)
                .unwrap()
                .unwrap();
            let metrics = run.layers[0].metrics.unwrap();
            let (oracle, reference, got) = match conv {
                Some(p) => (
                    naive_conv(&run.input, &w, &p),
                    conv_output_as_kpq(&conv2d_ref(&run.input, &w, &p).unwrap(), &p),
                    conv_output_as_kpq(&run.output, &p),
                ),
                None => {
                    let (i, o) = (w.rows(), w.cols());
                    (
                        naive_matmul(run.input.data(), w.data(), 1, i, o),
                        as_f64(&dense_ref(&run.input, &w).unwrap()),
                        as_f64(&run.output),
                    )
                }
            };
            let mut ok = exact(&got, &oracle) && exact(&got, &reference);
            ok &= metrics.macs + metrics.skipped_macs == workload.macs();
            ok &= (0.0..=1.0).contains(&metrics.utilization) && metrics.cycles >= 1;
            if cfg.controller() == ControllerType::FlexLinear {
                let m = file.get(layer).unwrap().unwrap();
                let (ms, dn, rn, acc) = cfg_numbers(&cfg);
                let formula = match (conv, &m) {
                    (Some(p), Mapping::Conv(cm)) => conv_cycles_formula(&p, cm, ms, dn, rn, acc),
                    (None, Mapping::Fc(fm)) => match workload {
                        Workload::Fc(fc) => fc_cycles_formula(&fc, fm, ms, dn, rn, acc),
                        _ => unreachable!(),
                    },
                    _ => unreachable!(),
                };
                ok &= metrics.cycles == formula && metrics.psums == count_psums(&workload, &m).unwrap();
            } else if cfg.controller() == ControllerType::SystolicOs {
                ok &= metrics.skipped_macs == 0;
            }
            if !ok {
                failures.push(format!("case {case} on {}", cfg.controller()));
            }
        }
    }
    outcome(
        failures.is_empty() && layers >= 100,
        format!(
            "{layers} layers, {runs} runs, {} mismatches {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

/// im2col + GEMM against direct convolution, grouped and both layouts.
fn lowering_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1c01);
    let mut bad = 0;
    let mut groups_seen = [0usize; 3];
    let cases = 60;
    for case in 0..cases {
        let g = [1, 2, 4][case % 3];
        groups_seen[case % 3] += 1;
        let c = g * rng.gen_range(1..=4);
        let k = g * rng.gen_range(1..=4);
        let (r, s) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let mut p = ConvLayerParams::new(r, s, c, k, g, rng.gen_range(r..=12), rng.gen_range(s..=12))
            .with_padding(rng.gen_range(0..r), rng.gen_range(0..s))
            .with_stride(rng.gen_range(1..=2), rng.gen_range(1..=2));
        p.infer_output().unwrap();
        let nchw = case % 2 == 0;
        let (itag, ktag) = if nchw {
            (LayoutTag::Nchw, LayoutTag::Kcrs)
        } else {
            (LayoutTag::Nhwc, LayoutTag::Rsck)
        };
        let x = Tensor::random(
            accelsim::tensorops::conv_input_dims(&p, itag),
            itag,
            case as u64,
            ValueMode::Integer,
            (-3, 3),
        )
        .unwrap();
        let w = Tensor::random(
            accelsim::tensorops::conv_kernel_dims(&p, ktag),
            ktag,
            case as u64 + 1000,
            ValueMode::Integer,
            (-2, 2),
        )
        .unwrap();
        let (patches, kmat) = (im2col(&x, &p).unwrap(), kernel_matrix(&w, &p).unwrap());
        let lowered = if nchw {
            // k x pq, already [oc][y][x]
            as_f64(&gemm_ref(&kmat, &patches).unwrap())
        } else {
            let t = gemm_ref(&patches, &kmat).unwrap();
            let mut v = vec![0f64; p.k * p.p * p.q];
            for f in 0..p.p * p.q {
                for oc in 0..p.k {
                    v[oc * p.p * p.q + f] = t.data()[f * p.k + oc] as f64;
                }
            }
            v
        };
        let direct = conv_output_as_kpq(&conv2d_ref(&x, &w, &p).unwrap(), &p);
        if !exact(&lowered, &direct) || !exact(&direct, &naive_conv(&x, &w, &p)) {
            bad += 1;
        }
    }
    outcome(
        bad == 0,
        format!("{cases} cases, groups 1/2/4 = {groups_seen:?}, {bad} mismatches"),
    )
}

/// Accept at each boundary and reject just beyond it.
fn config_rule_matrix() -> Outcome {
    let mut checks: Vec<(String, bool)> = Vec::new();
    let mut check = |name: &str, ok: bool| checks.push((name.to_string(), ok));
    let accepts = |c: &HardwareConfig| validate_config(c).is_ok();
    let rejects = |c: &HardwareConfig, field: &str| validate_config(c).err().is_some_and(|e| e.violates(field));

    for base in [HardwareConfig::flex_linear(8, 8), HardwareConfig::sparse_gemm(8, 8, 0)] {
        let name = base.controller_type.to_string();
        check(&format!("{name} ms_size=8 accepted"), accepts(&base));
        check(
            &format!("{name} ms_size=4 rejected"),
            rejects(
                &HardwareConfig {
                    ms_size: Some(4),
                    ..base.clone()
                },
                "ms_size",
            ),
        );
        check(
            &format!("{name} ms_size=12 rejected"),
            rejects(
                &HardwareConfig {
                    ms_size: Some(12),
                    ..base.clone()
                },
                "ms_size",
            ),
        );
        for field in ["dn_bw", "rn_bw"] {
            let mut ok = base.clone();
            let mut bad = base.clone();
            if field == "dn_bw" {
                ok.dn_bw = 1;
                bad.dn_bw = 3;
            } else {
                ok.rn_bw = 1;
                bad.rn_bw = 3;
            }
            check(&format!("{name} {field}=1 accepted"), accepts(&ok));
            check(&format!("{name} {field}=3 rejected"), rejects(&bad, field));
        }
        check(
            &format!("{name} OS_MESH rejected"),
            rejects(
                &HardwareConfig {
                    ms_network_type: MsNetworkType::OsMesh,
                    ms_rows: Some(2),
                    ms_cols: Some(2),
                    ..base.clone()
                },
                "ms_network_type",
            ),
        );
    }
    let tpu = HardwareConfig::systolic_os(4, 8);
    check("SYSTOLIC_OS 4x8 accepted", accepts(&tpu));
    for field in ["ms_rows", "ms_cols"] {
        let mut bad = tpu.clone();
        let mut one = tpu.clone();
        if field == "ms_rows" {
            bad.ms_rows = Some(6);
            one.ms_rows = Some(1);
        } else {
            bad.ms_cols = Some(6);
            one.ms_cols = Some(1);
        }
        check(&format!("{field}=1 accepted"), accepts(&one));
        check(&format!("{field}=6 rejected"), rejects(&bad, field));
    }
    check(
        "SYSTOLIC_OS on LINEAR rejected",
        rejects(
            &HardwareConfig {
                ms_network_type: MsNetworkType::Linear,
                ms_size: Some(32),
                ..tpu.clone()
            },
            "ms_network_type",
        ),
    );
    check(
        "SYSTOLIC_OS without TEMPORALRN rejected",
        rejects(
            &HardwareConfig {
                reduce_network_type: ReduceNetworkType::AsNetwork,
                ..tpu.clone()
            },
            "reduce_network_type",
        ),
    );
    check(
        "SYSTOLIC_OS without accumulation buffer rejected",
        rejects(
            &HardwareConfig {
                accumulation_buffer: false,
                ..tpu.clone()
            },
            "accumulation_buffer",
        ),
    );
    for (ratio, ok) in [(0, true), (100, true), (101, false)] {
        let c = HardwareConfig::sparse_gemm(8, 8, ratio);
        let verdict = if ok { accepts(&c) } else { rejects(&c, "sparsity_ratio") };
        check(&format!("sparsity_ratio={ratio} validated"), verdict);
        let text = format!(r#"{{"controller_type":"SPARSE_GEMM","ms_size":8,"sparsity_ratio":{ratio}}}"#);
        let loaded = load_config(&text);
        let file_ok = if ok {
            loaded.is_ok()
        } else {
            matches!(loaded, Err(ConfigFileError::OutOfRange { .. }))
        };
        check(&format!("sparsity_ratio={ratio} loaded"), file_ok);
    }
    // mesh bandwidths are corrected, not rejected
    let skewed = HardwareConfig {
        dn_bw: 3,
        rn_bw: 5,
        ..HardwareConfig::systolic_os(4, 8)
    };
    let first = validate_config(&skewed).unwrap();
    check(
        "correction dn_bw=rows+cols, rn_bw=rows*cols",
        (first.config().dn_bw, first.config().rn_bw) == (12, 32)
            && matches!(
                first.notices()[0],
                ConfigNotice::BandwidthCorrected {
                    dn_bw: (3, 12),
                    rn_bw: (5, 32)
                }
            ),
    );
    let second = validate_config(first.config()).unwrap();
    check(
        "correction idempotent",
        second.config() == first.config()
            && !second
                .notices()
                .iter()
                .any(|n| matches!(n, ConfigNotice::BandwidthCorrected { .. })),
    );
    let failed: Vec<&String> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| n).collect();
    outcome(
        failed.is_empty(),
        format!("{} rule checks, failed: {failed:?}", checks.len()),
    )
}

/// Multiplier sweep on the 1x2x10x10 conv with exhaustive divisor grids.
fn multiplier_sweep() -> Outcome {
    let model = load_model("fig8_conv.json");
    let base = HardwareConfig::flex_linear(8, 16);
    let sizes = [8, 16, 32, 64, 128];
    let opts = TunerOptions {
        parallelism: cores(),
        ..TunerOptions::default()
    };
    let rows = sweep_hardware(&model, &base, "ms_size", &sizes, Objective::Cycles, &opts, None).unwrap();
    let mut best = Vec::new();
    let mut ratio = Vec::new();
    for r in &rows {
        let (_, tr) = &r.layers[0];
        let worst = tr.history.iter().map(|t| t.cost).max().unwrap();
        best.push(*r.outcome.as_ref().unwrap());
        ratio.push(worst as f64 / tr.best_cost as f64);
    }
    let non_increasing = best.windows(2).all(|w| w[1] <= w[0]);
    let widening = ratio[4] > ratio[0];
    let gain = best[0] as f64 / best[4] as f64;
    outcome(
        non_increasing && widening && gain >= 4.0,
        format!(
            "optimal cycles {best:?}; worst/best at 8 = {:.2}, at 128 = {:.2}; optimal(8)/optimal(128) = {gain:.2}",
            ratio[0], ratio[4]
        ),
    )
}

/// Half the weights zeroed on the sparse engine.
fn sparsity_effect() -> Outcome {
    let cfg = validate_config(&HardwareConfig::sparse_gemm(64, 64, 50)).unwrap();
    let (m, k, n) = (64, 64, 64);
    let mut reductions = Vec::new();
    let mut correct = true;
    for seed in 0..12u64 {
        let dense_w = Tensor::random(vec![m, k], LayoutTag::Matrix, seed, ValueMode::Integer, (1, 3)).unwrap();
        let data = Tensor::random(vec![k, n], LayoutTag::Matrix, seed + 100, ValueMode::Integer, (1, 3)).unwrap();
        let mut pruned = dense_w.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        for v in pruned.data_mut() {
            if rng.gen_bool(0.5) {
                *v = 0.0;
            }
        }
        let dense = simulate_sparse_gemm(&dense_w, &data, &cfg).unwrap();
        let sparse = simulate_sparse_gemm(&pruned, &data, &cfg).unwrap();
        correct &= exact(
            &as_f64(&sparse.output),
            &naive_matmul(pruned.data(), data.data(), m, k, n),
        );
        reductions.push(1.0 - sparse.cycles as f64 / dense.cycles as f64);
    }
    let lo = reductions.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reductions.iter().cloned().fold(0.0, f64::max);
    outcome(
        correct && lo >= 0.35 && hi <= 0.60,
        format!(
            "{} seeds, cycle reduction {:.1}%..{:.1}%",
            reductions.len(),
            lo * 100.0,
            hi * 100.0
        ),
    )
}

fn small_workloads() -> Vec<Workload> {
    let conv = |r, s, c, k, g, h, w| {
        let mut p = ConvLayerParams::new(r, s, c, k, g, h, w);
        p.infer_output().unwrap();
        Workload::Conv(p)
    };
    vec![
        Workload::Fc(FcLayerParams::new(6, 4)),
        Workload::Fc(FcLayerParams::new(16, 12)),
        Workload::Fc(FcLayerParams::new(48, 40)),
        conv(3, 3, 2, 4, 1, 10, 10),
        conv(3, 3, 4, 8, 2, 6, 6),
        conv(1, 1, 8, 8, 4, 5, 5),
        conv(2, 3, 3, 6, 1, 7, 6),
    ]
}

/// Grid against brute force, full-coverage random and genetic, and short
/// genetic runs.
fn tuner_oracles() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut spaces = 0;
    for (wi, w) in small_workloads().iter().enumerate() {
        for (ms, policy) in [(16u32, SpacePolicy::Divisors), (32, SpacePolicy::Full)] {
            let cfg = validate_config(&HardwareConfig::flex_linear(ms, 8)).unwrap();
            let space = enumerate_space(w, &cfg, policy).unwrap();
            if space.len() > 10_000 {
                continue;
            }
            spaces += 1;
            let lists: Vec<Vec<usize>> = w
                .tile_bounds()
                .iter()
                .zip(w.tile_names())
                .map(|(&b, &name)| match (name, policy) {
                    ("t_n", _) => vec![1],
                    (_, SpacePolicy::Divisors) => divisors_naive(b),
                    (_, SpacePolicy::Full) => (1..=b).collect(),
                })
                .collect();
            let points = brute_force_points(&lists, ms as u64);
            ok &= points.len() == space.len();
            for objective in [Objective::Cycles, Objective::Psums] {
                let (mut best_cost, mut best_tiles) = (u64::MAX, Vec::new());
                for t in &points {
                    let c = trial_cost(w, &w.mapping_from_tiles(t), &cfg, objective).unwrap();
                    if c < best_cost || (c == best_cost && *t < best_tiles) {
                        best_cost = c;
                        best_tiles = t.clone();
                    }
                }
                let brute = w.mapping_from_tiles(&best_tiles);
                for strategy in [Strategy::Grid, Strategy::Random, Strategy::Genetic] {
                    let opts = TunerOptions {
                        strategy,
                        seed: wi as u64,
                        budget: Some(space.len()),
                        policy,
                        ..TunerOptions::default()
                    };
                    let r = tune_workload(w, &cfg, objective, &opts).unwrap();
                    if (r.best_cost, r.best_mapping) != (best_cost, brute) {
                        ok = false;
                        notes.push(format!(
                            "workload {wi} {objective} {strategy:?}: {} vs {best_cost}",
                            r.best_cost
                        ));
                    }
                }
            }
        }
    }

    // short genetic runs on a larger space
    let mut p = ConvLayerParams::new(3, 3, 8, 16, 1, 10, 10);
    p.infer_output().unwrap();
    let w = Workload::Conv(p);
    let cfg = validate_config(&HardwareConfig::flex_linear(64, 16)).unwrap();
    let space = enumerate_space(&w, &cfg, SpacePolicy::Full).unwrap();
    let grid = tune_workload(
        &w,
        &cfg,
        Objective::Cycles,
        &TunerOptions {
            policy: SpacePolicy::Full,
            parallelism: cores(),
            ..TunerOptions::default()
        },
    )
    .unwrap();
    let budget = space.len() / 10;
    let mut within = 0;
    for seed in 0..20 {
        let opts = TunerOptions {
            strategy: Strategy::Genetic,
            budget: Some(budget),
            seed,
            policy: SpacePolicy::Full,
            parallelism: cores(),
            ..TunerOptions::default()
        };
        let r = tune_workload(&w, &cfg, Objective::Cycles, &opts).unwrap();
        ok &= r.best_cost >= grid.best_cost;
        if r.best_cost <= 2 * grid.best_cost {
            within += 1;
        }
    }
    ok &= within >= 18;
    outcome(
        ok,
        format!(
            "{spaces} spaces matched by grid/random/genetic {notes:?}; genetic at 10% budget ({budget} of {}) within 2x of optimum in {within}/20 runs",
            space.len()
        ),
    )
}

/// Psum-tuned versus all-ones mappings on AlexNet.
fn default_vs_tuned() -> Outcome {
    let model = load_model("alexnet.json");
    let cfg_text = std::fs::read_to_string(fixture("maeri_128.json")).unwrap();
    let cfg = validate_config(&load_config(&cfg_text).unwrap()).unwrap();
    let opts = TunerOptions {
        strategy: Strategy::Genetic,
        budget: Some(2000),
        early_stop: Some(300),
        seed: 7,
        parallelism: cores(),
        ..TunerOptions::default()
    };
    let tuning = tune_model(&model, &cfg, Objective::Psums, &opts).unwrap();
    if !tuning.errors.is_empty() {
        return outcome(false, format!("tuning errors: {:?}", tuning.errors));
    }
    let run_opts = RunOptions {
        retain_outputs: false,
        ..RunOptions::default()
    };
    let default = run_model(&model, &cfg, None, None, &run_opts).unwrap();
    let tuned = run_model(&model, &cfg, Some(&tuning.mapping_file()), None, &run_opts).unwrap();
    let mut ok = default.output == tuned.output;
    let mut parts = Vec::new();
    for (d, t) in default.layers.iter().zip(&tuned.layers) {
        let (Some(dm), Some(tm)) = (d.metrics, t.metrics) else {
            continue;
        };
        let speedup = dm.cycles as f64 / tm.cycles as f64;
        let need = if d.op == "conv2d" { 5.0 } else { 2.0 };
        ok &= speedup >= need;
        parts.push(format!("{} {speedup:.1}x", d.id));
    }
    ok &= parts.len() == 8;
    outcome(ok, parts.join(", "))
}

/// Rank agreement between psums and cycles over a full space.
fn psums_cycles_relationship() -> Outcome {
    let mut p = ConvLayerParams::new(3, 3, 2, 4, 1, 6, 6);
    p.infer_output().unwrap();
    let w = Workload::Conv(p);
    let cfg = validate_config(&HardwareConfig::flex_linear(32, 16)).unwrap();
    let opts = TunerOptions {
        policy: SpacePolicy::Full,
        parallelism: cores(),
        ..TunerOptions::default()
    };
    let cyc = tune_workload(&w, &cfg, Objective::Cycles, &opts).unwrap();
    let ps = tune_workload(&w, &cfg, Objective::Psums, &opts).unwrap();
    let a: Vec<f64> = ps.history.iter().map(|t| t.cost as f64).collect();
    let b: Vec<f64> = cyc.history.iter().map(|t| t.cost as f64).collect();
    let aligned = ps.history.iter().zip(&cyc.history).all(|(x, y)| x.mapping == y.mapping);
    let rho = spearman(&a, &b);
    let psum_opt_cycles = cyc
        .history
        .iter()
        .find(|t| t.mapping == ps.best_mapping)
        .map(|t| t.cost)
        .unwrap();
    let ratio = psum_opt_cycles as f64 / cyc.best_cost as f64;
    outcome(
        aligned && rho > 0.0 && ratio <= 4.0,
        format!(
            "{} mappings, Spearman {rho:.3}, psum-optimal cycles {psum_opt_cycles} vs optimum {} ({ratio:.2}x)",
            a.len(),
            cyc.best_cost
        ),
    )
}

fn cli(args: &[&str], parallelism: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_accelsim"))
        .args(args)
        .env("BIFROST_PARALLELISM", parallelism)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Repeated `run` and `tune` invocations, at one and eight workers.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = fixture("small_cnn.json");
    let model = model.to_str().unwrap();
    let path = |name: &str| d.join(name).to_str().unwrap().to_string();
    let mut files: Vec<Vec<String>> = vec![Vec::new(); 4];
    let mut ok = true;
    for (round, par) in ["1", "1", "8", "8"].iter().enumerate() {
        for cfg in ["maeri_128.json", "sigma_128.json", "tpu_16x16.json"] {
            let c = fixture(cfg);
            let out = path(&format!("run_{round}_{cfg}.csv"));
            ok &= cli(
                &["run", "-m", model, "-c", c.to_str().unwrap(), "--seed", "9", "-o", &out],
                par,
            );
            files[round].push(out);
        }
        let c = fixture("maeri_128.json");
        for tuner in ["grid", "random", "ga"] {
            let (map, hist) = (
                path(&format!("map_{round}_{tuner}.json")),
                path(&format!("hist_{round}_{tuner}.csv")),
            );
            ok &= cli(
                &[
                    "tune",
                    "-m",
                    model,
                    "-c",
                    c.to_str().unwrap(),
                    "--objective",
                    "cycles",
                    "--tuner",
                    tuner,
                    "--budget",
                    "300",
                    "--early-stop",
                    "100",
                    "--seed",
                    "3",
                    "-o",
                    &map,
                    "--history",
                    &hist,
                ],
                par,
            );
            files[round].push(map);
            files[round].push(hist);
        }
    }
    let read = |p: &String| std::fs::read(p).unwrap_or_default();
    let mut identical = 0;
    for i in 0..files[0].len() {
        let first = read(&files[0][i]);
        if !first.is_empty() && files.iter().all(|round| read(&round[i]) == first) {
            identical += 1;
        }
    }
    ok &= identical == files[0].len();
    outcome(
        ok,
        format!(
            "{identical}/{} output files byte-identical across 2 runs each at BIFROST_PARALLELISM=1 and 8",
            files[0].len()
        ),
    )
}

/// id, name, check, time limit in seconds
type Check = (usize, &'static str, fn() -> Outcome, u64);

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let checks: [Check; 9] = [
        (1, "functional oracle suite", functional_oracle_suite, 60),
        (2, "lowering equivalence", lowering_equivalence, 60),
        (3, "config rule matrix", config_rule_matrix, 60),
        (4, "multiplier sweep", multiplier_sweep, 600),
        (5, "sparsity effect", sparsity_effect, 60),
        (6, "tuner oracle equivalence", tuner_oracles, 600),
        (7, "default vs tuned speedup", default_vs_tuned, 900),
        (8, "psums vs cycles", psums_cycles_relationship, 600),
        (9, "determinism", determinism, 600),
    ];
    let mut failed = 0;
    for (id, name, f, limit) in checks {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let pass = out.pass && took <= Duration::from_secs(limit);
        if !pass {
            failed += 1;
        }
        println!(
            "acceptance {id} {name}: {} ({}) [{:.1}s of {limit}s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} failed");
        std::process::exit(1);
    }
    println!("acceptance: all passed");
}
