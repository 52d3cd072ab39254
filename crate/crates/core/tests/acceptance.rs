//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_UNMET` are reported but do not fail the run;
//! the README explains why each is out of reach. Any other failure, or a
//! known-unmet criterion that starts passing, is reported in the summary and
//! only the former fails the process.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitlstm::compression::{
    dequantize, prune_count, quantize_value, weight_sparsity, FixedPointFormat,
};
use splitlstm::costmodel::{
    latency_estimate, scalability, scalability_from_design, Fixtures, LatencyModelConfig, Resources,
};
use splitlstm::nn::io::load_model;
use splitlstm::nn::{ModelSpec, Parameters};
use splitlstm::nn::{
    build_student, build_teacher, init_params, model_size_kb, search_teacher_dims, teacher_param_count,
};
use splitlstm::compression::{compression_ratio, load_quantized};
use splitlstm::manifest::{RunManifest, MANIFEST_SUFFIX};
use splitlstm::pipeline::{self, ModelSource, PipelineConfig, PipelineSummary};
use splitlstm::split::{intermediate_size, partition, Deployed, PlanName, SplitPlan};
use splitlstm::training::{finite_diff_check, Batch, Objective};
use splitlstm::wire::{decode_frame, encode_frame, Dtype, Frame, MsgType};

/// Criteria that the specified procedure cannot meet on the synthetic
/// series; see the README.
const KNOWN_UNMET: &[u32] = &[8];

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

fn random_windows(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..15).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
}

fn c1() -> Outcome {
    let t = Instant::now();
    let s = build_student();
    let z: Vec<usize> = PlanName::PRESETS
        .iter()
        .map(|&p| intermediate_size(&s, &SplitPlan::preset(p, &s).unwrap()).unwrap())
        .collect();
    let kb = model_size_kb(s.param_count());
    let secs = t.elapsed().as_secs_f64();
    outcome(
        s.param_count() == 871 && format!("{kb:.2}") == "3.40" && z == [1, 5, 150] && secs < 1.0,
        format!("params {} size {kb:.2} KB z {z:?} ({secs:.3}s)", s.param_count()),
    )
}

fn c2() -> Outcome {
    let t = Instant::now();
    let hits = search_teacher_dims(39_951, 128);
    let secs = t.elapsed().as_secs_f64();
    let Some(&dims) = hits.first() else {
        return outcome(false, "no exact match for 39,951");
    };
    let n = teacher_param_count(dims);
    let ratio = compression_ratio(n, 871);
    let kb = model_size_kb(n);
    outcome(
        n == 39_951 && format!("{kb:.2}") == "156.06" && (ratio - 45.90).abs() <= 0.01 && secs < 10.0,
        format!(
            "{} exact matches, chosen {dims:?}: {n} params {kb:.2} KB ratio {ratio:.2} ({secs:.2}s)",
            hits.len()
        ),
    )
}

fn c3() -> Outcome {
    let t = Instant::now();
    let windows = random_windows(4, 3);
    let inputs: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
    let targets = vec![0.2, 0.7, 0.4, 0.9];
    let teacher_out = vec![0.25, 0.6, 0.5, 0.8];
    let mse = Batch {
        inputs: inputs.clone(),
        targets: targets.clone(),
        teacher_outputs: None,
    };
    let kd = Batch {
        inputs: inputs.clone(),
        targets,
        teacher_outputs: Some(teacher_out),
    };
    let student = build_student();
    let sp = init_params(&student, 11);
    let teacher = build_teacher(pipeline::default_teacher_dims().unwrap());
    let tp = init_params(&teacher, 12);
    // Every student parameter; a seeded sample of 600 teacher parameters
    // spread over all arrays.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sample: Vec<usize> = (0..600).map(|_| rng.random_range(0..teacher.param_count())).collect();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    type Check<'a> = (&'a str, &'a ModelSpec, &'a Parameters<f64>, &'a Batch<'a>, Objective, Option<&'a [usize]>);
    let checks: [Check; 4] = [
        ("student MSE", &student, &sp, &mse, Objective::mse(0.01), None),
        ("student KD", &student, &sp, &kd, Objective::kd(0.1, 0.01), None),
        ("teacher MSE", &teacher, &tp, &mse, Objective::mse(0.001), Some(&sample)),
        ("teacher KD", &teacher, &tp, &kd, Objective::kd(0.1, 0.001), Some(&sample)),
    ];
    for (name, spec, params, batch, obj, ix) in checks {
        let r = finite_diff_check(spec, params, batch, &obj, 1e-5, ix).unwrap();
        worst = worst.max(r.max_rel_error);
        lines.push(format!("{name} {:.1e} over {}", r.max_rel_error, r.checked));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 30.0, format!("{} ({secs:.1}s)", lines.join(", ")))
}

fn c4(student_q8: &Deployed, student_f32: &Deployed) -> Outcome {
    let windows = random_windows(100, 4);
    let mut checked = 0;
    for model in [student_f32, student_q8] {
        for plan in PlanName::PRESETS {
            let plan = SplitPlan::preset(plan, model.spec()).unwrap();
            let (edge, server) = partition(model, &plan).unwrap();
            for w in &windows {
                let split = server.forward(&edge.forward(w).unwrap()).unwrap();
                let whole = model.predict(w).unwrap();
                if split != whole {
                    return outcome(false, format!("{} {:?} differs on a window", plan.name, model.dtype()));
                }
                checked += 1;
            }
        }
    }
    outcome(true, format!("{checked} split/unsplit pairs bit-identical (3 plans x f32, q8 x 100 windows)"))
}

fn arb_frame() -> impl Strategy<Value = Frame> {
    (1u8..=4, 0u8..=1, any::<u8>(), prop::collection::vec(any::<u8>(), 0..256))
        .prop_map(|(t, d, r, p)| Frame::new(MsgType::try_from(t).unwrap(), Dtype::try_from(d).unwrap(), r, p))
}

fn c5(student_q8: &Deployed, student_f32: &Deployed) -> Outcome {
    let windows = random_windows(100, 5);
    let mut identical = 0;
    for model in [student_f32, student_q8] {
        for plan in PlanName::PRESETS {
            let p = SplitPlan::preset(plan, model.spec()).unwrap();
            let (edge, server) = partition(model, &p).unwrap();
            let manifest = splitlstm::split::SplitManifest::new(model, &p).unwrap();
            let handle = splitlstm::wire::Server::bind("127.0.0.1:0", server, manifest.clone())
                .unwrap()
                .spawn()
                .unwrap();
            let run = splitlstm::wire::run_edge(
                &edge,
                &manifest,
                windows.iter().map(Vec::as_slice),
                &handle.local_addr().to_string(),
                &Default::default(),
            );
            handle.shutdown();
            for (w, r) in windows.iter().zip(run.results) {
                match r {
                    Ok(z) if z == model.predict(w).unwrap() => identical += 1,
                    other => return outcome(false, format!("{plan} {:?}: {other:?}", model.dtype())),
                }
            }
        }
    }
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let round_trip = runner.run(&arb_frame(), |f| {
        let bytes = encode_frame(&f).unwrap();
        prop_assert_eq!(decode_frame(&bytes).unwrap(), f.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(bytes.len() as u64);
        let bit = rng.random_range(0..bytes.len() * 8);
        let mut bad = bytes.clone();
        bad[bit / 8] ^= 1 << (bit % 8);
        prop_assert!(decode_frame(&bad).is_err());
        Ok(())
    });
    // Exhaustive single-bit flips of one tensor frame.
    let z = student_q8.predict(&windows[0]).unwrap();
    let frame = encode_frame(&splitlstm::wire::tensor_frame(MsgType::Intermediate, &z).unwrap()).unwrap();
    let flips_rejected = (0..frame.len() * 8).all(|bit| {
        let mut bad = frame.clone();
        bad[bit / 8] ^= 1 << (bit % 8);
        decode_frame(&bad).is_err()
    });
    outcome(
        identical == 600 && round_trip.is_ok() && flips_rejected,
        format!(
            "{identical}/600 loopback predictions bit-identical; 1000-frame round trip {}; all {} single-bit flips rejected: {flips_rejected}",
            if round_trip.is_ok() { "ok" } else { "FAILED" },
            frame.len() * 8
        ),
    )
}

fn c6(dir: &Path) -> Outcome {
    let (_, student) = load_model(dir.join(pipeline::STUDENT_FILE)).unwrap();
    let (_, pruned) = load_model(dir.join(pipeline::PRUNED_FILE)).unwrap();
    let (_, q) = load_quantized(dir.join(pipeline::QUANTIZED_FILE)).unwrap();
    let n = student
        .arrays()
        .filter(|(r, _)| r.is_weight())
        .map(|(_, a)| a.len())
        .sum::<usize>();
    let expected = prune_count(n, 0.7) as f64 / n as f64;
    let achieved = weight_sparsity(&pruned);
    let mut preserved = true;
    for ((role, p), (_, c)) in pruned.arrays().zip(q.codes.arrays()) {
        for (v, code) in p.iter().zip(c) {
            // Biases are never pruned, so only kernel zeros are pinned.
            if role.is_weight() && *v == 0.0 {
                preserved &= *code == 0;
            }
        }
    }
    outcome(
        achieved == expected && preserved,
        format!(
            "sparsity {achieved} = {}/{n} (expected {expected}); zero pattern preserved in codes: {preserved}",
            (achieved * n as f64).round()
        ),
    )
}

fn c7() -> Outcome {
    let fmt = FixedPointFormat::default();
    let bound = 2f64.powi(-(fmt.fractional_bits() as i32) - 1);
    let (lo, hi) = (fmt.min_value(), fmt.max_value());
    let n = 100_000;
    let mut worst = 0.0f64;
    for i in 0..n {
        let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        worst = worst.max((dequantize(quantize_value(x, fmt), fmt) - x).abs());
    }
    let saturates = quantize_value(4.0, fmt) == 127
        && quantize_value(100.0, fmt) == 127
        && quantize_value(-4.0, fmt) == -128
        && quantize_value(-100.0, fmt) == -128;
    // x·32 = k + 0.5 exactly for every k in range.
    let halves_even = (-128i32..127).all(|k| {
        let x = (k as f64 + 0.5) / 32.0;
        let q = quantize_value(x, fmt) as i32;
        q % 2 == 0 && (q == k || q == k + 1)
    });
    let examples = quantize_value(0.1, fmt) == 3 && quantize_value(0.046875, fmt) == 2;
    outcome(
        worst <= bound && saturates && halves_even && examples,
        format!("max error {worst:.6} <= {bound} over {n} values; saturation {saturates}; ties to even {halves_even}"),
    )
}

fn c8(s: &PipelineSummary, secs: f64) -> Outcome {
    let t = s.teacher.final_metrics.r2;
    let st = s.student_eval.metrics.r2;
    let q = s.quantized_eval.metrics.r2;
    let checks = [
        (t >= 0.95, format!("teacher R2 {t:.4} >= 0.95")),
        (st >= 0.90, format!("student R2 {st:.4} >= 0.90")),
        ((t - st).abs() <= 0.05, format!("gap {:.4} <= 0.05", (t - st).abs())),
        (q >= 0.9 * st, format!("pruned q8 R2 {q:.4} >= {:.4}", 0.9 * st)),
    ];
    let detail = checks
        .iter()
        .map(|(ok, d)| format!("{d} [{}]", if *ok { "ok" } else { "no" }))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(checks.iter().all(|c| c.0), format!("{detail}; pipeline {secs:.0}s (target < 300s)"))
}

fn c9() -> Outcome {
    let f = Fixtures::bundled();
    let sc: Vec<u32> = PlanName::PRESETS
        .iter()
        .map(|&p| scalability_from_design(&f.variant(p).unwrap().utilization).unwrap())
        .collect();
    let example = scalability(
        &Resources::uniform(100.0),
        &Resources {
            bram: 50.0,
            dsp: 25.0,
            lut: 20.0,
            ff: 10.0,
        },
    )
    .unwrap();
    let res = (0.5f64..100.0, 0.5f64..100.0, 0.5f64..100.0, 0.5f64..100.0)
        .prop_map(|(bram, dsp, lut, ff)| Resources { bram, dsp, lut, ff });
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let invariant = runner.run(&(res.clone(), res, 1u32..64), |(t, p, k)| {
        let k = k as f64 / 4.0;
        let sc = |r: &Resources| Resources {
            bram: r.bram * k,
            dsp: r.dsp * k,
            lut: r.lut * k,
            ff: r.ff * k,
        };
        prop_assert_eq!(scalability(&t, &p).unwrap(), scalability(&sc(&t), &sc(&p)).unwrap());
        Ok(())
    });
    outcome(
        sc == [1, 1, 2] && example == 2 && invariant.is_ok(),
        format!("design SC {sc:?}; example {example}; scale invariance over 1000 cases {}", invariant.is_ok()),
    )
}

fn c10() -> Outcome {
    let s = build_student();
    let cfg = LatencyModelConfig::default();
    let est = |p: PlanName, c: &LatencyModelConfig| latency_estimate(&s, &SplitPlan::preset(p, &s).unwrap(), c).unwrap();
    let (a, b) = (est(PlanName::SplitA, &cfg), est(PlanName::SplitB, &cfg));
    let fast = LatencyModelConfig {
        clock_mhz: cfg.clock_mhz * 2.0,
        ..cfg
    };
    let halves = PlanName::PRESETS
        .iter()
        .all(|&p| (est(p, &fast) - est(p, &cfg) / 2.0).abs() <= 1e-12 * est(p, &cfg));
    outcome(
        b > a && halves,
        format!("Split-B {b:.2} us > Split-A {a:.2} us; doubling the clock halves every estimate: {halves}"),
    )
}

fn normalized(path: &Path, dir: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let name = path.file_name().unwrap().to_string_lossy();
    if name.ends_with(MANIFEST_SUFFIX) {
        let mut m = RunManifest::load(path).unwrap();
        // The loopback server binds an ephemeral port; the endpoint it
        // records is the one intended difference between runs.
        if let Some(e) = m.config.get_mut("endpoint") {
            *e = serde_json::Value::from("<endpoint>");
        }
        m.without_timestamp().unwrap().replace(&dir.display().to_string(), "<out>").into_bytes()
    } else if name.ends_with(".json") {
        String::from_utf8(bytes).unwrap().replace(&dir.display().to_string(), "<out>").into_bytes()
    } else {
        bytes
    }
}

fn c11(a: &Path, b: &Path) -> Outcome {
    let list = |d: &Path| -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), normalized(&p, d)))
            .collect()
    };
    let (la, lb) = (list(a), list(b));
    let differing: Vec<&String> = la.keys().filter(|k| la.get(*k) != lb.get(*k)).collect();
    let same_set = la.keys().eq(lb.keys());
    outcome(
        same_set && differing.is_empty(),
        format!(
            "{} artifacts compared (models, histories, predictions, reports byte for byte; manifests without timestamps); differing: {differing:?}",
            la.len()
        ),
    )
}

fn main() {
    let t0 = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "student arithmetic", c1()));
    results.push((2, "teacher reproduction", c2()));
    results.push((3, "gradient correctness", c3()));

    let run_a = tempfile::tempdir().unwrap();
    let run_b = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::new(42).unwrap();
    let t = Instant::now();
    let summary = pipeline::run_pipeline(run_a.path(), &cfg).expect("pipeline run");
    let pipeline_secs = t.elapsed().as_secs_f64();

    let mut m = RunManifest::new("acceptance", None, serde_json::Value::Null);
    let q8 = ModelSource::file(&summary.compress.quantized).load(&mut m).unwrap();
    let f32_student = ModelSource::file(&summary.student.model).load(&mut m).unwrap();
    results.push((4, "split composition", c4(&q8, &f32_student)));
    results.push((5, "wire fidelity", c5(&q8, &f32_student)));
    results.push((6, "pruning", c6(run_a.path())));
    results.push((7, "quantization", c7()));
    results.push((8, "end-to-end learning", c8(&summary, pipeline_secs)));
    results.push((9, "scalability", c9()));
    results.push((10, "latency model", c10()));
    pipeline::run_pipeline(run_b.path(), &cfg).expect("second pipeline run");
    results.push((11, "determinism", c11(run_a.path(), run_b.path())));

    let mut unexpected = Vec::new();
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} {name}: {}", o.detail);
        if !o.pass && !KNOWN_UNMET.contains(n) {
            unexpected.push(*n);
        }
    }
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!(
        "acceptance: {passed}/{} criteria pass ({:.0}s); known unmet: {KNOWN_UNMET:?}; unexpected failures: {unexpected:?}",
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    for n in KNOWN_UNMET {
        if results.iter().any(|r| r.0 == *n && r.2.pass) {
            println!("note: criterion {n} is listed as unmet but passed in this run");
        }
    }
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
