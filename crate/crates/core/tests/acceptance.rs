//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines are always shown.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use nest_core::cli::{self, Layout, RunConfig};
use nest_core::dynamics::{evolve_damped, evolve_first_order, kernel_flow, DampedConfig, Kernel};
use nest_core::eval::{latency_table, read_report, EVASIVE, NON_EVASIVE};
use nest_core::generator::{gen_benign, gen_dataset, gen_ransomware, FamilyProfile, FamilyTemplate};
use nest_core::model::{loss, loss_and_grad, select_threshold, Architecture, Checkpoint, ModelParams, TrainConfig};
use nest_core::preprocess::{
    apportion, denoise, normalize, normalize_value, stratified_split, NormalizationRange, Preprocessor, SourceStats,
    SplitSpec,
};
use nest_core::seed::rng_for;
use nest_core::statespace::{ActionCode, EncryptedState, Label, StateTrace};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// 1. Gradient against central finite differences.

fn gradient_batch() -> Vec<StateTrace> {
    let mut out = Vec::new();
    for i in 0..2u64 {
        let mut b = gen_benign(32, 8, 0.025, 500 + i).unwrap();
        b.id = format!("b{i}");
        out.push(b);
        let p = FamilyTemplate::builtin("conti")
            .unwrap()
            .sample_profile(32, 0, &mut rng_for(i, "profile", 0));
        let p = FamilyProfile { onset_window: 6, ..p };
        let mut r = gen_ransomware(&p, 32, 8, 0.025, 600 + i).unwrap();
        r.id = format!("r{i}");
        out.push(r);
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let batch = gradient_batch();
    let cfg = TrainConfig {
        alpha: 0.3,
        beta: 1.0,
        weight_decay: 1e-3,
        ..TrainConfig::default()
    };
    let arch = Architecture::new(8, 5, 3, 8).unwrap();
    let h = 1e-5;
    let (points, per_point) = (5, 24);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for point in 0..points {
        let params = ModelParams::random(arch, 0.4, &mut rng_for(77, "point", point));
        let (_, grad) = loss_and_grad(&batch, &params, &cfg).unwrap();
        let mut rng = rng_for(77, "coordinate", point);
        for _ in 0..per_point {
            let i = rng.random_range(0..params.len());
            let mut plus = params.clone();
            plus.values[i] += h;
            let mut minus = params.clone();
            minus.values[i] -= h;
            let fd = (loss(&batch, &plus, &cfg).unwrap().total - loss(&batch, &minus, &cfg).unwrap().total) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && checked >= 100 && secs < 30.0,
        format!("{checked} coordinates over {points} points, max relative error {worst:.2e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// 2. Dynamics against closed forms.

fn criterion_2() -> Outcome {
    let start = Instant::now();
    // (a) underdamped oscillator
    let (lambda, omega) = (0.5f64, 1.0f64);
    let cfg = DampedConfig {
        lambda,
        dt: 1e-3,
        steps: 10_000,
    };
    let traj = evolve_damped(&[1.0], &[0.0], |s| vec![omega * omega * s[0]], &cfg).unwrap();
    let wd = (omega * omega - lambda * lambda / 4.0).sqrt();
    let t = 10.0;
    let exact = (-lambda * t / 2.0).exp() * ((wd * t).cos() + lambda / (2.0 * wd) * (wd * t).sin());
    let err_a = (traj.positions[10_000][0] - exact).abs();

    // (b) undamped energy drift
    let cfg = DampedConfig {
        lambda: 0.0,
        dt: 1e-3,
        steps: 10_000,
    };
    let traj = evolve_damped(&[1.0], &[0.0], |s| vec![s[0]], &cfg).unwrap();
    let e0 = 0.5;
    let drift = traj
        .positions
        .iter()
        .zip(&traj.velocities)
        .map(|(s, v)| (0.5 * v[0] * v[0] + 0.5 * s[0] * s[0] - e0).abs())
        .fold(0.0, f64::max);

    // (c) RK4 order on exponential decay
    let decay = |dt: f64| {
        let steps = (1.0 / dt).round() as usize;
        let tr = evolve_first_order(&[1.0], &[()], |s, _| vec![-s[0]], dt, steps).unwrap();
        (tr[steps][0] - (-1.0f64).exp()).abs()
    };
    let errs: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|dt| decay(*dt)).collect();
    let order = errs.windows(2).map(|w| (w[0] / w[1]).log2()).fold(f64::INFINITY, f64::min);
    let fine = decay(1e-3);

    let secs = start.elapsed().as_secs_f64();
    outcome(
        err_a < 1e-3 && drift < 1e-3 && order >= 3.8 && fine < 1e-6 && secs < 10.0,
        format!(
            "damped error {err_a:.2e}, energy drift {drift:.2e}, RK4 order {order:.3}, s(1) error {fine:.1e}, {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Kernel flow identities.

fn criterion_3() -> Outcome {
    let ramp_ok = (2..64).all(|d| {
        let ramp: Vec<f64> = (0..d).map(|j| j as f64).collect();
        kernel_flow(&ramp, &Kernel::identity()).unwrap().iter().all(|v| *v == 1.0)
    });
    let mut rng = rng_for(3, "kernel", 0);
    let cases = 2000;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let d = rng.random_range(2..24);
        let k = 2 * rng.random_range(0..5) + 1;
        let kernel = Kernel::new((0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let (a, b): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let mix: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
        let lhs = kernel_flow(&mix, &kernel).unwrap();
        let fx = kernel_flow(&x, &kernel).unwrap();
        let fy = kernel_flow(&y, &kernel).unwrap();
        for j in 0..d {
            worst = worst.max((lhs[j] - (a * fx[j] + b * fy[j])).abs());
        }
    }
    outcome(
        ramp_ok && worst <= 1e-12,
        format!("ramp exact: {ramp_ok}, linearity over {cases} cases max deviation {worst:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Preprocessing rules.

fn trace_of(values: &[Vec<f64>], family: &str, id: String, order: u64) -> StateTrace {
    let states: Vec<EncryptedState> = values.iter().cloned().map(EncryptedState).collect();
    let label = if family == "benign" { Label::Benign } else { Label::Ransomware };
    let mut t = StateTrace::from_states(id, label, family, 0.025, &states, vec![ActionCode(0); values.len() - 1]).unwrap();
    t.order = order;
    t
}

fn criterion_4() -> Outcome {
    let mut rng = rng_for(4, "prep", 0);
    let mut failures = Vec::new();

    // normalization rules on fuzzed ranges
    for _ in 0..500 {
        let range = NormalizationRange::new(rng.random_range(-3.0..0.0), rng.random_range(0.1..3.0)).unwrap();
        let min: f64 = rng.random_range(-100.0..100.0);
        let max = min + rng.random_range(1e-3..50.0);
        if normalize_value(min, min, max, range) != range.lo || normalize_value(max, min, max, range) != range.hi {
            failures.push("endpoint");
        }
        if normalize_value(rng.random_range(-1e3..1e3), min, min, range) != range.midpoint() {
            failures.push("degenerate");
        }
        if normalize_value(max + rng.random_range(1e-6..1e3), min, max, range) != range.hi
            || normalize_value(min - rng.random_range(1e-6..1e3), min, max, range) != range.lo
        {
            failures.push("clipping");
        }
    }
    let t = trace_of(&[vec![0.0, 5.0], vec![10.0, 5.0]], "benign", "n".into(), 0);
    let stats = SourceStats::compute([&t], "train").unwrap();
    let n = normalize(&t, NormalizationRange::SYMMETRIC, Some(&stats)).unwrap();
    if n.states != vec![-1.0, 0.0, 1.0, 0.0] {
        failures.push("normalize trace");
    }

    // split partition and proportionality
    let compositions = 150;
    for c in 0..compositions {
        let mut traces = Vec::new();
        let families = rng.random_range(1..6);
        let mut sizes = Vec::new();
        for f in 0..families {
            let n = rng.random_range(3..60);
            sizes.push(n);
            for i in 0..n {
                traces.push(trace_of(&[vec![i as f64], vec![0.0]], &format!("f{f}"), format!("c{c}f{f}i{i}"), rng.random()));
            }
        }
        let (a, b, z): (f64, f64, f64) = (rng.random_range(1.0..10.0), rng.random_range(1.0..10.0), rng.random_range(1.0..10.0));
        let s = a + b + z;
        let ratios = [a / s, b / s, 1.0 - a / s - b / s];
        let spec = SplitSpec { ratios, seed: c };
        let splits = stratified_split(&traces, &spec).unwrap();
        let mut ids: Vec<&str> = splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .map(|t| t.id.as_str())
            .collect();
        ids.sort();
        let before = ids.len();
        ids.dedup();
        if before != traces.len() || ids.len() != traces.len() {
            failures.push("partition");
        }
        for (f, &n) in sizes.iter().enumerate() {
            let fam = format!("f{f}");
            for (k, part) in [&splits.train, &splits.val, &splits.test].into_iter().enumerate() {
                let got = part.iter().filter(|t| t.family == fam).count();
                if (got as f64 - ratios[k] * n as f64).abs() > 1.0 {
                    failures.push("proportionality");
                }
            }
            if apportion(n, &ratios).iter().sum::<usize>() != n {
                failures.push("apportion");
            }
        }
    }

    // denoise
    for _ in 0..200 {
        let len = rng.random_range(3..80);
        let d = rng.random_range(1..5);
        let values: Vec<Vec<f64>> = (0..len).map(|_| (0..d).map(|_| rng.random_range(-20.0..20.0)).collect()).collect();
        let t = trace_of(&values, "benign", "d".into(), 0);
        if denoise(&t, 1).unwrap() != t {
            failures.push("denoise identity");
        }
        let w = 2 * rng.random_range(1..((len + 1) / 2)) - 1;
        let out = denoise(&t, w.max(1)).unwrap();
        for j in 0..d {
            let ch: Vec<f64> = t.channel(j).collect();
            let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if out.channel(j).any(|v| v < lo || v > hi) {
                failures.push("envelope");
            }
        }
    }

    failures.sort();
    failures.dedup();
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("normalization rules exact, {compositions} split compositions proportional, denoise identity and envelope hold")
        } else {
            format!("violations: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------
// 5. Threshold against a brute-force Youden search.

fn brute_force_youden(scores: &[f64], positive: &[bool]) -> f64 {
    let p = positive.iter().filter(|y| **y).count() as f64;
    let n = positive.len() as f64 - p;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(i128, f64)> = None;
    for w in sorted.windows(2) {
        let tau = w[0] + (w[1] - w[0]) / 2.0;
        let tp = scores.iter().zip(positive).filter(|(s, y)| **y && **s > tau).count() as f64;
        let fp = scores.iter().zip(positive).filter(|(s, y)| !**y && **s > tau).count() as f64;
        // integer form of tp/P - fp/N
        let j = (tp * n - fp * p) as i128;
        if best.is_none_or(|(bj, bt)| j > bj || (j == bj && tau < bt)) {
            best = Some((j, tau));
        }
    }
    best.unwrap().1
}

fn criterion_5() -> Outcome {
    let mut rng: ChaCha8Rng = rng_for(5, "threshold", 0);
    let sets = 2000;
    let mut mismatches = 0;
    for _ in 0..sets {
        let n = rng.random_range(2..60);
        let coarse = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { rng.random_range(0..10) as f64 / 10.0 } else { rng.random() })
            .collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        positive[0] = true;
        positive[1] = false;
        let t = select_threshold(&scores, &positive, "fuzz").unwrap();
        if t.tau != brute_force_youden(&scores, &positive) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{sets} fuzzed score sets, {mismatches} mismatches"))
}

// ---------------------------------------------------------------------------
// Pipeline helpers.

fn run_pipeline(out: &Path) -> f64 {
    let start = Instant::now();
    for cmd in ["gen", "prep", "train", "eval", "report"] {
        let code = cli::run(["nest", "--out", out.to_str().unwrap(), cmd]);
        assert_eq!(code, 0, "nest {cmd} exited with {code}");
    }
    start.elapsed().as_secs_f64()
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 6. End-to-end trends.

fn criterion_6(out: &Path, secs: f64) -> Outcome {
    let r = read_report(&Layout::new(out).report()).unwrap();
    let (nest, base) = (&r.nest, &r.baseline);
    let acc_gap = nest.metrics.accuracy - base.metrics.accuracy;
    let a = acc_gap >= 0.05;

    let gap = |k: &str| nest.families[k] - base.families[k];
    let (ev, nonev) = (gap(EVASIVE), gap(NON_EVASIVE));
    let b = ev > nonev;

    let first = |m: &nest_core::eval::ModelReport| m.sweep.first().unwrap().accuracy;
    let last = |m: &nest_core::eval::ModelReport| m.sweep.last().unwrap().accuracy;
    let base_drop = first(base) - last(base);
    let accs: Vec<f64> = nest.sweep.iter().map(|p| p.accuracy).collect();
    let nest_spread = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let c = base_drop >= 0.05 && nest_spread < 0.05;

    let worst_unseen = nest
        .unseen
        .values()
        .map(|v| (v - nest.metrics.accuracy).abs())
        .fold(0.0, f64::max);
    let d = !nest.unseen.is_empty() && worst_unseen <= 0.10;

    outcome(
        a && b && c && d && secs < 300.0,
        format!(
            "(a) accuracy nest {:.3} vs baseline {:.3} [{}]; (b) evasive gap {ev:.3} vs non-evasive {nonev:.3} [{}]; \
             (c) baseline drop {base_drop:.3}, nest spread {nest_spread:.3} [{}]; (d) max unseen deviation {worst_unseen:.3} [{}]; \
             pipeline {secs:.1}s",
            nest.metrics.accuracy,
            base.metrics.accuracy,
            ok(a),
            ok(b),
            ok(c),
            ok(d)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

// ---------------------------------------------------------------------------
// 7. Determinism.

fn criterion_7(first: &Path, second: &Path) -> Outcome {
    let a = files_under(first);
    let b = files_under(second);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let required = ["data/manifest.json", "model/checkpoint.json", "report/metrics.csv", "report/sweep.csv"];
    let present = required.iter().all(|f| a.contains_key(Path::new(f)));
    outcome(
        differing.is_empty() && present,
        if differing.is_empty() {
            format!("{} files byte-identical across two runs", a.len())
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------
// 8. Latency under a later onset.

fn test_split_latency(cfg: &RunConfig, shift: usize, ckpt: &Checkpoint) -> BTreeMap<String, Option<f64>> {
    let spec = nest_core::generator::CompositionSpec {
        onset_shift: shift,
        ..cfg.composition()
    };
    let ds = gen_dataset(&spec).unwrap();
    let splits = stratified_split(&ds.traces, &cfg.split_spec()).unwrap();
    let pre = Preprocessor::from_sidecar(&ckpt.stats);
    let test: Vec<StateTrace> = splits.test.iter().map(|t| pre.apply(t).unwrap()).collect();
    let params = ckpt.model_params().unwrap();
    let e = &cfg.eval;
    latency_table(&test, &params, ckpt.threshold.tau, e.stride, e.persistence)
        .unwrap()
        .into_iter()
        .map(|row| (row.family, row.median_s))
        .collect()
}

fn criterion_8(out: &Path) -> Outcome {
    let cfg = RunConfig::default();
    let ckpt = Checkpoint::read(&Layout::new(out).checkpoint()).unwrap();
    let base = test_split_latency(&cfg, 0, &ckpt);
    let shifted = test_split_latency(&cfg, 64, &ckpt);
    let mut parts = Vec::new();
    let mut pass = !base.is_empty();
    for (family, m0) in &base {
        let m1 = shifted.get(family).copied().flatten();
        let fine = match (m0, m1) {
            (Some(a), Some(b)) => b >= *a,
            // undetected after the shift counts as infinitely late
            (_, None) => true,
            (None, Some(_)) => false,
        };
        pass &= fine;
        let show = |m: Option<f64>| m.map_or("none".to_string(), |v| format!("{v:.2}s"));
        parts.push(format!("{family} {} -> {}", show(*m0), show(m1)));
    }
    outcome(pass, parts.join(", "))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and friends: nothing to enumerate
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "gradient vs finite differences", criterion_1()));
    results.push((2, "dynamics oracles", criterion_2()));
    results.push((3, "kernel flow identities", criterion_3()));
    results.push((4, "preprocessing properties", criterion_4()));
    results.push((5, "threshold vs brute force", criterion_5()));

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("run-a");
    let second = dir.path().join("run-b");
    let secs = run_pipeline(&first);
    results.push((6, "end-to-end trends", criterion_6(&first, secs)));
    run_pipeline(&second);
    results.push((7, "determinism", criterion_7(&first, &second)));
    results.push((8, "latency under later onset", criterion_8(&first)));

    println!();
    println!("acceptance summary");
    for (n, name, o) in &results {
        println!("criterion {n} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
