//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs with its own harness so the report is always shown.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use sparsetrain::controller::DEFAULT_R_MIN;
use sparsetrain::data::{self, CifarRecord, RECORD_BYTES};
use sparsetrain::experiment::{run_experiment, MetricsTable};
use sparsetrain::layers::{topk_forward, RMSNORM_EPS};
use sparsetrain::{
    ControllerState, CosineSchedule, ExperimentConfig, Graph, ModelSpec, ParamStore, Policy, SgdNesterov,
    StrategyKind, Tensor, WideResNet,
};

use common::{cifar, gradcheck, keep, random_tensor, rng, sort_oracle, spaced_values, tied_values, weighted_sum};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn topk_oracle_equivalence() -> Outcome {
    let mut rng = rng(11);
    let ratios = [0.01, 0.1, 0.5, 0.9, 1.0];
    let mut compared = 0usize;
    for case in 0..1000 {
        let (n, c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=9), rng.random_range(1..=9));
        let d = c * h * w;
        let x = tied_values(&mut rng, n * d);
        for &r in &ratios {
            let mut out = vec![0.0; x.len()];
            topk_forward(&x, d, keep(r), &mut out);
            let want = sort_oracle(&x, d, r);
            ensure(out == want, || format!("case {case} shape [{n},{c},{h},{w}] r={r}: mismatch"))?;
            compared += out.len();
        }
    }
    Ok(format!("1000 tensors x 5 ratios, {compared} values identical"))
}

fn topk_identity() -> Outcome {
    let mut rng = rng(12);
    for case in 0..100 {
        let d = rng.random_range(1..=300);
        let n = rng.random_range(1..=4);
        let mut x = tied_values(&mut rng, n * d);
        x.iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3));
        let mut out = vec![0.0; x.len()];
        topk_forward(&x, d, keep(1.0), &mut out);
        let relu: Vec<u64> = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }.to_bits()).collect();
        let got: Vec<u64> = out.iter().map(|v| v.to_bits()).collect();
        ensure(got == relu, || format!("case {case}: r=1 differs from relu"))?;
    }
    Ok("100 tensors bitwise equal to relu".into())
}

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn gradient_checks() -> Outcome {
    let mut rng = rng(13);
    let mut lines = Vec::new();
    let mut check = |name: &str, probes: Vec<common::Probe>| -> Result<(), String> {
        let worst = probes.iter().map(|p| p.rel_err()).fold(0.0, f64::max);
        ensure(probes.len() >= 50, || format!("{name}: only {} coordinates", probes.len()))?;
        ensure(worst <= GRAD_TOL, || {
            let p = probes.iter().max_by(|a, b| a.rel_err().total_cmp(&b.rel_err())).unwrap();
            format!("{name}: rel err {worst:.2e} at input {} index {} ({} vs {})", p.input, p.index, p.analytic, p.numeric)
        })?;
        lines.push(format!("{name} {}@{worst:.1e}", probes.len()));
        Ok(())
    };

    for (stride, padding) in [(1, 1), (2, 1), (1, 0)] {
        let x = random_tensor(&mut rng, &[2, 3, 7, 7], 1.0);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3], 0.5);
        let probes = gradcheck(
            &[x, w],
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride, padding)?;
                weighted_sum(g, y, 1)
            },
            50,
            H,
            2,
        );
        check(&format!("conv2d(s{stride},p{padding})"), probes)?;
    }

    let inputs = [random_tensor(&mut rng, &[5, 8], 1.0), random_tensor(&mut rng, &[6, 8], 0.5), random_tensor(&mut rng, &[6], 0.5)];
    let probes = gradcheck(
        &inputs,
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weighted_sum(g, y, 3)
        },
        50,
        H,
        4,
    );
    check("linear", probes)?;

    let mut scale = random_tensor(&mut rng, &[4], 0.5);
    scale.data_mut().iter_mut().for_each(|s| *s += 1.0);
    let inputs = [random_tensor(&mut rng, &[2, 4, 3, 3], 1.0), scale, random_tensor(&mut rng, &[4], 0.5)];
    let probes = gradcheck(
        &inputs,
        |g, v| {
            let y = g.rmsnorm(v[0], v[1], v[2], RMSNORM_EPS)?;
            weighted_sum(g, y, 5)
        },
        50,
        H,
        6,
    );
    check("rmsnorm", probes)?;

    let probes = gradcheck(
        &[random_tensor(&mut rng, &[3, 5, 4, 4], 1.0)],
        |g, v| {
            let y = g.global_avg_pool(v[0])?;
            weighted_sum(g, y, 7)
        },
        50,
        H,
        8,
    );
    check("global_avg_pool", probes)?;

    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..10)).collect();
    let probes = gradcheck(&[random_tensor(&mut rng, &[6, 10], 3.0)], |g, v| g.softmax_cross_entropy(v[0], &labels), 60, H, 9);
    check("softmax_cross_entropy", probes)?;

    for r in [0.1, 0.3, 0.7] {
        let x = Tensor::new(&[2, 3, 5, 5], spaced_values(&mut rng, 150, 2e-3)).unwrap();
        let probes = gradcheck(
            &[x],
            |g, v| {
                let (y, _) = g.sparse_topk(v[0], keep(r))?;
                weighted_sum(g, y, 10)
            },
            60,
            H,
            11,
        );
        check(&format!("topk(r={r})"), probes)?;
    }
    Ok(lines.join(", "))
}

fn rmsnorm_analytic() -> Outcome {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap());
    let s = g.leaf(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
    let b = g.leaf(Tensor::zeros(&[2]));
    let y = g.rmsnorm(x, s, b, RMSNORM_EPS).map_err(|e| e.to_string())?;
    let got = g.value(y).data().to_vec();
    let want = [0.848528, 1.131371];
    for (a, w) in got.iter().zip(want) {
        ensure((a - w).abs() <= 1e-5, || format!("got {got:?}, want {want:?}"))?;
    }
    Ok(format!("[3,4] -> [{:.6}, {:.6}]", got[0], got[1]))
}

fn run_trace(policy: Policy, trace: &[f64]) -> Vec<f64> {
    let mut c = ControllerState::new(policy, DEFAULT_R_MIN).unwrap();
    trace.iter().map(|&a| c.step(a).unwrap().r).collect()
}

fn random_trace(rng: &mut rand_chacha::ChaCha8Rng, len: usize) -> Vec<f64> {
    let sigma = 10f64.powf(rng.random_range(-4.0..-1.0));
    let drop_p = rng.random_range(0.0..0.05);
    let mut a: f64 = rng.random_range(0.0..1.0);
    (0..len)
        .map(|_| {
            a += rng.random_range(-sigma..sigma);
            if rng.random_bool(drop_p) {
                a -= rng.random_range(0.0..0.6);
            }
            a = a.clamp(0.0, 1.0);
            a
        })
        .collect()
}

fn controller_suite() -> Outcome {
    let close = |got: &[f64], want: &[f64]| got.len() == want.len() && got.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-12);

    let r = run_trace(Policy::ADDITIVE, &[0.5, 0.6, 0.3]);
    ensure(close(&r, &[0.99, 0.98, 1.0]), || format!("additive hand trace gave {r:?}"))?;
    let mut c = ControllerState::new(Policy::ADDITIVE, DEFAULT_R_MIN).unwrap();
    let s: Vec<f64> = [0.5, 0.6, 0.3].iter().map(|&a| c.step(a).unwrap().smoothed.unwrap()).collect();
    ensure(close(&s, &[0.5, 0.51, 0.489]), || format!("additive smoothed {s:?}"))?;

    let r = run_trace(Policy::MULTIPLICATIVE, &[0.9, 0.9, 0.4]);
    ensure(close(&r, &[0.98, 0.9604, 1.0]), || format!("multiplicative hand trace gave {r:?}"))?;
    let mut c = ControllerState::new(Policy::MULTIPLICATIVE, DEFAULT_R_MIN).unwrap();
    let s: Vec<f64> = [0.9, 0.9, 0.4].iter().map(|&a| c.step(a).unwrap().smoothed.unwrap()).collect();
    ensure(close(&s, &[0.9, 0.9, 0.65]), || format!("multiplicative smoothed {s:?}"))?;

    let mut rng = rng(14);
    let mut resets = 0usize;
    for t in 0..10_000 {
        let trace = random_trace(&mut rng, 600);
        for policy in [Policy::ADDITIVE, Policy::MULTIPLICATIVE] {
            let mut c = ControllerState::new(policy, DEFAULT_R_MIN).unwrap();
            ensure(c.r() == 1.0, || "controller must start at r = 1".into())?;
            let mut prev_r = c.r();
            let mut prev_best = f64::NEG_INFINITY;
            let (beta, mut closed) = match policy {
                Policy::Additive { ema_factor, .. } | Policy::Multiplicative { ema_factor, .. } => (ema_factor, 0.0),
                Policy::Dense => unreachable!(),
            };
            for (i, &a) in trace.iter().enumerate() {
                let out = c.step(a).unwrap();
                let r = out.r;
                ensure((DEFAULT_R_MIN..=1.0).contains(&r), || format!("trace {t} epoch {i}: r={r} out of range"))?;
                if out.reset {
                    resets += 1;
                    ensure(r == 1.0, || format!("trace {t} epoch {i}: reset left r={r}"))?;
                } else {
                    ensure(r < prev_r || (r == DEFAULT_R_MIN && prev_r == DEFAULT_R_MIN), || {
                        format!("trace {t} epoch {i}: r went {prev_r} -> {r} without a reset")
                    })?;
                }
                // Closed form: s_t = β^t a_0 + Σ_{j≥1} (1-β) β^{t-j} a_j.
                closed = if i == 0 { a } else { beta * closed + (1.0 - beta) * a };
                if t < 100 {
                    let direct: f64 = beta.powi(i as i32) * trace[0]
                        + (1..=i).map(|j| (1.0 - beta) * beta.powi((i - j) as i32) * trace[j]).sum::<f64>();
                    let s = out.smoothed.unwrap();
                    ensure((s - direct).abs() <= 1e-12 && (closed - direct).abs() <= 1e-12, || {
                        format!("trace {t} epoch {i}: smoothed {s} vs closed form {direct}")
                    })?;
                }
                if let Policy::Multiplicative { .. } = policy {
                    let best = c.best_smoothed().unwrap();
                    ensure(best >= prev_best, || format!("trace {t} epoch {i}: best fell {prev_best} -> {best}"))?;
                    prev_best = best;
                }
                prev_r = r;
            }
        }
    }

    // Three separated dips in an otherwise flat trace.
    let mut trace = vec![0.8; 120];
    for dip in [30, 60, 90] {
        trace[dip] = 0.5;
    }
    let mut c = ControllerState::new(Policy::ADDITIVE, DEFAULT_R_MIN).unwrap();
    let mut series = vec![1.0];
    series.extend(trace.iter().map(|&a| c.step(a).unwrap().r));
    let ascents = series.windows(2).filter(|w| w[0] < 1.0 && w[1] == 1.0).count();
    ensure(ascents == 3 && c.reset_count() == 3, || format!("engineered trace: {ascents} ascents, {} resets", c.reset_count()))?;

    Ok(format!("hand traces exact; 10000 traces x 600 epochs x 2 strategies ({resets} resets); EMA closed form; 3 ascents"))
}

fn schedule() -> Outcome {
    let s = CosineSchedule::new(0.1, 500).map_err(|e| e.to_string())?;
    let at = |t| s.lr_at(t).unwrap();
    for (t, want) in [(0, 0.1), (250, 0.05), (500, 0.0)] {
        ensure((at(t) - want).abs() <= 1e-12, || format!("lr_at({t}) = {}", at(t)))?;
    }
    ensure((0..500).all(|t| at(t + 1) <= at(t)), || "schedule increases somewhere".into())?;
    ensure(s.lr_at(501).is_err(), || "lr_at(501) should be a usage error".into())?;
    Ok(format!("lr_at(0)={}, lr_at(250)={:.12}, lr_at(500)={:.1e}, monotone", at(0), at(250), at(500)))
}

fn nesterov_hand_step() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::new(&[1], vec![1.0]).unwrap());
    store.get_mut(id).accumulate_grad(&[0.5]).unwrap();
    let mut opt = SgdNesterov::new(&store, 0.9).unwrap();
    opt.step(&mut store, 0.1).unwrap();
    let (p, v) = (store.get(id).data()[0], opt.velocity(0)[0]);
    ensure((p - 0.905).abs() <= 1e-12 && (v - 0.5).abs() <= 1e-12, || format!("p={p}, v={v}"))?;
    Ok(format!("p={p}, v={v}"))
}

fn data_roundtrip() -> Outcome {
    let source = cifar();
    let mut records = 0;
    for path in data::cifar_files(&source.dir) {
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        for (i, chunk) in bytes.chunks(RECORD_BYTES).enumerate() {
            let back = CifarRecord::parse(chunk).map_err(|e| e.to_string())?.to_bytes();
            ensure(back == chunk, || format!("{}: record {i} does not round-trip", path.display()))?;
            records += 1;
        }
    }
    ensure(records == 60_000, || format!("{records} records, expected 60000"))?;
    let (lo, hi) = (data::normalize_pixel(0, 0), data::normalize_pixel(255, 0));
    ensure((lo + 1.98947).abs() <= 1e-4 && (hi - 2.05911).abs() <= 1e-4, || format!("spot values {lo}, {hi}"))?;
    Ok(format!("{records} records round-trip ({}); R(0)={lo:.5}, R(255)={hi:.5}", source.label()))
}

fn desk_config(strategy: StrategyKind, epochs: usize, subset: usize, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        strategy,
        epochs,
        model: ModelSpec::wrn(10, 1),
        data_dir: cifar().dir.clone(),
        metrics_path: out.join(format!("{strategy}.csv")),
        checkpoint_path: Some(out.join(format!("{strategy}.ckpt"))),
        subset: Some(subset),
        ..ExperimentConfig::default()
    }
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for dir in &dirs {
        let config = desk_config(StrategyKind::Multiplicative, 3, 2000, dir.path());
        run_experiment::<f32>(&config).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&config.metrics_path).map_err(|e| e.to_string())?);
    }
    ensure(files[0] == files[1], || "metrics files differ".into())?;
    Ok(format!("WRN-10-1, 2000 images, 3 epochs, seed 3407: {} identical bytes ({})", files[0].len(), cifar().label()))
}

/// Structural checks every desk-scale metrics file must pass.
fn validate_csv(path: &Path, epochs: usize, sites: usize) -> Result<MetricsTable, String> {
    let table = MetricsTable::read(path).map_err(|e| e.to_string())?;
    let schedule = CosineSchedule::new(0.1, epochs).unwrap();
    ensure(table.records.len() == epochs, || format!("{} rows, expected {epochs}", table.records.len()))?;
    ensure(table.summary.is_some(), || "missing summary line".into())?;
    for (i, rec) in table.records.iter().enumerate() {
        ensure(rec.epoch == i, || format!("row {i} has epoch {}", rec.epoch))?;
        ensure(rec.lr == schedule.lr_at(i).unwrap(), || format!("row {i}: lr {} off schedule", rec.lr))?;
        let fractions = [rec.train_accuracy, rec.test_accuracy, rec.mean_nonzero_rate];
        ensure(fractions.iter().all(|v| (0.0..=1.0).contains(v)), || format!("row {i}: fraction out of range"))?;
        ensure(rec.site_nonzero_rates.len() == sites, || format!("row {i}: {} site rates", rec.site_nonzero_rates.len()))?;
        ensure(rec.keep_ratio > 0.0 && rec.keep_ratio <= 1.0, || format!("row {i}: r={}", rec.keep_ratio))?;
        if rec.reset {
            if let Some(next) = table.records.get(i + 1) {
                ensure(next.keep_ratio == 1.0, || format!("row {i} reset but next r={}", next.keep_ratio))?;
            }
        }
    }
    Ok(table)
}

/// Longest run of rows with strictly decreasing r and no reset in between.
fn longest_compression_phase(table: &MetricsTable) -> usize {
    let (mut best, mut current) = (0, 0);
    for w in table.records.windows(2) {
        if !w[0].reset && w[1].keep_ratio < w[0].keep_ratio {
            current += 1;
            best = best.max(current);
        } else {
            current = 0;
        }
    }
    best
}

fn learning_smoke() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    let dense = desk_config(StrategyKind::Dense, 15, 5000, dir.path());
    let outcome = run_experiment::<f32>(&dense).map_err(|e| e.to_string())?;
    validate_csv(&dense.metrics_path, 15, 7)?;
    let acc = outcome.summary.best_test_accuracy;
    ensure(acc >= 0.30, || format!("dense best test accuracy {acc:.4} < 0.30"))?;
    parts.push(format!("dense best test_acc={acc:.4} (final {:.4})", outcome.summary.final_test_accuracy));

    for strategy in [StrategyKind::Additive, StrategyKind::Multiplicative] {
        let config = desk_config(strategy, 15, 5000, dir.path());
        let outcome = run_experiment::<f32>(&config).map_err(|e| e.to_string())?;
        let table = validate_csv(&config.metrics_path, 15, 7)?;
        let phase = longest_compression_phase(&table);
        ensure(phase >= 1, || format!("{strategy}: no reset-free compression phase"))?;
        let last = table.records.last().unwrap();
        parts.push(format!(
            "{strategy} test_acc={:.4} final r={} resets={} phase={phase}",
            outcome.summary.final_test_accuracy, last.keep_ratio, outcome.resets
        ));
    }
    Ok(format!("{} [{}]", parts.join("; "), cifar().label()))
}

fn site_counts() -> Outcome {
    let big = WideResNet::<f32>::build(ModelSpec::wrn(28, 4), 0).map_err(|e| e.to_string())?.count_sparsity_sites();
    let small = WideResNet::<f32>::build(ModelSpec::wrn(10, 1), 0).map_err(|e| e.to_string())?.count_sparsity_sites();
    ensure(big == 25 && small == 7, || format!("WRN-28-4: {big}, WRN-10-1: {small}"))?;
    Ok(format!("WRN-28-4: {big}, WRN-10-1: {small}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 11] = [
        ("top-k oracle equivalence", topk_oracle_equivalence, Duration::from_secs(60)),
        ("top-k identity at r=1", topk_identity, Duration::from_secs(60)),
        ("gradient checks", gradient_checks, Duration::from_secs(300)),
        ("rmsnorm analytic case", rmsnorm_analytic, Duration::from_secs(60)),
        ("controller traces and properties", controller_suite, Duration::from_secs(60)),
        ("cosine schedule", schedule, Duration::from_secs(60)),
        ("nesterov hand step", nesterov_hand_step, Duration::from_secs(60)),
        ("data round-trip and normalization", data_roundtrip, Duration::from_secs(60)),
        ("determinism", determinism, Duration::from_secs(1200)),
        ("learning smoke test", learning_smoke, Duration::from_secs(7200)),
        ("sparsity-site count", site_counts, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();

    // Fixture generation (synthetic corpus, if needed) is not charged to any criterion.
    let _ = cifar();
    let mut failures = 0;
    for (name, run, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = started.elapsed();
        let outcome = outcome.and_then(|detail| {
            ensure(elapsed <= budget, || format!("took {:.0}s, budget {}s", elapsed.as_secs_f64(), budget.as_secs()))?;
            Ok(detail)
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} ({:.1}s)", elapsed.as_secs_f64()),
            Err(why) => {
                failures += 1;
                println!("FAIL  {name}: {why} ({:.1}s)", elapsed.as_secs_f64());
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
