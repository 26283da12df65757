//! Acceptance run: every criterion is evaluated and reported on its own
//! line, followed by a summary line listing the failures.
//!
//! `METACL_ACCEPTANCE=1,4` restricts the run to the listed criteria.
//! `METACL_ACCEPTANCE_STRICT=1` makes the process exit non-zero when any
//! criterion fails; by default the run only reports, so that a failing
//! criterion does not stop cargo from running the remaining test targets.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::gradcheck::{check_elbo, check_op, op_cases, TOLERANCE};
use common::oracles::{brute_avg_accuracy, brute_avg_forgetting, kl_monte_carlo, random_gaussian_pair, random_matrix};
use metacl::bench::config::ExperimentConfig;
use metacl::bench::data::ImageShape;
use metacl::bench::metrics::AccuracyMatrix;
use metacl::codec::{self, chunk, decode_checkpoint, encode_checkpoint, unchunk, WeightVector, DEFAULT_CHUNK_SIZE};
use metacl::gan::{evaluate, recalibrate_batch_norm, train_base, Architecture, GanTrainConfig, ModelParams, NamedTensors};
use metacl::hypernet::{kl_gaussians, sample_model, Gaussian, TaskDescriptor};
use metacl::rng::RngStream;
use metacl::runtime::experiment::STATE_FILE;
use metacl::runtime::{fine_tune, run_experiment, write_results, ExperimentState, Method};

const SEEDS: u64 = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let root = RngStream::new(2024);
    let mut worst: (f64, &str) = (0.0, "");
    for case in op_cases() {
        for i in 0..20 {
            let e = check_op(&case, &mut root.derive_str(case.name).child("instance", i));
            if e > worst.0 {
                worst = (e, case.name);
            }
        }
    }
    for i in 0..20 {
        let e = check_elbo(&mut RngStream::new(7).child("elbo", i));
        if e > worst.0 {
            worst = (e, "elbo");
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.0 < TOLERANCE && elapsed < Duration::from_secs(60),
        format!("worst relative error {:.2e} ({}), {:.1}s", worst.0, worst.1, elapsed.as_secs_f64()),
    )
}

fn kl_oracle() -> Verdict {
    let root = RngStream::new(99);
    let mut worst: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for i in 0..50 {
        let mut rng = root.child("pair", i);
        let ((qm, ql), (pm, pl)) = random_gaussian_pair(&mut rng);
        let q = Gaussian { mu: qm, log_var: ql };
        let p = Gaussian { mu: pm, log_var: pl };
        let exact = kl_gaussians(&q, &p).expect("matched dims");
        let mc = kl_monte_carlo((&q.mu, &q.log_var), (&p.mu, &p.log_var), 100_000, &mut rng.derive_str("mc"));
        worst = worst.max((exact - mc).abs());
        min_kl = min_kl.min(exact);
    }
    verdict(worst < 1e-2 && min_kl >= 0.0, format!("max |closed form - MC| {worst:.2e}, min KL {min_kl:.3e}"))
}

fn codec_exactness() -> Verdict {
    let mut failures = Vec::new();
    let padded: Vec<f64> = (0..1001).map(|i| i as f64 * 0.25).collect();
    let c = chunk(&padded, 250).expect("positive chunk size");
    if c.len() != 5 || c.pad_len != 249 || bits(&unchunk(&c).expect("valid padding")) != bits(&padded) {
        failures.push("1001-element case".to_string());
    }
    let root = RngStream::new(31);
    let dir = tempfile::tempdir().expect("temp dir");
    for case in 0..100u64 {
        let mut rng = root.child("case", case);
        let raw: Vec<f64> = (0..rng.below(1300)).map(|_| f64::from_bits(rng.next_u64())).collect();
        let size = 1 + rng.below(300);
        let c = chunk(&raw, size).expect("positive chunk size");
        if bits(&unchunk(&c).expect("valid padding")) != bits(&raw) {
            failures.push(format!("chunk case {case}"));
        }

        let arch = Architecture::new(ImageShape::new(1, 8, 8), 2 + rng.below(8));
        let mut params = ModelParams::init(arch, &mut rng.derive_str("init")).expect("valid architecture");
        for (_, t) in params.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.normal());
        }
        let flat = codec::flatten(&params);
        let c = chunk(&flat.values, DEFAULT_CHUNK_SIZE).expect("positive chunk size");
        let back = WeightVector::new(flat.manifest.clone(), unchunk(&c).expect("valid padding")).expect("sizes match");
        let rebuilt = codec::unflatten(&back).expect("manifest describes a model");
        let decoded = decode_checkpoint(&encode_checkpoint(&flat).expect("encodes")).expect("decodes");
        let path = dir.path().join(format!("{case}.mcwt"));
        codec::save_checkpoint(&params, &path).expect("writes");
        let loaded = codec::load_checkpoint(&path).expect("reads");
        if rebuilt != params
            || decoded.manifest != flat.manifest
            || bits(&decoded.values) != bits(&flat.values)
            || bits(&codec::flatten(&loaded).values) != bits(&flat.values)
        {
            failures.push(format!("model case {case}"));
        }
    }
    verdict(failures.is_empty(), if failures.is_empty() { "100 cases + 1001-element padding bitwise".into() } else { format!("mismatches: {failures:?}") })
}

fn metric_oracle() -> Verdict {
    let root = RngStream::new(5);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mut rng = root.child("matrix", i);
        let k = 1 + rng.below(10);
        let rows = random_matrix(k, &mut rng);
        let m = AccuracyMatrix::from_rows(rows.clone()).expect("valid matrix");
        worst = worst
            .max((m.avg_accuracy().expect("rows") - brute_avg_accuracy(&rows)).abs())
            .max((m.avg_forgetting().expect("rows") - brute_avg_forgetting(&rows)).abs());
    }
    let hand = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]]).expect("valid matrix");
    let (a, f) = (hand.avg_accuracy().expect("rows"), hand.avg_forgetting().expect("rows"));
    let hand_ok = (a - 0.825).abs() < 1e-12 && (f - 0.1).abs() < 1e-12;
    verdict(worst < 1e-12 && hand_ok, format!("max deviation {worst:.1e}; hand example A={a} F={f}"))
}

fn semi_supervised_lift() -> Verdict {
    let start = Instant::now();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..SEEDS {
        let stream = ExperimentConfig::blobs8(seed, 4).build_stream().expect("preset stream");
        let task = &stream.tasks[0];
        let arch = Architecture::new(stream.shape().expect("non-empty"), stream.num_classes);
        let init = ModelParams::init(arch, &mut RngStream::new(seed).derive_str("init")).expect("valid architecture");
        for (use_unlabelled, out) in [(true, &mut with), (false, &mut without)] {
            let cfg = GanTrainConfig {
                use_unlabelled,
                ..GanTrainConfig::default()
            };
            let model = train_base(task, &init, &cfg, &RngStream::new(seed).derive_str("train")).expect("trains");
            out.push(evaluate(&model, &task.test, Some(&task.classes)).expect("evaluates"));
        }
    }
    let lift = mean(&with) - mean(&without);
    let elapsed = start.elapsed();
    verdict(
        lift >= 0.03 && elapsed < Duration::from_secs(300),
        format!(
            "with {:.4} vs without {:.4}: lift {:+.2} points, {:.0}s",
            mean(&with),
            mean(&without),
            100.0 * lift,
            elapsed.as_secs_f64()
        ),
    )
}

/// Final states of the stream runs shared by the later criteria.
struct StreamRuns {
    mcssl_50: Vec<ExperimentState>,
    single_50: Vec<f64>,
    ewc_50: Vec<f64>,
    mcssl_100: Vec<f64>,
    baseline_peaks: Vec<usize>,
    elapsed: Duration,
}

fn avg(s: &ExperimentState) -> f64 {
    s.matrix.avg_accuracy().expect("finished run")
}

/// Seed 0 at M=50 is written to `seed0_dir` for the determinism check.
fn stream_runs(seed0_dir: &Path) -> StreamRuns {
    let start = Instant::now();
    let mut runs = StreamRuns {
        mcssl_50: Vec::new(),
        single_50: Vec::new(),
        ewc_50: Vec::new(),
        mcssl_100: Vec::new(),
        baseline_peaks: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for seed in 0..SEEDS {
        let cfg = ExperimentConfig::blobs8(seed, 50);
        let mut finished = Vec::new();
        for m in Method::ALL {
            let out = (seed == 0).then(|| seed0_dir.join(m.name()));
            let s = run_experiment(&cfg, m, out.as_deref()).expect("run completes");
            eprintln!("  seed {seed} M=50 {m}: A={:.4}", avg(&s));
            finished.push(s);
        }
        if seed == 0 {
            write_results(&seed0_dir.join("results.csv"), &finished.iter().collect::<Vec<_>>()).expect("writes");
        }
        let mcssl = finished.remove(0);
        for s in &finished {
            runs.baseline_peaks.extend(s.diagnostics.iter().map(|d| d.peak_live_models));
        }
        runs.single_50.push(avg(&finished[0]));
        runs.ewc_50.push(avg(&finished[1]));
        runs.mcssl_50.push(mcssl);
        let s = run_experiment(&ExperimentConfig::blobs8(seed, 100), Method::Mcssl, None).expect("run completes");
        eprintln!("  seed {seed} M=100 mcssl: A={:.4}", avg(&s));
        runs.mcssl_100.push(avg(&s));
    }
    runs.elapsed = start.elapsed();
    runs
}

fn consolidation_effect(runs: &StreamRuns) -> Verdict {
    let mc50 = mean(&runs.mcssl_50.iter().map(avg).collect::<Vec<_>>());
    let single = mean(&runs.single_50);
    let ewc = mean(&runs.ewc_50);
    let mc100 = mean(&runs.mcssl_100);
    let pass = mc50 - single >= 0.05 && mc50 - ewc >= 0.02 && mc100 - mc50 < 0.03 && runs.elapsed < Duration::from_secs(1800);
    verdict(
        pass,
        format!(
            "A at M=50: mcssl {mc50:.4}, single-ssl {single:.4}, ewc-ssl {ewc:.4}; mcssl at M=100 {mc100:.4}; \
             margins {:+.2} / {:+.2} points, drop {:+.2} points, {:.0}s",
            100.0 * (mc50 - single),
            100.0 * (mc50 - ewc),
            100.0 * (mc100 - mc50),
            runs.elapsed.as_secs_f64()
        ),
    )
}

/// Members drawn from the most recent task's stored prior, re-normalized and
/// fine-tuned on that task's buffer slice, against that task's base models.
fn member_and_base_accuracy(state: &ExperimentState) -> (f64, f64) {
    let k = state.next_task - 1;
    let stream = state.config.build_stream().expect("preset stream");
    let task = &stream.tasks[k];
    let mut allowed: Vec<usize> = state.task_classes[..=k].iter().flatten().copied().collect();
    allowed.sort_unstable();
    let hyper = state.hyper.as_ref().expect("hypernetwork method");
    let prior = state.priors.get(k).expect("stored prior");
    let code = TaskDescriptor::new(k, state.num_tasks).expect("valid task").code();
    let slice = state.buffer.slice(k).expect("buffer slice");
    let images = slice.images().expect("buffer images");
    let rng = RngStream::new(state.config.seed).derive_str("fidelity");
    let mut members = Vec::new();
    for e in 0..15 {
        let member_rng = rng.child("member", e);
        let chunks = sample_model(hyper, prior, &code, &mut member_rng.derive_str("latent")).expect("decodes");
        let mut model = state.codec().decode(&chunks).expect("valid chunks");
        recalibrate_batch_norm(&mut model, &images).expect("recalibrates");
        fine_tune(&mut model, slice, &state.config.fine_tune, &member_rng.derive_str("fine-tune")).expect("fine-tunes");
        members.push(evaluate(&model, &task.test, Some(&allowed)).expect("evaluates"));
    }
    (mean(&members), mean(&state.diagnostics[k].base_accuracy))
}

fn hypernetwork_fidelity(states: &[ExperimentState]) -> Verdict {
    let (sampled, base): (Vec<f64>, Vec<f64>) = states.iter().map(member_and_base_accuracy).unzip();
    let (sampled, base) = (mean(&sampled), mean(&base));
    verdict(
        base - sampled <= 0.10,
        format!("most recent task, {} seeds: sampled members {sampled:.4} vs base models {base:.4}", states.len()),
    )
}

fn determinism(seed0_dir: &Path) -> Verdict {
    let again = tempfile::tempdir().expect("temp dir");
    let cfg = ExperimentConfig::blobs8(0, 50);
    let states: Vec<ExperimentState> = Method::ALL
        .into_iter()
        .map(|m| run_experiment(&cfg, m, Some(&again.path().join(m.name()))).expect("run completes"))
        .collect();
    write_results(&again.path().join("results.csv"), &states.iter().collect::<Vec<_>>()).expect("writes");
    let same = |rel: &Path| std::fs::read(seed0_dir.join(rel)).ok() == std::fs::read(again.path().join(rel)).ok();
    let mut files = vec![Path::new("results.csv").to_path_buf()];
    files.extend(Method::ALL.iter().map(|m| Path::new(m.name()).join(STATE_FILE)));
    let differing: Vec<String> = files.iter().filter(|f| !same(f)).map(|f| f.display().to_string()).collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across two full runs", files.len())
        } else {
            format!("differing: {differing:?}")
        },
    )
}

fn memory_contract(runs: &StreamRuns) -> Verdict {
    let mut peaks: Vec<usize> = runs
        .mcssl_50
        .iter()
        .flat_map(|s| s.diagnostics.iter().map(|d| d.peak_live_models))
        .collect();
    let mut aware = common::tiny_config(0);
    aware.eval.task_aware = true;
    aware.ensemble = 4;
    let s = run_experiment(&aware, Method::Mcssl, None).expect("run completes");
    peaks.extend(s.diagnostics.iter().map(|d| d.peak_live_models));
    peaks.extend(&runs.baseline_peaks);
    let max = peaks.iter().copied().max().unwrap_or(0);
    let min = peaks.iter().copied().min().unwrap_or(0);
    verdict(min == 1 && max == 1, format!("peak live models over {} evaluations: min {min}, max {max}", peaks.len()))
}

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("METACL_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let names = [
        "gradient correctness",
        "KL oracle equivalence",
        "codec exactness",
        "metric oracle",
        "semi-supervised lift",
        "consolidation effect",
        "hypernetwork fidelity",
        "determinism",
        "memory contract",
    ];
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        println!("criterion {n} {}: {} ({})", names[n - 1], if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, v));
    };

    let cheap: [(usize, fn() -> Verdict); 5] = [
        (1, gradient_correctness),
        (2, kl_oracle),
        (3, codec_exactness),
        (4, metric_oracle),
        (5, semi_supervised_lift),
    ];
    for (n, f) in cheap {
        if wanted(n) {
            report(n, f());
        }
    }

    let seed0 = tempfile::tempdir().expect("temp dir");
    if [6, 7, 8, 9].into_iter().any(wanted) {
        let runs = stream_runs(seed0.path());
        if wanted(6) {
            report(6, consolidation_effect(&runs));
        }
        if wanted(7) {
            report(7, hypernetwork_fidelity(&runs.mcssl_50));
        }
        if wanted(8) {
            report(8, determinism(seed0.path()));
        }
        if wanted(9) {
            report(9, memory_contract(&runs));
        }
    }

    let failed: Vec<usize> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        if std::env::var_os("METACL_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            ExitCode::FAILURE
        } else {
            ExitCode::SUCCESS
        }
    }
}
