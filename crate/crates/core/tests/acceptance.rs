//! Acceptance suite: one PASS/FAIL line per criterion.
//! Run with `cargo test -p evofed --test acceptance`.

mod common;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{blob_federation, dense_step_oracle, dot, fd_gradient, fed_config, gaussian_vec, random_params, rel_l2};
use evofed::detrng::{PerturbationSet, RngStream};
use evofed::experiment::{reference_configurations, run_experiment, ExperimentConfig, RunOutcome};
use evofed::federation::{apply_broadcast, catch_up, fedavg_equivalence_check, Method, NodeModel, Simulation};
use evofed::fitness_codec::{decode_fitness, encode_fitness, CodecScheme};
use evofed::nn::{self, Activation, ArchSpec, Batch};
use evofed::pbge::{decode_step, encode, encode_progress, make_layout, FitnessMatrix};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Duration, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn decode_identity() -> Outcome {
    let mut rng = RngStream::new(0xC1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = 8 + rng.below(57) as usize;
        let n = 2 * (1 + rng.below(16) as usize);
        let k = 1 + rng.below(4) as usize;
        let alpha = 0.1 + rng.uniform();
        let theta = gaussian_vec(&mut rng, d, 1.0);
        let target: Vec<f64> = theta.iter().map(|t| t + 0.3 * rng.gaussian()).collect();
        let progress: Vec<f64> = target.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let set = PerturbationSet::new(rng.next_u64(), n, d, 0.05 + rng.uniform()).unwrap();
        let layout = make_layout(d, k).unwrap();
        let f = encode_progress(&progress, &set, &layout, 1, 0).unwrap();
        let step = decode_step(&f, &set, &layout, alpha).unwrap();
        let oracle = dense_step_oracle(&theta, &target, &set, &layout, alpha);
        for part in 0..k {
            let r = layout.range(part);
            worst = worst.max(rel_l2(&step[r.clone()], &oracle[r]));
        }
    }
    check(
        worst <= 1e-9,
        format!("200 trials, worst relative error {worst:.2e} (limit 1e-9)"),
    )
}

fn aggregation_equivalence() -> Outcome {
    let arch = Arc::new(ArchSpec::mlp(3, &[5], 2, Activation::Tanh).unwrap());
    let mut rng = RngStream::new(0xC2);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for m in [2usize, 5, 10] {
        for _ in 0..50 {
            let theta = random_params(&arch, &mut rng, 1.0);
            let set = PerturbationSet::new(rng.next_u64(), 32, arch.param_count(), 0.27).unwrap();
            let layout = make_layout(arch.param_count(), 1 + rng.below(3) as usize).unwrap();
            let messages: Vec<_> = (0..m)
                .map(|_| {
                    let target = theta
                        .with_values(theta.values().iter().map(|v| v + 0.2 * rng.gaussian()).collect())
                        .unwrap();
                    let weight = 1 + rng.below(500) as u32;
                    let f = encode(&theta, &target, &set, &layout, weight, 0).unwrap();
                    encode_fitness(&f, CodecScheme::Raw32).unwrap()
                })
                .collect();
            let eq = fedavg_equivalence_check(&theta, &messages, &set, &layout, 0.5)
                .unwrap()
                .unwrap();
            worst = worst.max(eq.relative_deviation);
            trials += 1;
        }
    }
    check(
        worst <= 1e-9,
        format!("{trials} trials over M in {{2, 5, 10}}, worst relative deviation {worst:.2e}"),
    )
}

fn catch_up_exactness() -> Outcome {
    let mut cfg = fed_config(Method::Evofed, 3, 10);
    cfg.history_depth = 5;
    cfg.es_momentum = 0.4;
    cfg.partitions = 2;
    let mut sim = Simulation::new(cfg, blob_federation(0xC3, 3, &[8])).unwrap();
    let mut snapshots: Vec<NodeModel> = vec![sim.server().clone()];
    for _ in 0..10 {
        sim.step().unwrap();
        snapshots.push(sim.server().clone());
    }
    let now = sim.server().round;
    for k in 1..=5u32 {
        let stale = &snapshots[(now - k) as usize];
        let mut sequential = stale.clone();
        for t in stale.round..now {
            sequential = apply_broadcast(&sequential, sim.history().get(t).unwrap(), sim.params()).unwrap();
        }
        let replayed = catch_up(stale, now, sim.history(), sim.params()).unwrap();
        if replayed != sequential || &replayed != sim.server() {
            return Err(format!("k = {k}: replayed model differs from sequential application"));
        }
    }
    Ok("k = 1..5 replays equal sequential application and the live server bit for bit".into())
}

fn moment_conditions() -> Outcome {
    let mut rng = RngStream::new(0xC4);
    let mut worst_g2 = 0.0f64;
    for _ in 0..100 {
        let n = 2 * (1 + rng.below(64) as usize);
        let d = 1 + rng.below(200) as usize;
        let set = PerturbationSet::new(rng.next_u64(), n, d, 0.3).unwrap();
        let mut s1 = vec![0.0f64; d];
        let mut s3 = vec![0.0f64; d];
        for eps in set.iter() {
            for (j, e) in eps.iter().enumerate() {
                s1[j] += e;
                s3[j] += e * e * e;
            }
        }
        if s1.iter().chain(&s3).any(|&s| s != 0.0) {
            return Err(format!("nonzero odd moment with N = {n}, d = {d}"));
        }
        let m = set.moment_check();
        if m.m1.iter().chain(&m.m3).any(|&v| v != 0.0) || !m.m2max.is_finite() {
            return Err("moment_check disagrees".into());
        }
        worst_g2 = worst_g2.max(m.m2max);
    }
    Ok(format!(
        "100 sets: first and third moments exactly zero, largest G^2 = {worst_g2:.3}"
    ))
}

fn constant_shift() -> Outcome {
    let mut rng = RngStream::new(0xC5);
    for trial in 0..100 {
        let d = 8 + rng.below(40) as usize;
        let n = 2 * (1 + rng.below(16) as usize);
        let k = 1 + rng.below(4) as usize;
        let set = PerturbationSet::new(rng.next_u64(), n, d, 0.27).unwrap();
        let layout = make_layout(d, k).unwrap();
        let progress = gaussian_vec(&mut rng, d, 0.3);
        let raw = encode_progress(&progress, &set, &layout, 1, 0).unwrap();
        let sent = decode_fitness(&encode_fitness(&raw, CodecScheme::Raw32).unwrap()).unwrap();
        let shifts: Vec<f64> = (0..k).map(|_| ((rng.uniform() - 0.5) * 2e3) as f32 as f64).collect();
        let shifted: Vec<f64> = sent.values.iter().enumerate().map(|(i, v)| v + shifts[i % k]).collect();
        let shifted = FitnessMatrix::new(0, n, k, shifted, 1).unwrap();
        let theta = gaussian_vec(&mut rng, d, 1.0);
        let apply = |f: &FitnessMatrix| -> Vec<f64> {
            let step = decode_step(f, &set, &layout, 0.5).unwrap();
            theta.iter().zip(&step).map(|(t, s)| t + s).collect()
        };
        if apply(&sent) != apply(&shifted) {
            return Err(format!("trial {trial}: shifted fitness decoded to a different model"));
        }
    }
    Ok("100 trials, decoded models identical under per-column shifts".into())
}

fn gradient_correctness() -> Outcome {
    let mut rng = RngStream::new(0xC6);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let input = 1 + rng.below(4) as usize;
        let hidden: Vec<usize> = (0..rng.below(3)).map(|_| 1 + rng.below(6) as usize).collect();
        let classes = 2 + rng.below(3) as usize;
        let act = [Activation::Tanh, Activation::Relu, Activation::Identity][i % 3];
        let arch = Arc::new(ArchSpec::mlp(input, &hidden, classes, act).unwrap());
        let model = random_params(&arch, &mut rng, 0.8);
        let rows = 1 + rng.below(8) as usize;
        let inputs = gaussian_vec(&mut rng, rows * input, 1.0);
        let labels = (0..rows).map(|_| rng.below(classes as u64) as usize).collect();
        let batch = Batch::new(inputs, labels, input).unwrap();
        let (_, grad) = nn::loss_and_grad(&model, &batch).unwrap();
        let fd = fd_gradient(&model, &batch, 1e-5);
        worst = grad.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    check(
        worst <= 1e-6,
        format!("20 models, worst component deviation {worst:.2e} (limit 1e-6)"),
    )
}

fn compression_accounting() -> Outcome {
    let checks = reference_configurations().map_err(|e| e.to_string())?;
    let detail = checks
        .iter()
        .map(|c| {
            format!(
                "{:.2}% vs claimed {:.1}%",
                c.report.compression * 100.0,
                c.claimed_compression * 100.0
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(checks.iter().all(|c| c.reproduced), detail)
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn desk_run(name: &str, threads: Option<usize>, out: &std::path::Path) -> RunOutcome {
    let cfg = ExperimentConfig::from_file(config_path(name)).unwrap();
    run_experiment(&cfg, Some(out), threads).unwrap()
}

fn desk_learning(scratch: &std::path::Path) -> Outcome {
    let started = Instant::now();
    let evo = desk_run("desk-evofed.ini", None, &scratch.join("evofed"));
    let avg = desk_run("desk-fedavg.ini", None, &scratch.join("fedavg"));
    let (e, a) = (evo.summary.final_accuracy, avg.summary.final_accuracy);
    let params = evo.summary.param_count;
    let desk_time = started.elapsed();
    let mut detail = format!("{params}-param MLP: evofed {e:.4}, fedavg {a:.4} in {desk_time:.2?}");
    let ok = e >= 0.90 && a - e <= 0.05 && params <= 600 && desk_time <= Duration::from_secs(180);
    match std::env::var_os("EVOFED_MNIST_DIR") {
        None => detail.push_str("; MNIST stretch skipped (EVOFED_MNIST_DIR unset)"),
        Some(dir) => {
            let dir = PathBuf::from(dir);
            let stretch = |method: &str| {
                let text = std::fs::read_to_string(config_path("mnist-evofed.ini"))
                    .unwrap()
                    .replace("method = evofed", &format!("method = {method}"))
                    .replace("data/mnist", &dir.display().to_string());
                let cfg = ExperimentConfig::parse(&text).unwrap();
                run_experiment(&cfg, Some(&scratch.join(format!("mnist-{method}"))), None)
                    .unwrap()
                    .summary
            };
            let started = Instant::now();
            let (se, sa) = (stretch("evofed"), stretch("fedavg"));
            let ratio = se.total_uplink_bytes as f64 / sa.total_uplink_bytes as f64;
            detail.push_str(&format!(
                "; MNIST stretch: evofed {:.4}, fedavg {:.4}, uplink ratio {:.4} in {:.2?} ({})",
                se.final_accuracy,
                sa.final_accuracy,
                ratio,
                started.elapsed(),
                if sa.final_accuracy - se.final_accuracy <= 0.05 && ratio < 0.02 {
                    "met"
                } else {
                    "not met"
                }
            ));
        }
    }
    check(ok, detail)
}

fn codec_fidelity() -> Outcome {
    let mut rng = RngStream::new(0xC9);
    let (n, d) = (64, 40);
    let layout = make_layout(d, 1).unwrap();
    let mut worst_quant = 0.0f64;
    let (mut rank_ok, mut topk_ok) = (0, 0);
    for _ in 0..100 {
        let set = PerturbationSet::new(rng.next_u64(), n, d, 0.27).unwrap();
        let random = FitnessMatrix::new(0, n, 1, (0..n).map(|_| -10.0 * rng.uniform()).collect(), 1).unwrap();
        let raw = decode_step(&random, &set, &layout, 1.0).unwrap();
        let q = decode_fitness(&encode_fitness(&random, CodecScheme::Quant(8)).unwrap()).unwrap();
        worst_quant = worst_quant.max(rel_l2(&decode_step(&q, &set, &layout, 1.0).unwrap(), &raw));

        let progress = gaussian_vec(&mut rng, d, 0.1);
        let f = encode_progress(&progress, &set, &layout, 1, 0).unwrap();
        let reference = decode_step(&f, &set, &layout, 1.0).unwrap();
        let via = |scheme| {
            let g = decode_fitness(&encode_fitness(&f, scheme).unwrap()).unwrap();
            dot(&decode_step(&g, &set, &layout, 1.0).unwrap(), &reference)
        };
        rank_ok += (via(CodecScheme::Rank(n)) > 0.0) as u32;
        topk_ok += (via(CodecScheme::TopK(n)) > 0.0) as u32;
    }
    check(
        worst_quant <= 0.01 && rank_ok >= 95 && topk_ok >= 95,
        format!("quant(8) worst relative L2 {worst_quant:.2e}; positive alignment rank(N) {rank_ok}/100, topk(N) {topk_ok}/100"),
    )
}

fn determinism(scratch: &std::path::Path) -> Outcome {
    let strip = |o: &RunOutcome| {
        std::fs::read_to_string(o.output.join("rounds.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    let first = desk_run("desk-evofed.ini", Some(4), &scratch.join("det-a"));
    let rerun = desk_run("desk-evofed.ini", Some(4), &scratch.join("det-b"));
    let single = desk_run("desk-evofed.ini", Some(1), &scratch.join("det-c"));
    check(
        strip(&first) == strip(&rerun) && strip(&first) == strip(&single),
        format!(
            "{} rows identical across reruns and 4 vs 1 worker threads",
            first.rows.len()
        ),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let s = scratch.path();
    let criteria: Vec<Criterion> = vec![
        (
            "exact decode identity",
            Duration::from_secs(10),
            Box::new(decode_identity),
        ),
        (
            "aggregation equivalence",
            Duration::from_secs(10),
            Box::new(aggregation_equivalence),
        ),
        (
            "catch-up exactness",
            Duration::from_secs(5),
            Box::new(catch_up_exactness),
        ),
        ("moment conditions", Duration::from_secs(5), Box::new(moment_conditions)),
        (
            "constant-shift immunity",
            Duration::from_secs(5),
            Box::new(constant_shift),
        ),
        (
            "gradient correctness",
            Duration::from_secs(10),
            Box::new(gradient_correctness),
        ),
        (
            "compression accounting",
            Duration::from_secs(1),
            Box::new(compression_accounting),
        ),
        (
            "desk-scale learning",
            Duration::from_secs(180),
            Box::new(move || desk_learning(s)),
        ),
        (
            "fitness-codec fidelity",
            Duration::from_secs(10),
            Box::new(codec_fidelity),
        ),
        (
            "determinism",
            Duration::from_secs(360),
            Box::new(move || determinism(s)),
        ),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result =
            std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".to_string()));
        let took = started.elapsed();
        let result = match result {
            Ok(detail) if took > *limit => Err(format!("{detail}; took {took:.2?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  criterion {:>2}: {name}: {detail} [{took:.2?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {:>2}: {name}: {detail} [{took:.2?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
