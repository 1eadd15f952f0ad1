//! Acceptance gate: one numbered check per shipping criterion, printed as a
//! PASS/FAIL line with its runtime. Runs sequentially under its own harness
//! so the lines always reach the terminal; exits nonzero if any check fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use adabn::adabn::{adapt, apply_domain, bank_from_running_stats, AdaptOptions, BnStatsBank,
    WelfordAccumulator};
use adabn::analysis::{
    feature_divergence_profile, pilot_separability, sensitivity_sweep, symmetric_kl, Condition,
};
use adabn::checkpoint::{structural_diff, Checkpoint};
use adabn::data::DomainDataset;
use adabn::gradcheck::{check_layer, check_loss_head, FD_STEP};
use adabn::layers::{compose_bn_linear, BatchNormLayer, Conv2dLayer, Layer, LinearLayer};
use adabn::model::Model;
use adabn::presets::{default_benchmark, multi_source_benchmark};
use adabn::rng::seeded_rng;
use adabn::tensor::Tensor;
use adabn::train::{evaluate, train};
use rand::Rng as _;

const MASTER_SEED: u64 = 2026;

/// Trained benchmark shared by the accuracy-facing criteria.
struct Shared {
    model: Model,
    source: DomainDataset,
    target: DomainDataset,
    source_acc: f64,
    baseline_target_acc: f64,
    adapted_model: Model,
    adapted_bank: BnStatsBank,
    adapted_target_acc: f64,
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let bench = default_benchmark(MASTER_SEED).expect("benchmark construction");
        let cfg = bench.spec.train_config();
        let outcome = train(bench.model, std::slice::from_ref(&bench.source), &cfg).expect("training");
        let model = outcome.model;
        let source_acc = evaluate(&model, &bench.source).expect("source eval").accuracy;
        let baseline_target_acc = evaluate(&model, &bench.target).expect("target eval").accuracy;
        let adapted = adapt(
            &model,
            &bench.target.unlabeled(),
            "target",
            &AdaptOptions::default(),
        )
        .expect("adaptation");
        let adapted_target_acc = evaluate(&adapted.model, &bench.target)
            .expect("adapted eval")
            .accuracy;
        Shared {
            model,
            source: bench.source,
            target: bench.target,
            source_acc,
            baseline_target_acc,
            adapted_model: adapted.model,
            adapted_bank: adapted.bank,
            adapted_target_acc,
        }
    })
}

fn random_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so finite differences never straddle the
/// relu kink.
fn random_tensor_off_zero(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let mag = rng.random_range(0.1..1.5);
                if rng.random_range(0..2) == 0 {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
    )
    .unwrap()
}

fn criterion_01_gradients() {
    const INSTANCES: u64 = 20;
    const TOL: f64 = 1e-5;
    let mut worst: (f64, &str) = (0.0, "none");
    let mut track = |report: adabn::gradcheck::GradReport, label: &'static str| {
        assert!(
            report.max_rel < TOL,
            "{label}: max relative error {} over {} comparisons",
            report.max_rel,
            report.compared
        );
        if report.max_rel > worst.0 {
            worst = (report.max_rel, label);
        }
    };
    for i in 0..INSTANCES {
        let mut rng = seeded_rng(1000 + i);
        let p1 = rng.random_range(1..6usize);
        let p2 = rng.random_range(1..6usize);
        let n = rng.random_range(2..5usize);

        let linear = Layer::Linear(LinearLayer::init(p1, p2, &mut rng));
        let x = random_tensor(vec![n, p1], 2000 + i, -1.5, 1.5);
        track(check_layer(&linear, &x, 3000 + i, FD_STEP).unwrap(), "linear");

        let c = rng.random_range(1..3usize);
        let o = rng.random_range(1..3usize);
        for stride in [1usize, 2] {
            let conv = Layer::Conv2d(Conv2dLayer::init(o, c, 3, 3, stride, &mut rng));
            let xc = random_tensor(vec![2, c, 7, 7], 4000 + 2 * i + stride as u64, -1.5, 1.5);
            track(
                check_layer(&conv, &xc, 5000 + i, FD_STEP).unwrap(),
                if stride == 1 { "conv2d/s1" } else { "conv2d/s2" },
            );
        }

        let bn2 = Layer::BatchNorm(BatchNormLayer::new(p1, 0.1, 1e-5).unwrap());
        let xb = random_tensor(vec![n.max(3), p1], 6000 + i, -2.0, 2.0);
        track(check_layer(&bn2, &xb, 7000 + i, FD_STEP).unwrap(), "batchnorm/2d");

        let bn4 = Layer::BatchNorm(BatchNormLayer::new(c, 0.1, 1e-5).unwrap());
        let xb4 = random_tensor(vec![2, c, 4, 4], 8000 + i, -2.0, 2.0);
        track(check_layer(&bn4, &xb4, 9000 + i, FD_STEP).unwrap(), "batchnorm/4d");

        let xr = random_tensor_off_zero(vec![n, p1], 10_000 + i);
        track(check_layer(&Layer::Relu, &xr, 11_000 + i, FD_STEP).unwrap(), "relu");

        let xf = random_tensor(vec![2, c, 3, 3], 12_000 + i, -1.5, 1.5);
        track(check_layer(&Layer::Flatten, &xf, 13_000 + i, FD_STEP).unwrap(), "flatten");

        let k = rng.random_range(2..5usize);
        track(check_loss_head(n, k, 14_000 + i, FD_STEP), "loss-head");
    }
    println!("    worst relative error {:.3e} ({})", worst.0, worst.1);
}

fn criterion_02_welford() {
    let mut rng = seeded_rng(22);
    for trial in 0..100u64 {
        let n = rng.random_range(4..200usize);
        let width = rng.random_range(1..5usize);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..width).map(|_| rng.random_range(-50.0..50.0)).collect())
            .collect();

        // random partition into up to 5 chunks, each streamed separately
        let parts = rng.random_range(1..6usize).min(n);
        let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..n)).collect();
        cuts.push(0);
        cuts.push(n);
        cuts.sort_unstable();
        let mut merged = WelfordAccumulator::new(width);
        for w in cuts.windows(2) {
            let mut acc = WelfordAccumulator::new(width);
            for r in &rows[w[0]..w[1]] {
                acc.update_row(r).unwrap();
            }
            merged = merged.merge(&acc).unwrap();
        }
        let (mean, var) = merged.finalize().unwrap();

        let nf = n as f64;
        for j in 0..width {
            let em: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / nf;
            let ev: f64 = rows.iter().map(|r| (r[j] - em) * (r[j] - em)).sum::<f64>() / nf;
            assert!(
                (mean[j] - em).abs() < 1e-9,
                "trial {trial} mean[{j}]: {} vs {}",
                mean[j],
                em
            );
            assert!(
                (var[j] - ev).abs() < 1e-9,
                "trial {trial} var[{j}]: {} vs {}",
                var[j],
                ev
            );
        }
    }
}

fn criterion_03_composition() {
    let mut rng = seeded_rng(33);
    for trial in 0..100u64 {
        let p1 = rng.random_range(1..8usize);
        let p2 = rng.random_range(1..8usize);
        let linear = LinearLayer::init(p1, p2, &mut rng);
        let mu: Vec<f64> = (0..p1).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..p1).map(|_| rng.random_range(0.1..3.0)).collect();
        let (wa, ba) = compose_bn_linear(&mu, &sigma, &linear).unwrap();

        let x: Vec<f64> = (0..p1).map(|_| rng.random_range(-4.0..4.0)).collect();
        // path 1: standardize, then the original affine layer
        let z: Vec<f64> = x
            .iter()
            .zip(&mu)
            .zip(&sigma)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let y1 = linear
            .forward(&Tensor::new(vec![1, p1], z).unwrap())
            .unwrap();
        // path 2: the composed affine applied to the raw input
        for j in 0..p2 {
            let mut y2 = ba.data()[j];
            for (i, xi) in x.iter().enumerate() {
                y2 += wa.data()[j * p1 + i] * xi;
            }
            assert!(
                (y1.data()[j] - y2).abs() < 1e-10,
                "trial {trial} output {j}: {} vs {}",
                y1.data()[j],
                y2
            );
        }
    }

    // scalar hand-check: W=2, b=1, mu=3, sigma=2 folds to Wa=1, ba=-2
    let linear = LinearLayer::new(
        Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
        Tensor::vector(&[1.0]).unwrap(),
    )
    .unwrap();
    let (wa, ba) = compose_bn_linear(&[3.0], &[2.0], &linear).unwrap();
    assert_eq!(wa.data(), &[1.0]);
    assert_eq!(ba.data(), &[-2.0]);
}

fn trapezoid_symmetric_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    let (s1, s2) = (v1.sqrt(), v2.sqrt());
    let lo = (m1 - 12.0 * s1).min(m2 - 12.0 * s2);
    let hi = (m1 + 12.0 * s1).max(m2 + 12.0 * s2);
    let steps = 200_000;
    let dx = (hi - lo) / steps as f64;
    let pdf = |x: f64, m: f64, v: f64| {
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    };
    let integrand = |x: f64| {
        let f = pdf(x, m1, v1);
        let g = pdf(x, m2, v2);
        if f > 0.0 && g > 0.0 {
            f * (f / g).ln() + g * (g / f).ln()
        } else {
            0.0
        }
    };
    let mut acc = 0.5 * (integrand(lo) + integrand(hi));
    for k in 1..steps {
        acc += integrand(lo + k as f64 * dx);
    }
    acc * dx
}

fn criterion_04_divergence_oracle() {
    let mut rng = seeded_rng(44);
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let m1 = rng.random_range(-2.0..2.0);
        let m2 = rng.random_range(-2.0..2.0);
        let v1 = rng.random_range(0.2..3.0);
        let v2 = rng.random_range(0.2..3.0);
        let closed = symmetric_kl(m1, v1, m2, v2).unwrap();
        let numeric = trapezoid_symmetric_kl(m1, v1, m2, v2);
        let err = (closed - numeric).abs();
        worst = worst.max(err);
        assert!(
            err < 1e-4,
            "pair {trial}: closed {closed} vs integrated {numeric}"
        );
    }
    let unit = symmetric_kl(0.0, 1.0, 1.0, 1.0).unwrap();
    assert_eq!(unit, 1.0, "unit-mean-shift divergence must be exactly 1");
    println!("    worst closed-vs-integrated gap {worst:.3e}");
}

fn criterion_05_adaptation_gain() {
    let s = shared();
    println!(
        "    source {:.4}  target baseline {:.4}  target adapted {:.4}",
        s.source_acc, s.baseline_target_acc, s.adapted_target_acc
    );
    assert!(
        s.adapted_target_acc >= s.baseline_target_acc + 0.10,
        "gain {:.4} is below 10 points",
        s.adapted_target_acc - s.baseline_target_acc
    );

    // swapping in the source's own banked statistics must not move source
    // accuracy at all
    let bank = bank_from_running_stats(&s.model, "source", s.source.sample_count() as u64).unwrap();
    let via_bank = apply_domain(&s.model, &bank, "source").unwrap();
    let acc = evaluate(&via_bank, &s.source).unwrap().accuracy;
    assert_eq!(
        acc, s.source_acc,
        "source accuracy moved under its own statistics"
    );
}

fn criterion_06_divergence_shrinks() {
    let s = shared();
    let layers = vec!["bn1".to_string(), "bn2".to_string()];
    let reports =
        feature_divergence_profile(&s.model, &s.source, &s.target, &layers, Some(&s.adapted_bank))
            .unwrap();
    for pair in reports.chunks(2) {
        let (before, after) = (&pair[0], &pair[1]);
        assert_eq!(before.condition, Condition::BeforeAdapt);
        assert_eq!(after.condition, Condition::AfterAdapt);
        println!(
            "    {}: mean divergence {:.4} -> {:.4}",
            before.layer_name, before.mean, after.mean
        );
        assert!(
            after.mean < 0.5 * before.mean,
            "{}: after {} not under half of before {}",
            before.layer_name,
            after.mean,
            before.mean
        );
    }
}

fn criterion_07_separability() {
    let s = shared();
    let layers = vec!["bn1".to_string(), "bn2".to_string()];

    let shifted = pilot_separability(
        &s.model,
        &[s.source.clone(), s.target.clone()],
        &layers,
        32,
        MASTER_SEED,
    )
    .unwrap();
    for l in &shifted.layers {
        println!(
            "    shifted domains, {}: probe accuracy {:.4} ({} test vectors)",
            l.layer_name, l.accuracy, l.test_count
        );
        assert!(
            l.accuracy >= 0.95,
            "{}: shifted domains should separate, got {}",
            l.layer_name,
            l.accuracy
        );
    }

    // identical distributions: even vs odd rows of the source
    let n = s.source.sample_count();
    let even: Vec<usize> = (0..n).step_by(2).collect();
    let odd: Vec<usize> = (1..n).step_by(2).collect();
    let half_a = s.source.select(&even).unwrap().with_domain_id("same-a");
    let half_b = s.source.select(&odd).unwrap().with_domain_id("same-b");
    let same = pilot_separability(&s.model, &[half_a, half_b], &layers, 16, MASTER_SEED).unwrap();
    for l in &same.layers {
        let band = 3.0 * (0.25 / l.test_count as f64).sqrt();
        println!(
            "    identical domains, {}: probe accuracy {:.4} (chance band +/-{:.3})",
            l.layer_name, l.accuracy, band
        );
        assert!(
            (l.accuracy - 0.5).abs() <= band,
            "{}: identical domains should not separate, got {} (band {})",
            l.layer_name,
            l.accuracy,
            band
        );
    }
}

fn criterion_08_sensitivity() {
    let s = shared();
    let report = sensitivity_sweep(&s.model, &s.target, &[1, 32], 64, 5, MASTER_SEED).unwrap();
    let one = &report.rows[0];
    let thirty_two = &report.rows[1];
    println!(
        "    1 batch: {:.4} +/- {:.4}   32 batches: {:.4} +/- {:.4}   full: {:.4}",
        one.mean_accuracy,
        one.std_accuracy,
        thirty_two.mean_accuracy,
        thirty_two.std_accuracy,
        s.adapted_target_acc
    );
    assert!(
        one.mean_accuracy >= s.baseline_target_acc,
        "one batch of statistics should already beat the baseline: {} vs {}",
        one.mean_accuracy,
        s.baseline_target_acc
    );
    assert!(
        (thirty_two.mean_accuracy - s.adapted_target_acc).abs() <= 0.01,
        "32 batches should match full-data adaptation within a point: {} vs {}",
        thirty_two.mean_accuracy,
        s.adapted_target_acc
    );
    assert!(
        thirty_two.std_accuracy < one.std_accuracy,
        "trial spread should shrink with more batches: std(32)={} vs std(1)={}",
        thirty_two.std_accuracy,
        one.std_accuracy
    );
}

fn criterion_09_multi_source() {
    let mb = multi_source_benchmark(MASTER_SEED).unwrap();
    let outcome = train(
        mb.model,
        &[mb.source_a.clone(), mb.source_b.clone()],
        &mb.train,
    )
    .unwrap();
    let model = outcome.model;
    let baseline = evaluate(&model, &mb.target).unwrap().accuracy;
    let adapted_model = adapt(
        &model,
        &mb.target.unlabeled(),
        "target",
        &AdaptOptions::default(),
    )
    .unwrap()
    .model;
    let adapted = evaluate(&adapted_model, &mb.target).unwrap().accuracy;
    println!("    two-source baseline {baseline:.4} -> adapted {adapted:.4}");
    assert!(
        adapted > baseline,
        "adaptation must strictly improve the multi-source baseline: {baseline} vs {adapted}"
    );
}

fn criterion_10_checkpoint_round_trip() {
    for seed in 0..30u64 {
        let mut rng = seeded_rng(seed * 17 + 5);
        let mut layers: Vec<(String, Layer)> = Vec::new();
        let width0 = rng.random_range(2..6usize);
        let mut width = width0;
        for d in 0..rng.random_range(1..4usize) {
            let next = rng.random_range(2..6usize);
            layers.push((
                format!("fc{d}"),
                Layer::Linear(LinearLayer::init(width, next, &mut rng)),
            ));
            if rng.random_range(0..2) == 1 {
                layers.push((
                    format!("bn{d}"),
                    Layer::BatchNorm(BatchNormLayer::new(next, 0.1, 1e-5).unwrap()),
                ));
                layers.push((format!("relu{d}"), Layer::Relu));
            }
            width = next;
        }
        if layers.is_empty() {
            layers.push((
                "fc0".into(),
                Layer::Linear(LinearLayer::init(width0, 2, &mut rng)),
            ));
        }
        let model = Model::new(layers).unwrap();
        let mut bank = BnStatsBank::new();
        for (d, name) in model.bn_names().into_iter().enumerate() {
            let p = match &model.layers()[model.layer_index(&name).unwrap()].layer {
                Layer::BatchNorm(bn) => bn.feature_count(),
                _ => unreachable!(),
            };
            bank.insert(
                &name,
                &format!("domain-{d}"),
                adabn::adabn::BankEntry {
                    mean: (0..p).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    var: (0..p).map(|_| rng.random_range(0.05..4.0)).collect(),
                    count: rng.random_range(2..1000u64),
                },
            )
            .unwrap();
        }
        let ckpt = Checkpoint::new(model, bank, seed, vec![seed as u8; 16]);
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert!(
            structural_diff(&ckpt, &back).identical(),
            "seed {seed}: round trip is not bit-identical"
        );
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2, "seed {seed}: re-serialization changed bytes");
    }
}

fn criterion_11_weight_preservation() {
    let s = shared();
    let src_bank =
        bank_from_running_stats(&s.model, "source", s.source.sample_count() as u64).unwrap();
    let before = Checkpoint::new(s.model.clone(), src_bank.clone(), MASTER_SEED, vec![7; 32]);

    // what the adapt step ships: identical weights, bank grown by the
    // target's entries
    let mut grown = src_bank;
    for (layer, domain, entry) in s.adapted_bank.iter() {
        grown.insert(layer, domain, entry.clone()).unwrap();
    }
    let after = Checkpoint::new(s.model.clone(), grown, MASTER_SEED, vec![7; 32]);

    let diff = structural_diff(&before, &after);
    assert!(
        diff.changed_tensors.is_empty(),
        "adapt must not touch any tensor, changed: {:?}",
        diff.changed_tensors
    );
    assert!(!diff.arch_changed, "adapt must not touch the architecture");
    assert!(
        diff.bank_only(),
        "checkpoints should differ only in bank entries: {diff:?}"
    );
    println!(
        "    bank entries added: {:?}",
        diff.changed_bank_keys
            .iter()
            .map(|(l, d)| format!("{l}@{d}"))
            .collect::<Vec<_>>()
    );

    // and the adapted in-memory model still carries the identical learnable
    // tensors (running statistics are not learnable parameters)
    let adapted_params = s.adapted_model.named_params();
    let original_params = s.model.named_params();
    assert_eq!(original_params.len(), adapted_params.len());
    for ((name, pname, t), (n2, p2, t2)) in original_params.iter().zip(&adapted_params) {
        assert_eq!((name, pname), (n2, p2));
        assert_eq!(t, t2, "parameter {name}.{pname} changed during adaptation");
    }
}

/// number, report label, time budget in seconds, body
type Check = (u32, &'static str, f64, fn());

fn main() {
    let checks: Vec<Check> = vec![
        (1, "layer-gradients-vs-finite-differences", 10.0, criterion_01_gradients),
        (2, "streaming-moments-vs-two-pass", 5.0, criterion_02_welford),
        (3, "normalization-affine-composition", 1.0, criterion_03_composition),
        (4, "symmetric-kl-closed-form-vs-integration", 5.0, criterion_04_divergence_oracle),
        (5, "target-gain-and-source-invariance", 300.0, criterion_05_adaptation_gain),
        (6, "feature-divergence-shrinks", 120.0, criterion_06_divergence_shrinks),
        (7, "batch-statistics-domain-probe", 120.0, criterion_07_separability),
        (8, "target-size-sensitivity", 600.0, criterion_08_sensitivity),
        (9, "multi-source-adaptation", 600.0, criterion_09_multi_source),
        (10, "checkpoint-round-trip", 5.0, criterion_10_checkpoint_round_trip),
        (11, "adapt-preserves-weights", 60.0, criterion_11_weight_preservation),
    ];

    // keep the report readable: criteria report failures through the
    // PASS/FAIL lines, not through panic backtraces
    std::panic::set_hook(Box::new(|_| {}));

    let mut failures = 0;
    for (num, name, budget, f) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f));
        let elapsed = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) if elapsed <= budget => {
                println!("ACCEPTANCE {num:02} {name}: PASS ({elapsed:.1}s)");
            }
            Ok(()) => {
                failures += 1;
                println!(
                    "ACCEPTANCE {num:02} {name}: FAIL (passed checks but took {elapsed:.1}s, budget {budget:.0}s)"
                );
            }
            Err(payload) => {
                failures += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| payload.downcast_ref::<&str>().copied())
                    .unwrap_or("panic without message");
                println!("ACCEPTANCE {num:02} {name}: FAIL ({elapsed:.1}s) - {msg}");
            }
        }
    }
    let _ = std::panic::take_hook();
    if failures > 0 {
        println!("acceptance: {failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
