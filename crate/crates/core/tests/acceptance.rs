//! One test per acceptance criterion. Expected values are written out here
//! rather than taken from the library's own tables.

mod common;

use std::time::{Duration, Instant};

use egoscale::eval::topk_accuracy;
use egoscale::experiment::{
    eval_runs, points_from_results, run_experiment, train_runs, trend_summary, ExperimentConfig,
    Protocol,
};
use egoscale::scaling::{repro_paper, ConditionEstimate, ScalingPoint, SLEEP_FACTOR};
use egoscale::ssl::{
    classification_loss, dino_step, Algorithm, Architecture, DinoBatch, DinoConfig, DinoState,
    HeadSpec, Network,
};
use egoscale::stream::{frame_count, num_episodes};
use egoscale::tensor::{grad_check, Tensor};

fn row<'a>(rows: &'a [ConditionEstimate], condition: &str) -> &'a ConditionEstimate {
    rows.iter()
        .find(|r| r.condition == condition)
        .unwrap_or_else(|| panic!("no row for {condition}"))
}

fn log10_years(r: &ConditionEstimate) -> f64 {
    r.extrapolation
        .years_est
        .unwrap_or_else(|| panic!("{} has no estimate", r.condition))
        .log10()
}

#[test]
fn c1_clean_accuracy_estimates_within_0_15_decades_in_under_a_second() {
    let t = Instant::now();
    let tables = repro_paper().unwrap();
    let elapsed = t.elapsed();
    let reference = [
        ("tc_fewshot_1pct", 0.9e6),
        ("tc_fewshot_2pct", 6.4e3),
        ("tc_linear_probe", 3.9),
        ("dino_fewshot_1pct", 1.4e9),
        ("dino_fewshot_2pct", 2.3e6),
        ("dino_linear_probe", 1.0e3),
    ];
    for (cond, years) in reference {
        let got = log10_years(row(&tables.clean, cond));
        let err = got - f64::log10(years);
        println!("C1 {cond}: 10^{got:.3} years vs {years:e} (error {err:+.3})");
        assert!(err.abs() <= 0.15, "{cond}: log10 error {err}");
    }
    println!("C1 runtime {:.1} ms", elapsed.as_secs_f64() * 1e3);
    assert!(elapsed < Duration::from_secs(1), "{elapsed:?}");
}

#[test]
fn c2_ood_estimates_and_consistent_ood_threshold() {
    let tables = repro_paper().unwrap();
    let theta = tables.ood_threshold.threshold;
    println!("C2 derived threshold {theta:.3}");
    for (cond, years) in [
        ("tc_ood_practice", 32.9e6),
        ("tc_ood_practice_2pct", 37.8e6),
    ] {
        let r = row(&tables.ood, cond);
        assert_eq!(r.extrapolation.threshold, theta);
        let err = log10_years(r) - f64::log10(years);
        println!("C2 {cond}: error {err:+.3} decades");
        assert!(err.abs() <= 0.2, "{cond}: log10 error {err}");
    }
    for cond in ["dino_ood_practice", "dino_ood_practice_2pct"] {
        let r = row(&tables.ood, cond);
        assert!(r.extrapolation.capped, "{cond} is not capped");
        assert_eq!(r.extrapolation.display_estimate(), ">1T");
    }
    let implied: Vec<f64> = tables.ood_threshold.rows.iter().map(|r| r.2).collect();
    assert_eq!(implied.len(), 2);
    let spread = (implied[0] - implied[1]).abs();
    println!("C2 implied thresholds {implied:?}, spread {spread:.3}");
    assert!(spread <= 0.5, "spread {spread}");
}

#[test]
fn c3_tc_fewshot_interval_brackets_estimate_and_spans_half_to_three_decades() {
    let tables = repro_paper().unwrap();
    let e = &row(&tables.clean, "tc_fewshot_1pct").extrapolation;
    let est = e.years_est.unwrap();
    let (lo, hi) = (e.years_ci.0.unwrap(), e.years_ci.1.unwrap());
    let span = (hi / lo).log10();
    println!("C3 estimate {est:.3e}, interval ({lo:.3e}, {hi:.3e}), span {span:.2} decades");
    assert!(lo < est && est < hi);
    assert!((0.5..=3.0).contains(&span), "span {span}");
}

#[test]
fn c4_bookkeeping_constants() {
    assert_eq!(frame_count(1301.0, 5.0).unwrap(), 23_418_000);
    assert_eq!(1301 * 3600 * 5, 23_418_000);

    let seconds: usize = 1301 * 3600;
    let oracle = seconds.div_ceil(288);
    let n = num_episodes(seconds as f64, 288.0);
    assert_eq!(n, oracle);
    assert_eq!(n, 16_263);
    let rel = (n as f64 - 16_279.0).abs() / 16_279.0;
    println!("C4 {n} episodes, {:.3}% from 16279", rel * 100.0);
    assert!(rel <= 1e-3);

    assert_eq!(SLEEP_FACTOR, 1.5);
    let tables = repro_paper().unwrap();
    for r in tables.clean.iter().chain(&tables.ood) {
        if let Some(y) = r.extrapolation.years_est {
            assert_eq!(r.extrapolation.sleep_adjusted_years.unwrap(), 1.5 * y);
        }
    }
}

#[test]
fn c5_every_op_and_a_three_layer_conv_net_pass_gradient_checks() {
    let cfg = common::gc_config();
    assert_eq!(cfg.tolerance, 1e-4);
    assert_eq!(common::RANDOM_POINTS, 10);
    let mut worst = 0.0f64;
    for case in common::OpCase::all() {
        for point in 0..common::RANDOM_POINTS {
            let inst = case.instance(point);
            let rep = grad_check(&inst, &inst.params, &cfg).unwrap();
            worst = rep
                .per_param
                .iter()
                .map(|p| p.rel_error)
                .fold(worst, f64::max);
            assert!(rep.passed, "{case:?} at point {point}: {:?}", rep.per_param);
        }
    }
    for point in 0..common::RANDOM_POINTS {
        let (net, params) = common::ConvNet3::new(point);
        let rep = grad_check(&net, &params, &cfg).unwrap();
        worst = rep
            .per_param
            .iter()
            .map(|p| p.rel_error)
            .fold(worst, f64::max);
        assert!(rep.passed, "conv net at point {point}: {:?}", rep.per_param);
    }
    println!("C5 worst relative error {worst:.2e}");
}

fn softmax_entropy(row: &[f32], temp: f64) -> f64 {
    let z: Vec<f64> = row.iter().map(|&v| v as f64 / temp).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    -z.iter()
        .map(|v| {
            let p = (v - m).exp() / s;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

#[test]
fn c6_dino_invariants_and_initial_temporal_loss() {
    use common::ssl::*;

    let cfg = tiny_dino_config(1e-2);
    let mut st = DinoState::new(tiny_dino_net(0), &cfg).unwrap();
    for step in 0..5 {
        dino_step(&mut st, &random_batch(4, 2, step), &cfg, 0.9).unwrap();
        for (_, name, t) in st.teacher.iter() {
            assert!(
                t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)),
                "step {step}: teacher {name} has a gradient"
            );
        }
    }

    let mut st = DinoState::new(tiny_dino_net(1), &cfg).unwrap();
    let frozen = st.teacher.clone();
    for step in 0..5 {
        dino_step(&mut st, &random_batch(4, 2, step), &cfg, 1.0).unwrap();
    }
    for ((_, name, a), (_, _, b)) in frozen.iter().zip(st.teacher.iter()) {
        assert_eq!(a.data(), b.data(), "teacher {name} moved at momentum 1");
    }

    let temp = 0.1;
    let same_temp = DinoConfig {
        student_temp: temp,
        teacher_temp: temp,
        ..tiny_dino_config(1e-12)
    };
    let net = tiny_dino_net(5);
    let mut st = DinoState::new(net.clone(), &same_temp).unwrap();
    assert!(st.center.iter().all(|&c| c == 0.0));
    let x = rand_tensor(&[4, 3, 8, 8], 9);
    let logits = head_outputs(&net, &net.params, &x);
    let oracle = logits
        .data()
        .chunks(OUT)
        .map(|r| softmax_entropy(r, temp))
        .sum::<f64>()
        / 4.0;
    let batch = DinoBatch {
        globals: vec![x.clone(), x],
        locals: vec![],
    };
    let rep = dino_step(&mut st, &batch, &same_temp, 1.0).unwrap();
    println!("C6 loss {} vs entropy {oracle}", rep.loss);
    assert!((rep.loss as f64 - oracle).abs() <= 1e-5);

    for c in [2usize, 17, 16263] {
        let arch = Architecture {
            backbone: tiny_backbone(),
            head: HeadSpec::Linear {
                classes: c,
                zero_init: true,
            },
        };
        let net = Network::new(arch, 11).unwrap();
        let labels: Vec<usize> = (0..6).map(|i| (i * 7919) % c).collect();
        let loss = classification_loss(&net, &rand_tensor(&[6, 3, 8, 8], 1), &labels).unwrap();
        let err = loss as f64 - (c as f64).ln();
        println!(
            "C6 initial loss C={c}: {loss} (ln C {:.4})",
            (c as f64).ln()
        );
        assert!(err.abs() <= 0.05, "C={c}: {loss}");
    }
}

/// Full default grid: streams of 2, 20, 200 and 2000 s, three subsets each.
fn toy_scaling(algorithm: Algorithm) -> Vec<ScalingPoint> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        algorithm,
        protocols: vec![Protocol::FewShot1],
        ..ExperimentConfig::default()
    };
    assert_eq!(cfg.stream_duration_s, 2000.0);
    assert_eq!(cfg.fractions, vec![1.0, 0.1, 0.01, 0.001]);
    assert_eq!(cfg.repeats, 3);
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.rows.len(), 12);
    let top5 = points_from_results(&out.rows);
    let t5 = trend_summary(&top5, &cfg.condition(Protocol::FewShot1)).unwrap();
    println!(
        "C7 {} top-5 group means {:?}, spearman {:?}, slope {:.3}",
        algorithm.as_str(),
        t5.group_means
            .iter()
            .map(|g| (g.0, g.1))
            .collect::<Vec<_>>(),
        t5.spearman,
        t5.fit.slope
    );
    out.rows
        .iter()
        .map(|r| ScalingPoint::new(&r.condition, r.hours, r.accuracy_top1, &r.run_id))
        .collect()
}

#[test]
fn c7_toy_fewshot_accuracy_grows_with_stream_length_for_both_algorithms() {
    let t = Instant::now();
    let mut failures = Vec::new();
    for algorithm in [Algorithm::TemporalClassification, Algorithm::Dino] {
        let points = toy_scaling(algorithm);
        let cond = points[0].condition.clone();
        let trend = trend_summary(&points, &cond).unwrap();
        let hours: Vec<f64> = trend.group_means.iter().map(|g| g.0).collect();
        let expect = [2.0, 20.0, 200.0, 2000.0].map(|s| s / 3600.0);
        assert!(hours.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12));
        let rho = trend.spearman.unwrap_or(0.0);
        println!(
            "C7 {} top-1 group means {:?}, spearman {rho:.3}, slope {:.3}",
            algorithm.as_str(),
            trend.group_means.iter().map(|g| g.1).collect::<Vec<_>>(),
            trend.fit.slope
        );
        if !(rho > 0.0 && trend.fit.slope > 0.0) {
            failures.push(format!(
                "{}: rho {rho}, slope {}",
                algorithm.as_str(),
                trend.fit.slope
            ));
        }
    }
    let elapsed = t.elapsed();
    println!("C7 runtime {:.1} min", elapsed.as_secs_f64() / 60.0);
    assert!(failures.is_empty(), "{failures:?}");
    assert!(elapsed < Duration::from_secs(30 * 60));
}

#[test]
fn c8_distortion_and_augmentation_properties() {
    use common::invariants::*;
    for (i, (h, w)) in [(1, 1), (3, 5), (8, 8), (17, 12), (32, 32)]
        .into_iter()
        .enumerate()
    {
        let s = 1000 + i as u64;
        let img = random_image(h, w, s);
        for (kind, e) in identity_distortion_errors(&img, s) {
            assert!(e <= 1e-6, "{kind:?} at {h}x{w}: {e}");
        }
        assert_eq!(rotation4_error(&img), 0.0);
        assert!(grayscale_idempotence_error(&img) <= 1e-6);
        assert!(normalize_roundtrip_error(&img) <= 1e-6);
        assert_eq!(flip_involution_error(&img), 0.0);
        if h > 1 && w > 1 {
            for weight in [0.0, 0.3, 1.0] {
                let e = phase_scramble_amplitude_error(&img, weight, s);
                assert!(e <= 1e-4, "phase scramble at {h}x{w}, weight {weight}: {e}");
            }
        }
    }

    let mut rng_state = 7u64;
    let scores: Vec<f32> = (0..40 * 10)
        .map(|_| {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) % 5) as f32
        })
        .collect();
    let labels: Vec<usize> = (0..40).map(|i| (i * 3) % 10).collect();
    let t = Tensor::new(vec![40, 10], scores).unwrap();
    let accs: Vec<f64> = (1..=10)
        .map(|k| topk_accuracy(&t, &labels, k).unwrap())
        .collect();
    assert!(accs.windows(2).all(|w| w[0] <= w[1]), "{accs:?}");
    assert_eq!(accs[9], 100.0);
}

fn tiny_config(dir: &std::path::Path, algorithm: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        algorithm,
        world_classes: 4,
        world_scenes: 3,
        frame_size: 24,
        eval_world_scenes: 4,
        eval_horizon_s: 2000.0,
        stream_duration_s: 60.0,
        fractions: vec![1.0, 0.5],
        repeats: 2,
        input_size: 16,
        embed_dim: 16,
        batch_size: 8,
        epochs: 1,
        dino_hidden_dim: 16,
        dino_bottleneck_dim: 8,
        dino_out_dim: 8,
        dino_local_crops: 1,
        protocols: vec![
            Protocol::FewShot1,
            Protocol::LinearProbe,
            Protocol::OodPractice,
        ],
        few_shot_per_class: 2,
        test_per_class: 3,
        practice_per_class: 2,
        finetune_epochs: 1,
        finetune_batch_size: 4,
        probe_max_steps: 50,
        ..ExperimentConfig::default()
    }
}

#[test]
fn c9_repeated_commands_give_byte_identical_results() {
    for algorithm in [Algorithm::TemporalClassification, Algorithm::Dino] {
        let (a, b, c) = (
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
        );
        let first = run_experiment(&tiny_config(a.path(), algorithm)).unwrap();
        let second = run_experiment(&tiny_config(b.path(), algorithm)).unwrap();
        train_runs(&tiny_config(c.path(), algorithm)).unwrap();
        let third = eval_runs(&tiny_config(c.path(), algorithm)).unwrap();
        let bytes = |p: &std::path::Path| std::fs::read(p).unwrap();
        let reference = bytes(&first.results_path);
        assert!(!reference.is_empty());
        assert_eq!(
            reference,
            bytes(&second.results_path),
            "{}",
            algorithm.as_str()
        );
        assert_eq!(
            reference,
            bytes(&third.results_path),
            "{}",
            algorithm.as_str()
        );
        // re-running evaluation in place rewrites the same bytes
        let again = eval_runs(&tiny_config(c.path(), algorithm)).unwrap();
        assert_eq!(reference, bytes(&again.results_path));
    }
}
