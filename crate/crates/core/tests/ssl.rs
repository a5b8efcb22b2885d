mod common;

use common::ssl::*;
use egoscale::augment::{AugmentPolicy, MultiCropSpec};
use egoscale::ssl::*;
use egoscale::stream::StreamIndex;
use egoscale::tensor::{OptimizerConfig, OptimizerState, ParamStore, Tensor};
use egoscale::world::{build_world, WorldSpec};

fn max_abs_diff(a: &ParamStore<f32>, b: &ParamStore<f32>) -> f32 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, _, x), (_, _, y))| {
            x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f32::max)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

#[test]
fn dino_step_loss_matches_independent_value_and_finite_differences() {
    let net = tiny_dino_net(3);
    let cfg = tiny_dino_config(1e-12);
    let mut st = DinoState::new(net.clone(), &cfg).unwrap();
    for t in st.teacher.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 1.3);
    }
    st.center = (0..OUT).map(|i| i as f32 * 0.1).collect();
    let batch = random_batch(3, 2, 1);
    let views: Vec<&Tensor<f32>> = batch.globals.iter().chain(&batch.locals).collect();
    let tout: Vec<_> = batch
        .globals
        .iter()
        .map(|g| head_outputs(&net, &st.teacher, g))
        .collect();
    let student_loss = |p: &ParamStore<f32>| {
        let sout: Vec<_> = views.iter().map(|v| head_outputs(&net, p, v)).collect();
        dino_loss_value(&tout, &sout, &st.center, cfg.student_temp, cfg.teacher_temp).unwrap()
    };
    let reference = student_loss(&st.student.params);

    let id = st.student.params.id("head.fc2.weight").unwrap();
    let h = 1e-3f32;
    let fd: Vec<f64> = (0..8)
        .map(|k| {
            let mut up = st.student.params.clone();
            up.get_mut(id).data_mut()[k] += h;
            let mut down = st.student.params.clone();
            down.get_mut(id).data_mut()[k] -= h;
            (student_loss(&up) - student_loss(&down)) / (2.0 * h as f64)
        })
        .collect();

    let rep = dino_step(&mut st, &batch, &cfg, 1.0).unwrap();
    assert!(
        (rep.loss as f64 - reference).abs() < 1e-5,
        "{} vs {reference}",
        rep.loss
    );
    let g = &st.student.params.get(id).grad().unwrap()[..8];
    let num: f64 = g
        .iter()
        .zip(&fd)
        .map(|(a, b)| (*a as f64 - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(num / den < 1e-2, "grad {g:?} vs fd {fd:?}");
}

#[test]
fn teacher_never_holds_gradients_and_follows_ema() {
    let cfg = tiny_dino_config(1e-2);
    let mut st = DinoState::new(tiny_dino_net(0), &cfg).unwrap();
    let m = 0.9;
    for step in 0..4 {
        let before = st.teacher.clone();
        dino_step(&mut st, &random_batch(4, 2, step), &cfg, m).unwrap();
        for (_, name, t) in st.teacher.iter() {
            assert!(
                t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)),
                "{name} has a gradient"
            );
        }
        for ((_, _, new), ((_, _, old), (_, _, s))) in st
            .teacher
            .iter()
            .zip(before.iter().zip(st.student.params.iter()))
        {
            for ((n, o), sv) in new.data().iter().zip(old.data()).zip(s.data()) {
                let expect = m as f32 * o + (1.0 - m as f32) * sv;
                assert!((n - expect).abs() <= 1e-6 * (1.0 + expect.abs()));
            }
        }
    }
}

#[test]
fn unit_momentum_freezes_the_teacher() {
    let cfg = tiny_dino_config(1e-2);
    let mut st = DinoState::new(tiny_dino_net(1), &cfg).unwrap();
    let initial = st.teacher.clone();
    let student0 = st.student.params.clone();
    for step in 0..5 {
        dino_step(&mut st, &random_batch(4, 2, step), &cfg, 1.0).unwrap();
    }
    assert_eq!(max_abs_diff(&initial, &st.teacher), 0.0);
    assert!(max_abs_diff(&student0, &st.student.params) > 0.0);
}

#[test]
fn identical_views_give_teacher_entropy() {
    let temp = 0.1;
    let cfg = DinoConfig {
        student_temp: temp,
        teacher_temp: temp,
        ..tiny_dino_config(1e-12)
    };
    let net = tiny_dino_net(5);
    let mut st = DinoState::new(net.clone(), &cfg).unwrap();
    let x = rand_tensor(&[4, 3, 8, 8], 9);
    let batch = DinoBatch {
        globals: vec![x.clone(), x.clone()],
        locals: vec![],
    };
    let logits = head_outputs(&net, &net.params, &x);
    let oracle: f64 = logits
        .data()
        .chunks(OUT)
        .map(|row| {
            let z: Vec<f64> = row.iter().map(|&v| v as f64 / temp).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            entropy(&z.iter().map(|v| (v - m).exp() / s).collect::<Vec<_>>())
        })
        .sum::<f64>()
        / 4.0;
    let rep = dino_step(&mut st, &batch, &cfg, 1.0).unwrap();
    assert!(
        (rep.loss as f64 - oracle).abs() < 1e-5,
        "{} vs {oracle}",
        rep.loss
    );
    assert!((rep.teacher_entropy - oracle).abs() < 1e-9);
}

#[test]
fn dino_step_needs_two_global_views() {
    let cfg = tiny_dino_config(1e-3);
    let mut st = DinoState::new(tiny_dino_net(0), &cfg).unwrap();
    let batch = DinoBatch {
        globals: vec![rand_tensor(&[2, 3, 8, 8], 0)],
        locals: vec![],
    };
    assert!(dino_step(&mut st, &batch, &cfg, 0.99).is_err());
}

#[test]
fn center_tracks_teacher_logit_mean() {
    let cfg = tiny_dino_config(1e-12);
    let net = tiny_dino_net(2);
    let mut st = DinoState::new(net.clone(), &cfg).unwrap();
    let batch = random_batch(3, 0, 4);
    let tout: Vec<f32> = batch
        .globals
        .iter()
        .flat_map(|g| head_outputs(&net, &st.teacher, g).into_data())
        .collect();
    dino_step(&mut st, &batch, &cfg, 1.0).unwrap();
    for j in 0..OUT {
        let mean = tout.chunks(OUT).map(|r| r[j] as f64).sum::<f64>() / 6.0;
        let expect = (1.0 - cfg.center_momentum) * mean;
        assert!((st.center[j] as f64 - expect).abs() < 1e-6);
    }
}

#[test]
fn teacher_momentum_schedule_endpoints() {
    let cfg = DinoConfig {
        teacher_momentum: (0.99, 1.0),
        ..DinoConfig::default()
    };
    assert!((teacher_momentum(&cfg, 0, 100) - 0.99).abs() < 1e-15);
    assert!((teacher_momentum(&cfg, 50, 100) - 0.995).abs() < 1e-12);
    assert_eq!(teacher_momentum(&cfg, 100, 100), 1.0);
    let mut prev = 0.0;
    for s in 0..=100 {
        let m = teacher_momentum(&cfg, s, 100);
        assert!(m >= prev);
        prev = m;
    }
}

#[test]
fn zero_initialized_head_starts_at_log_c() {
    for c in [2usize, 17, 16263] {
        let arch = Architecture {
            backbone: tiny_backbone(),
            head: HeadSpec::Linear {
                classes: c,
                zero_init: true,
            },
        };
        let net = Network::new(arch, 11).unwrap();
        let labels: Vec<usize> = (0..4).map(|i| (i * 7919) % c).collect();
        let loss =
            classification_loss(&net, &rand_tensor(&[4, 3, 8, 8], 1), &labels).unwrap() as f64;
        assert!((loss - (c as f64).ln()).abs() < 0.05, "C={c}: {loss}");
    }
}

#[test]
fn temporal_loss_falls_on_a_fixed_batch() {
    let arch = Architecture {
        backbone: tiny_backbone(),
        head: HeadSpec::Linear {
            classes: 4,
            zero_init: true,
        },
    };
    let mut net = Network::new(arch, 2).unwrap();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-2), &net.params).unwrap();
    let x = rand_tensor(&[8, 3, 8, 8], 4);
    let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
    let first = temporal_classification_step(&mut net, &mut opt, &x, &labels)
        .unwrap()
        .loss;
    let mut last = first;
    for _ in 0..60 {
        last = temporal_classification_step(&mut net, &mut opt, &x, &labels)
            .unwrap()
            .loss;
    }
    assert!((first as f64 - 4f64.ln()).abs() < 1e-5);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

fn small_data(seconds: f64, episode_s: f64) -> TrainingData {
    let world = build_world(&WorldSpec {
        frame_size: (16, 16),
        ..WorldSpec::default()
    })
    .unwrap();
    let index = StreamIndex::new(seconds, 2.0).unwrap();
    let subset = SubsetDescriptor {
        hours: index.hours(),
        fraction: 1.0,
        offset_s: 0.0,
        seed: 0,
    };
    render_training_data(&world, &index, episode_s, subset).unwrap()
}

fn small_config(algorithm: Algorithm) -> TrainConfig {
    let base = TrainConfig::default();
    TrainConfig {
        algorithm,
        backbone: tiny_backbone(),
        temporal: TemporalClassConfig {
            episode_length_s: 5.0,
            optimizer: OptimizerConfig::adam(3e-3),
            batch_size: 8,
            epochs: 8,
            augment: AugmentPolicy::mild(8),
        },
        dino: DinoConfig {
            multicrop: MultiCropSpec {
                n_local: 1,
                local_size: 4,
                ..MultiCropSpec::mild(8)
            },
            batch_size: 8,
            epochs: 2,
            ..tiny_dino_config(1e-3)
        },
        ..base
    }
}

#[test]
fn temporal_training_lowers_the_epoch_loss() {
    let data = small_data(20.0, 5.0);
    assert_eq!(data.num_episodes, 4);
    let out = train(&small_config(Algorithm::TemporalClassification), &data, 0).unwrap();
    let first = out.trace.first().unwrap().loss;
    let last = out.trace.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(10.0, 5.0);
    for alg in [Algorithm::TemporalClassification, Algorithm::Dino] {
        let cfg = small_config(alg);
        let paths: Vec<_> = [0u64, 0, 1]
            .iter()
            .enumerate()
            .map(|(i, &seed)| {
                let p = dir.path().join(format!("{}-{i}.bin", alg.as_str()));
                train(&cfg, &data, seed)
                    .unwrap()
                    .checkpoint
                    .save(&p)
                    .unwrap();
                std::fs::read(p).unwrap()
            })
            .collect();
        assert_eq!(paths[0], paths[1], "{alg:?}");
        assert_ne!(paths[0], paths[2], "{alg:?}");
    }
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(10.0, 5.0);
    for alg in [Algorithm::TemporalClassification, Algorithm::Dino] {
        let out = train(&small_config(alg), &data, 3).unwrap();
        let path = dir.path().join("ckpt.bin");
        out.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config, out.checkpoint.config);
        assert_eq!(back.config_hash, config_hash(&out.checkpoint.config));
        assert_eq!(back.subset, out.checkpoint.subset);
        assert_eq!(
            max_abs_diff(&back.network.params, &out.checkpoint.network.params),
            0.0
        );
        assert_eq!(back.teacher.is_some(), alg == Algorithm::Dino);
        let frames = preprocess(&data.frames[..3], 8);
        let a = out
            .checkpoint
            .eval_network()
            .unwrap()
            .logits(&frames)
            .unwrap();
        let b = back.eval_network().unwrap().logits(&frames).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn tampered_checkpoint_hash_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = train(
        &small_config(Algorithm::TemporalClassification),
        &small_data(10.0, 5.0),
        0,
    )
    .unwrap()
    .checkpoint;
    ck.config_hash = "0".repeat(64);
    assert!(ck.save(&dir.path().join("x.bin")).is_err());
}
