//! Training loop, evaluation, checkpoints and saliency end to end.

use std::collections::BTreeMap;
use std::path::Path;

use tint_core::checkpoint::Checkpoint;
use tint_core::data::synth::{generate, SynthConfig};
use tint_core::data::{Manifest, SplitData};
use tint_core::error::Error;
use tint_core::model::{ModelConfig, TintModel};
use tint_core::params::{Mode, ParamStore};
use tint_core::tape::Tape;
use tint_core::tensor::{DType, Tensor};
use tint_core::train::{
    adam_step, evaluate, fit, mse_loss, saliency, AdamState, EpochRecord, FitOptions, TrainConfig, LOG_FILE,
};

fn dataset(dir: &Path, count: usize, seed: u64) -> Manifest {
    let cfg = SynthConfig {
        count,
        seed,
        size: 40,
        sigma: (2.0, 8.0),
        frames_per_storm: 2,
        ..SynthConfig::default()
    };
    generate(&cfg, dir).unwrap()
}

fn quick_cfg(epochs: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        base_lr: 1e-3,
        decay_epochs: vec![2],
        ..TrainConfig::default()
    }
}

#[test]
fn lr_zero_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 20, 1);
    let train = SplitData::load(&m, "train").unwrap();
    let mut model = TintModel::build(ModelConfig::test_config()).unwrap();
    let before = model.store().params().clone();
    let cfg = TrainConfig {
        base_lr: 0.0,
        init_head_bias: false,
        ..quick_cfg(1)
    };
    fit(&mut model, &train, None, &cfg, FitOptions::default()).unwrap();
    for (n, t) in &before {
        assert!(model.store().param(n).unwrap().bit_eq(t), "{n}");
    }
}

#[test]
fn data_order_is_irrelevant_when_nothing_updates() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 20, 2);
    let train = SplitData::load(&m, "train").unwrap();
    let run = |shuffle: bool| {
        let mut model = TintModel::build(ModelConfig::test_config()).unwrap();
        let cfg = TrainConfig {
            base_lr: 0.0,
            shuffle,
            ..quick_cfg(2)
        };
        fit(&mut model, &train, None, &cfg, FitOptions::default()).unwrap();
        model.store().params().clone()
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data_dir = tempfile::tempdir().unwrap();
    let m = dataset(data_dir.path(), 30, 3);
    let train = SplitData::load(&m, "train").unwrap();
    let val = SplitData::load(&m, "val").unwrap();
    let cfg = quick_cfg(4);

    let full_dir = tempfile::tempdir().unwrap();
    let mut full = TintModel::build(ModelConfig::test_config()).unwrap();
    let opts = FitOptions {
        out_dir: Some(full_dir.path()),
        ..FitOptions::default()
    };
    let full_report = fit(&mut full, &train, Some(&val), &cfg, opts).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut part = TintModel::build(ModelConfig::test_config()).unwrap();
    let opts = FitOptions {
        out_dir: Some(part_dir.path()),
        ..FitOptions::default()
    };
    let first = fit(&mut part, &train, Some(&val), &TrainConfig { epochs: 2, ..cfg.clone() }, opts).unwrap();
    let ck = Checkpoint::load(part_dir.path().join("last.ckpt")).unwrap();
    let mut resumed = ck.model;
    let opts = FitOptions {
        out_dir: Some(part_dir.path()),
        resume: ck.train_state,
        ..FitOptions::default()
    };
    let second = fit(&mut resumed, &train, Some(&val), &cfg, opts).unwrap();

    let joined: Vec<EpochRecord> = first.log.into_iter().chain(second.log).collect();
    assert_eq!(joined, full_report.log);
    assert_eq!(resumed, full);
    let read = |d: &Path| std::fs::read(d.join(LOG_FILE)).unwrap();
    assert_eq!(read(part_dir.path()), read(full_dir.path()));
    assert_eq!(
        std::fs::read(part_dir.path().join("last.ckpt")).unwrap(),
        std::fs::read(full_dir.path().join("last.ckpt")).unwrap()
    );
}

#[test]
fn small_step_decreases_batch_loss() {
    let mut failures = 0;
    for seed in 0..20 {
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::test_config()
        };
        let mut model = TintModel::build(cfg).unwrap();
        let x = tint_core::params::Init::new(100 + seed, DType::F32).normal(&[4, 1, 32, 32], 1.0);
        let y = Tensor::f32(vec![4], vec![30.0, 60.0, 90.0, 120.0]).unwrap();
        let loss_of = |model: &TintModel| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = model.forward(&mut tape, xv, Mode::Train).unwrap();
            let t = tape.constant(y.clone());
            let l = mse_loss(&mut tape, out.pred(), t).unwrap();
            (tape, out.params, l)
        };
        let (mut tape, params, l) = loss_of(&model);
        let before = tape.value(l).unwrap().item();
        tape.backward(l).unwrap();
        let grads: BTreeMap<String, Tensor> = params.iter().map(|(n, &v)| (n.clone(), tape.grad(v).unwrap().unwrap())).collect();
        adam_step(model.store_mut(), &grads, &mut AdamState::default(), 1e-4, &TrainConfig::default()).unwrap();
        let (tape, _, l) = loss_of(&model);
        if tape.value(l).unwrap().item() >= before {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} seeds failed to decrease the loss");
}

#[test]
fn adam_matches_hand_evaluation() {
    let mut store = ParamStore::new();
    store.insert_param("p", Tensor::f64(vec![1], vec![0.5]).unwrap());
    let mut grads = BTreeMap::new();
    grads.insert("p".to_string(), Tensor::f64(vec![1], vec![0.2]).unwrap());
    let cfg = TrainConfig::default();
    let mut st = AdamState::default();
    adam_step(&mut store, &grads, &mut st, 0.01, &cfg).unwrap();
    // m = 0.1*0.2, v = 0.001*0.04, m_hat = 0.2, v_hat = 0.04
    let expect1 = 0.5 - 0.01 * 0.2 / (0.2 + 1e-8);
    assert!((store.param("p").unwrap().item() - expect1).abs() < 1e-15);
    grads.insert("p".to_string(), Tensor::f64(vec![1], vec![-0.4]).unwrap());
    adam_step(&mut store, &grads, &mut st, 0.01, &cfg).unwrap();
    let m: f64 = 0.9 * 0.02 + 0.1 * -0.4;
    let v: f64 = 0.999 * 0.00004 + 0.001 * 0.16;
    let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
    let expect2 = expect1 - 0.01 * mh / (vh.sqrt() + 1e-8);
    assert!((store.param("p").unwrap().item() - expect2).abs() < 1e-15);
}

#[test]
fn divergence_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = dataset(dir.path(), 20, 4);
    for e in m.splits.get_mut("train").unwrap() {
        e.intensity = 1e300;
    }
    let train = SplitData::load(&m, "train").unwrap();
    let mut model = TintModel::build(ModelConfig::test_config()).unwrap();
    let cfg = TrainConfig {
        init_head_bias: false,
        ..quick_cfg(1)
    };
    let err = fit(&mut model, &train, None, &cfg, FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Diverged(ref m) if m.contains("step 1")), "{err}");
    assert!(err.is_numeric());
}

fn label_std(labels: &[f64]) -> (f64, f64) {
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let var = labels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / labels.len() as f64;
    (mean, var.sqrt())
}

#[test]
fn constant_head_rmse_is_label_std() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 40, 5);
    let train = SplitData::load(&m, "train").unwrap();
    let (mean, std) = label_std(&train.labels());
    let mut model = TintModel::build_with_dtype(ModelConfig::test_config(), DType::F64).unwrap();
    model.store_mut().param_mut("head.weight").unwrap().data_mut().fill(0.0);
    model.store_mut().param_mut("head.bias").unwrap().data_mut()[0] = mean;
    let r = evaluate(&model, &train, 7).unwrap();
    assert!((r.rmse - std).abs() < 1e-9, "{} vs {std}", r.rmse);

    let mut doubled = train.clone();
    doubled.entries.extend(train.entries.clone());
    doubled.images.extend(train.images.clone());
    let r2 = evaluate(&model, &doubled, 7).unwrap();
    assert!((r2.rmse - r.rmse).abs() < 1e-12);

    let mut empty = train.clone();
    empty.truncate(0);
    assert!(evaluate(&model, &empty, 7).is_err());
}

#[test]
fn evaluate_is_idempotent_and_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 30, 6);
    let train = SplitData::load(&m, "train").unwrap();
    let model = TintModel::build(ModelConfig::test_config()).unwrap();
    let a = evaluate(&model, &train, 5).unwrap();
    assert_eq!(a, evaluate(&model, &train, 5).unwrap());
    let mut rev = train.clone();
    rev.entries.reverse();
    rev.images.reverse();
    let b = evaluate(&model, &rev, 5).unwrap();
    assert!((a.rmse - b.rmse).abs() < 1e-9);
}

#[test]
fn saliency_maps() {
    let model = TintModel::build(ModelConfig::test_config()).unwrap();
    let x = tint_core::params::Init::new(1, DType::F32).normal(&[1, 32, 32], 1.0);
    let s = saliency(&model, &x).unwrap();
    assert!(!s.degenerate);
    assert!(s.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(s.map.data().iter().cloned().fold(0.0, f64::max), 1.0);

    let mut flat = model.clone();
    flat.store_mut().param_mut("head.weight").unwrap().data_mut().fill(0.0);
    let s = saliency(&flat, &x).unwrap();
    assert!(s.degenerate);
    assert!(s.map.data().iter().all(|&v| v == 0.0));
}

#[test]
fn synthetic_normalization_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(
        &SynthConfig {
            count: 30,
            seed: 7,
            ..SynthConfig::default()
        },
        dir.path(),
    )
    .unwrap();
    let train = SplitData::load(&m, "train").unwrap();
    let all: Vec<f64> = train.images.iter().flat_map(|t| t.data().to_vec()).collect();
    let (mean, std) = label_std(&all);
    assert!(mean.abs() <= 0.05, "{mean}");
    assert!((std - 1.0).abs() <= 0.1, "{std}");

    let again = tempfile::tempdir().unwrap();
    generate(
        &SynthConfig {
            count: 30,
            seed: 7,
            ..SynthConfig::default()
        },
        again.path(),
    )
    .unwrap();
    for e in m.split("train").iter().chain(m.split("test")) {
        assert_eq!(std::fs::read(m.resolve(e)).unwrap(), std::fs::read(again.path().join(&e.path)).unwrap());
    }
    assert_eq!(
        std::fs::read(dir.path().join("manifest.json")).unwrap(),
        std::fs::read(again.path().join("manifest.json")).unwrap()
    );
}
