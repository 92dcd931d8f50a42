//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N [name]: PASS|FAIL ...` line to stderr.
//!
//! Run with `cargo test -p tint-cli --test acceptance -- --nocapture`
//! (the lines go to stderr directly, so they show up either way).

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tint_core::attention::{scaled_dot_attention, AttentionWeights, TransformerBlock};
use tint_core::checkpoint::{Checkpoint, Normalization};
use tint_core::data::container::{decode, encode, read_tensor_file, write_tensor_file};
use tint_core::data::synth::{generate, SynthConfig};
use tint_core::data::{ManifestEntry, Modality, SplitData};
use tint_core::model::{ModelConfig, TintModel};
use tint_core::params::{Forward, Init, Mode, ParamStore};
use tint_core::tape::Tape;
use tint_core::tensor::{DType, Tensor};
use tint_core::train::{
    evaluate, fit, lr_at_epoch, read_pgm, rmse, write_pgm, AdamState, FitOptions, Saliency, TrainConfig, TrainState,
};

fn report(n: u32, name: &str, pass: bool, detail: &str) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} [{name}]: {verdict} {detail}");
    pass
}

fn tint(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tint")).args(args).output().unwrap()
}

/// Population standard deviation by the textbook two-pass method.
fn two_pass_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mut sum = 0.0;
    for x in xs {
        sum += x;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for x in xs {
        ss += (x - mean) * (x - mean);
    }
    (mean, (ss / n).sqrt())
}

/// RMSE of a constant predictor `c`, by residuals then mean square.
fn two_pass_rmse(pred: &[f64], target: &[f64]) -> f64 {
    let residuals: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let mut ss = 0.0;
    for r in &residuals {
        ss += r * r;
    }
    (ss / residuals.len() as f64).sqrt()
}

#[test]
fn criterion_01_gradient_fidelity() {
    let started = Instant::now();
    let out = tint(&["gradcheck", "--preset", "test", "--seed", "0", "--eps", "1e-5"]);
    let secs = started.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let mut worst_block = (String::new(), 0.0f64);
    let mut model_err = f64::NAN;
    let mut blocks = Vec::new();
    for line in text.lines().filter(|l| l.starts_with("block=")) {
        let field = |k: &str| {
            line.split(' ')
                .find_map(|kv| kv.strip_prefix(&format!("{k}=")))
                .unwrap()
                .to_string()
        };
        let name = field("block");
        let err: f64 = field("max_rel_error").parse().unwrap();
        if name == "full_model_mse" {
            model_err = err;
        } else if err >= worst_block.1 {
            worst_block = (name.clone(), err);
        }
        blocks.push(name);
    }
    let required = [
        "patch_embed",
        "mbconv",
        "downsample",
        "window_attention",
        "depthwise_conv",
        "mlp",
        "layer_norm",
        "batch_norm_train",
        "batch_norm_eval",
        "head",
        "full_model_mse",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !blocks.iter().any(|b| b == r)).collect();
    let pass = out.status.code() == Some(0)
        && missing.is_empty()
        && worst_block.1 < 1e-4
        && model_err < 1e-3
        && secs < 300.0;
    let detail = format!(
        "worst block {}={:.2e} (< 1e-4), full model={:.2e} (< 1e-3), {} blocks, missing {:?}, {:.0}s (< 300s)",
        worst_block.0,
        worst_block.1,
        model_err,
        blocks.len(),
        missing,
        secs
    );
    assert!(report(1, "gradient fidelity", pass, &detail), "{text}");
}

/// `Z + softmax(Z Wq (Z Wk)^T / sqrt(C)) Z Wv` written out with loops.
fn literal_attention(z: &[f64], l: usize, c: usize, wq: &[f64], wk: &[f64], wv: &[f64]) -> Vec<f64> {
    let proj = |w: &[f64]| {
        let mut out = vec![0.0; l * c];
        for i in 0..l {
            for j in 0..c {
                for k in 0..c {
                    out[i * c + j] += z[i * c + k] * w[k * c + j];
                }
            }
        }
        out
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let mut out = z.to_vec();
    for i in 0..l {
        let logits: Vec<f64> = (0..l)
            .map(|j| (0..c).map(|t| q[i * c + t] * k[j * c + t]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..l {
            for t in 0..c {
                out[i * c + t] += e[j] / s * v[j * c + t];
            }
        }
    }
    out
}

#[test]
fn criterion_02_attention_equation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, l, c) = (2, 9, 8);
    let mut rand = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::f64(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let z = rand(&[b, l, c]);
    let (wq, wk, wv) = (rand(&[c, c]), rand(&[c, c]), rand(&[c, c]));
    let eye = Tensor::f64(vec![c, c], (0..c * c).map(|i| f64::from(u8::from(i / c == i % c))).collect()).unwrap();
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let w = AttentionWeights {
        wq: tape.constant(wq.clone()),
        wk: tape.constant(wk.clone()),
        wv: tape.constant(wv.clone()),
        wo: tape.constant(eye),
        heads: 1,
    };
    let msa = scaled_dot_attention(&mut tape, zv, &w, None).unwrap();
    let out = tape.add(zv, msa).unwrap();
    let got = tape.value(out).unwrap().data().to_vec();
    let mut max_err = 0.0f64;
    for n in 0..b {
        let zs = &z.data()[n * l * c..(n + 1) * l * c];
        let expect = literal_attention(zs, l, c, wq.data(), wk.data(), wv.data());
        for (a, e) in got[n * l * c..(n + 1) * l * c].iter().zip(&expect) {
            max_err = max_err.max((a - e).abs());
        }
    }
    let pass = max_err <= 1e-10;
    assert!(report(2, "attention equation", pass, &format!("max |diff|={max_err:.2e} (<= 1e-10)")));
}

#[test]
fn criterion_03_identity_by_construction() {
    let mut identity_ok = true;
    for mode in [Mode::Train, Mode::Eval] {
        let mut model = TintModel::build(ModelConfig::test_config()).unwrap();
        let names: Vec<String> = model
            .store()
            .params()
            .keys()
            .filter(|n| {
                n.starts_with("stages.")
                    && !n.contains("downsample")
                    && (n.ends_with("conv3.conv.weight")
                        || n.ends_with("attn.wo")
                        || n.ends_with("local_conv.conv.weight")
                        || n.ends_with("fc2.weight")
                        || n.ends_with("fc2.bias"))
            })
            .cloned()
            .collect();
        for n in &names {
            model.store_mut().param_mut(n).unwrap().data_mut().fill(0.0);
        }
        let x = Init::new(3, DType::F32).normal(&[2, 1, 32, 32], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, xv, mode).unwrap();
        let t = &out.trace;
        let emb = tape.value(t.embedded).unwrap().clone();
        let s0 = tape.value(t.stage_inputs[0]).unwrap().clone();
        let grid = tint_core::ops::permute(&s0.reshaped(&[2, 8, 64]).unwrap(), &[0, 2, 1]).unwrap();
        identity_ok &= grid.bit_eq(&emb);
        for (i, o) in t.stage_inputs.iter().zip(&t.stage_outputs) {
            identity_ok &= tape.value(*i).unwrap().bit_eq(tape.value(*o).unwrap());
        }
    }

    let k = 87.25;
    let mut model = TintModel::build(ModelConfig::test_config()).unwrap();
    model.store_mut().param_mut("head.weight").unwrap().data_mut().fill(0.0);
    model.store_mut().param_mut("head.bias").unwrap().data_mut()[0] = k;
    let mut init = Init::new(4, DType::F32);
    let mut head_ok = true;
    for scale in [1e-3, 1.0, 50.0] {
        let x = init.normal(&[3, 1, 32, 32], scale);
        head_ok &= model.predict(&x).unwrap() == vec![k; 3];
    }
    let pass = identity_ok && head_ok;
    let detail = format!("zero-branch stages are exact identities: {identity_ok}; head w=0,b={k} predicts exactly {k}: {head_ok}");
    assert!(report(3, "identity by construction", pass, &detail));
}

fn block_forward(blk: &TransformerBlock, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut f = Forward::new(&mut tape, store, Mode::Eval).frozen();
    let out = blk.forward(&mut f, xv).unwrap();
    tape.value(out).unwrap().clone()
}

/// Moves token `(r, c)` of a `[1, 4, 4, C]` grid to `dest(r, c)`.
fn move_tokens(x: &Tensor, dest: &dyn Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let c = x.shape()[3];
    let mut out = vec![0.0; x.numel()];
    for r in 0..4 {
        for col in 0..4 {
            let (r2, c2) = dest(r, col);
            out[(r2 * 4 + c2) * c..(r2 * 4 + c2 + 1) * c].copy_from_slice(&x.data()[(r * 4 + col) * c..(r * 4 + col + 1) * c]);
        }
    }
    Tensor::new(x.shape().to_vec(), out, x.dtype()).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Largest deviation from equivariance over all 576 window-preserving
/// permutations (window order x in-window order) of a 4x4 grid.
fn equivariance_error(stage: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> f64 {
    let y = stage(x);
    let perms = permutations(4);
    let place = |win: usize, pos: usize| ((win / 2) * 2 + pos / 2, (win % 2) * 2 + pos % 2);
    let mut worst = 0.0f64;
    for wp in &perms {
        for pp in &perms {
            let dest = |r: usize, c: usize| place(wp[(r / 2) * 2 + c / 2], pp[(r % 2) * 2 + c % 2]);
            worst = worst.max(stage(&move_tokens(x, &dest)).max_abs_diff(&move_tokens(&y, &dest)));
        }
    }
    worst
}

#[test]
fn criterion_04_window_permutation_equivariance() {
    let cfg = ModelConfig {
        use_positional: false,
        use_attention_bias: false,
        ..ModelConfig::test_config()
    };
    let mut full = 0.0f64;
    let mut token_mixing = 0.0f64;
    for s in 0..3 {
        let dim = cfg.embed_dims[s + 1];
        let blk = TransformerBlock::new(&format!("stage{}", s + 2), dim, cfg.num_heads[s], 2, cfg.mlp_ratio, false);
        let mut store = ParamStore::new();
        blk.init(&mut store, &mut Init::new(40 + s as u64, DType::F64));
        let x = Init::new(50 + s as u64, DType::F64).normal(&[1, 4, 4, dim], 1.0);
        full = full.max(equivariance_error(&|t| block_forward(&blk, &store, t), &x));

        // Same block with its 3x3 depthwise convolution branch switched off.
        let mut no_conv = store.clone();
        for (n, t) in no_conv.params_mut() {
            if n.contains("local_conv.conv") {
                t.data_mut().fill(0.0);
            }
        }
        token_mixing = token_mixing.max(equivariance_error(&|t| block_forward(&blk, &no_conv, t), &x));
    }
    let pass = full <= 1e-6;
    let detail = format!(
        "stages 2-4 as built: max |diff|={full:.2e} (<= 1e-6); attention+MLP path alone: {token_mixing:.2e}"
    );
    assert!(report(4, "permutation equivariance", pass, &detail));
}

fn synth_splits(dir: &Path, count: usize) -> (SplitData, SplitData, SplitData) {
    let m = generate(&SynthConfig { count, ..SynthConfig::default() }, dir).unwrap();
    let load = |s: &str| SplitData::load(&m, s).unwrap();
    (load("train"), load("val"), load("test"))
}

#[test]
fn criterion_05_overfit() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _, _) = synth_splits(dir.path(), 40);
    let mut model = TintModel::build(ModelConfig::test_config()).unwrap();
    let initial = evaluate(&model, &train, 32).unwrap().rmse;
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 32,
        base_lr: 1e-3,
        decay_epochs: vec![],
        augment: false,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let rep = fit(&mut model, &train, None, &cfg, FitOptions::default()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let last = evaluate(&model, &train, 32).unwrap().rmse;
    let (_, label_std) = two_pass_std(&train.labels());
    let ratio = last / initial;
    let pass = train.len() == 32 && rep.state.step == 500 && ratio < 0.05 && secs < 600.0;
    let detail = format!(
        "train RMSE {initial:.2} -> {last:.3} after {} steps = {:.2}% of initial (< 5%); {:.2}% of train label std {label_std:.2}; {secs:.0}s (< 600s)",
        rep.state.step,
        100.0 * ratio,
        100.0 * last / label_std
    );
    assert!(report(5, "overfit", pass, &detail));
}

#[test]
fn criterion_06_generalization() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val, test) = synth_splits(dir.path(), 640);
    let mut model = TintModel::build(ModelConfig::test_config()).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        base_lr: 1e-3,
        decay_epochs: vec![],
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let rep = fit(&mut model, &train, Some(&val), &cfg, FitOptions::default()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let held_out = evaluate(&rep.best, &test, 32).unwrap().rmse;

    let (train_mean, _) = two_pass_std(&train.labels());
    let test_labels = test.labels();
    let baseline = two_pass_rmse(&vec![train_mean; test_labels.len()], &test_labels);
    let (_, test_std) = two_pass_std(&test_labels);
    let ratio = held_out / baseline;
    let pass = train.len() == 512 && rep.log.len() == 30 && ratio <= 0.5 && secs < 1800.0;
    let detail = format!(
        "test RMSE {held_out:.3} vs mean predictor {baseline:.3} = {:.1}% (<= 50%); test label std {test_std:.3}; {} test samples; {secs:.0}s (< 1800s)",
        100.0 * ratio,
        test_labels.len()
    );
    assert!(report(6, "generalization", pass, &detail));
}

#[test]
fn criterion_07_recipe_fidelity() {
    let cfg = TrainConfig::default();
    let lrs = [lr_at_epoch(&cfg, 49), lr_at_epoch(&cfg, 50), lr_at_epoch(&cfg, 75)];
    let pass = lrs == [1e-5, 1e-6, 1e-7] && cfg.epochs == 100 && cfg.batch_size == 32;
    let detail = format!(
        "lr(49,50,75)={:?}, epochs={}, batch={}",
        lrs, cfg.epochs, cfg.batch_size
    );
    assert!(report(7, "recipe fidelity", pass, &detail));
}

#[test]
fn criterion_08_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = tint(&["synth", "--out", data.to_str().unwrap(), "--n", "48", "--seed", "8", "--size", "48"]);
    assert_eq!(o.status.code(), Some(0));
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = tint(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--preset",
            "test",
            "--epochs",
            "3",
            "--batch-size",
            "8",
            "--lr",
            "0.001",
            "--seed",
            "21",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        // Result lines that name the output directory necessarily differ.
        let marker = out.to_str().unwrap().to_string();
        let lines: Vec<String> = String::from_utf8(o.stdout)
            .unwrap()
            .lines()
            .filter(|l| !l.contains(&marker))
            .map(String::from)
            .collect();
        (out, lines)
    };
    let (a, out_a) = run("a");
    let (b, out_b) = run("b");
    let files = ["train_log.tsv", "last.ckpt", "best.ckpt", "config.toml"];
    let mut differing = Vec::new();
    let mut bytes = 0;
    for f in files {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        bytes += x.len();
        if x != y {
            differing.push(f);
        }
    }
    let pass = differing.is_empty() && out_a == out_b;
    let detail = format!("{} files, {bytes} bytes compared; differing: {differing:?}; stdout equal: {}", files.len(), out_a == out_b);
    assert!(report(8, "determinism", pass, &detail));
}

fn random_f32(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return f64::from(v);
        }
    }
}

#[test]
fn criterion_09_format_round_trips() {
    let cases = 128;
    let mut runner = TestRunner::new(Config::with_cases(cases));
    let tnsr = runner.run(
        &(prop::collection::vec(1usize..6, 0..=4), any::<u64>()),
        |(shape, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let t = Tensor::f32(shape, (0..n).map(|_| random_f32(&mut rng)).collect()).unwrap();
            let bytes = encode(&t).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert!(back.bit_eq(&t));
            prop_assert_eq!(encode(&back).unwrap(), bytes);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.tnsr");
            write_tensor_file(&p, &t).unwrap();
            prop_assert!(read_tensor_file(&p).unwrap().bit_eq(&t));
            Ok(())
        },
    );

    let mut runner = TestRunner::new(Config::with_cases(cases));
    let ckpt = runner.run(&(any::<u64>(), any::<bool>(), any::<bool>()), |(seed, norm, state)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = TintModel::build(ModelConfig { seed, ..ModelConfig::test_config() }).unwrap();
        for (_, t) in model.store_mut().params_mut() {
            for v in t.data_mut() {
                *v = random_f32(&mut rng);
            }
        }
        let adam = AdamState {
            t: rng.random_range(0..10_000),
            m: model.store().params().clone(),
            v: model.store().params().clone(),
        };
        let mut ck = Checkpoint::new(model);
        if norm {
            ck.normalization = Some(Normalization {
                modalities: vec![Modality::PMW],
                channel_mean: vec![rng.random_range(-300.0..300.0)],
                channel_std: vec![rng.random_range(0.1..80.0)],
            });
        }
        if state {
            ck.train_state = Some(TrainState {
                next_epoch: rng.random_range(0..100),
                step: rng.random(),
                best_val_rmse: Some(rng.random_range(0.0..50.0)),
                best_epoch: Some(rng.random_range(0..100)),
                rng_seed: rng.random(),
                adam,
            });
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        for (name, t) in ck.model.store().params() {
            prop_assert!(back.model.store().param(name).unwrap().bit_eq(t), "{}", name);
        }
        prop_assert_eq!(&back.normalization, &ck.normalization);
        prop_assert_eq!(&back.train_state, &ck.train_state);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        Ok(())
    });

    let mut runner = TestRunner::new(Config::with_cases(cases));
    let pgm = runner.run(
        &(1usize..40, 1usize..40, any::<u64>(), any::<bool>()),
        |(h, w, seed, degenerate)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels: Vec<u8> = (0..h * w).map(|_| rng.random()).collect();
            let map = Tensor::f64(vec![h, w], pixels.iter().map(|&p| f64::from(p) / 255.0).collect()).unwrap();
            let s = Saliency { map, degenerate };
            let dir = tempfile::tempdir().unwrap();
            let (p1, p2) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
            write_pgm(&p1, &s).unwrap();
            let back = read_pgm(&p1).unwrap();
            prop_assert_eq!((back.width, back.height, back.maxval), (w, h, 255));
            prop_assert_eq!(&back.pixels, &pixels);
            let flag = format!("degenerate={degenerate}");
            prop_assert!(back.comments.iter().any(|c| c.contains(&flag)));
            let again = Saliency {
                map: Tensor::f64(vec![h, w], back.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()).unwrap(),
                degenerate,
            };
            write_pgm(&p2, &again).unwrap();
            prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
            Ok(())
        },
    );

    fn status<E: std::fmt::Display>(r: &Result<(), E>) -> String {
        match r {
            Ok(()) => "ok".to_string(),
            Err(e) => e.to_string(),
        }
    }
    let pass = tnsr.is_ok() && ckpt.is_ok() && pgm.is_ok();
    let detail = format!(
        "{cases} cases each; TNSR: {}; checkpoint: {}; PGM: {}",
        status(&tnsr),
        status(&ckpt),
        status(&pgm)
    );
    assert!(report(9, "format round trips", pass, &detail));
}

#[test]
fn criterion_10_rmse_oracle() {
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut model = TintModel::build(ModelConfig::test_config()).unwrap();
    // Initial weights are small enough that every image would get nearly
    // the same prediction; widen them so the residuals vary.
    for (name, t) in model.store_mut().params_mut() {
        let spread = if name.starts_with("head.weight") { 40.0 } else { 0.5 };
        for v in t.data_mut() {
            *v += rng.random_range(-spread..spread);
        }
        t.round_in_place();
    }
    model.store_mut().param_mut("head.bias").unwrap().data_mut()[0] = 80.0;

    let mut images = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let (offset, scale) = (rng.random_range(-3.0..3.0), rng.random_range(0.1..3.0));
        let pixels = (0..1024).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect();
        images.push(Tensor::f32(vec![1, 32, 32], pixels).unwrap());
        entries.push(ManifestEntry {
            path: format!("rand/{i:04}.tnsr"),
            intensity: rng.random_range(20.0..160.0),
            storm_id: format!("s{}", i / 10),
            frame_index: (i % 10) as u32,
        });
    }
    let data = SplitData { entries, images };
    let report_eval = evaluate(&model, &data, 64).unwrap();

    // Independent predictions, one frame at a time.
    let preds: Vec<f64> = data
        .images
        .iter()
        .map(|img| model.predict(&img.reshaped(&[1, 1, 32, 32]).unwrap()).unwrap()[0])
        .collect();
    let labels = data.labels();
    let naive = two_pass_rmse(&preds, &labels);
    let eval_err = (report_eval.rmse - naive).abs();

    // The same comparison on free-standing random pairs.
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..200.0)).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..200.0)).collect();
    let pair_err = (rmse(&p, &t).unwrap() - two_pass_rmse(&p, &t)).abs();

    let spread = two_pass_std(&preds).1;
    let pass = eval_err <= 1e-9 && pair_err <= 1e-9 && spread > 1.0;
    let detail = format!(
        "evaluate() rmse {:.6} vs naive {naive:.6}: |diff|={eval_err:.1e}; random pairs |diff|={pair_err:.1e} (<= 1e-9); prediction std {spread:.2}",
        report_eval.rmse
    );
    assert!(report(10, "rmse oracle", pass, &detail));
}
