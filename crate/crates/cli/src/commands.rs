use std::path::Path;

use tint_core::checkpoint::{Checkpoint, Normalization};
use tint_core::data::container::read_tensor_file;
use tint_core::data::preprocess::{clean_and_normalize, resize_bilinear};
use tint_core::data::synth::{generate, SynthConfig};
use tint_core::data::{Manifest, Modality, SplitData};
use tint_core::gradcheck::check_blocks;
use tint_core::train::{self, evaluate, fit, write_pgm, write_predictions, FitOptions, SALIENCY_METHOD};
use tint_core::{Tensor, TintModel};

use crate::config::RunConfig;
use crate::{CliError, EvalArgs, GradcheckArgs, PredictArgs, SaliencyArgs, SynthArgs, TrainArgs};

type CmdResult = Result<(), CliError>;

fn parse_channels(list: &str) -> Result<Vec<Modality>, CliError> {
    let out: Vec<Modality> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Modality::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(e.to_string()))?;
    if out.is_empty() {
        return Err(CliError::usage("--channels must name at least one modality"));
    }
    Ok(out)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        count: a.n,
        seed: a.seed,
        size: a.size,
        frames_per_storm: a.frames_per_storm,
        modalities: parse_channels(&a.channels)?,
        ..SynthConfig::default()
    };
    eprintln!("resolved: {cfg:?}");
    println!("seed={}", cfg.seed);
    let m = generate(&cfg, &a.out)?;
    println!("channels={}", join(&m.modalities));
    for s in ["train", "val", "test"] {
        println!("split_{s}={}", m.split(s).len());
    }
    println!("manifest={}", a.out.join(tint_core::data::manifest::MANIFEST_FILE).display());
    Ok(())
}

/// Indices into the manifest's modalities for `wanted` (all when `None`).
fn channel_indices(m: &Manifest, wanted: Option<&[Modality]>) -> Result<Vec<usize>, CliError> {
    match wanted {
        None => Ok((0..m.channels()).collect()),
        Some(list) => list
            .iter()
            .map(|w| {
                m.modalities
                    .iter()
                    .position(|x| x == w)
                    .ok_or_else(|| CliError::data(format!("dataset has no {w} channel (has {})", join(&m.modalities))))
            })
            .collect(),
    }
}

fn load_split(m: &Manifest, split: &str, channels: &[usize]) -> Result<SplitData, CliError> {
    let mut d = SplitData::load(m, split)?;
    d.select_channels(channels)?;
    Ok(d)
}

fn normalization(m: &Manifest, channels: &[usize]) -> Normalization {
    Normalization {
        modalities: channels.iter().map(|&i| m.modalities[i]).collect(),
        channel_mean: channels.iter().map(|&i| m.channel_mean[i]).collect(),
        channel_std: channels.iter().map(|&i| m.channel_std[i]).collect(),
    }
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut rc = RunConfig::resolve(a.preset, a.config.as_deref())?;
    if let Some(v) = a.epochs {
        rc.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        rc.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        rc.train.base_lr = v;
    }
    if let Some(v) = a.seed {
        rc.train.seed = v;
        rc.model.seed = v;
    }
    if a.no_augment {
        rc.train.augment = false;
    }
    let manifest = Manifest::load(&a.data)?;
    let wanted = a.channels.as_deref().map(parse_channels).transpose()?;
    let channels = channel_indices(&manifest, wanted.as_deref())?;
    rc.model.in_channels = channels.len();
    rc.model.validate()?;
    rc.train.validate()?;

    let text = rc.to_toml();
    eprintln!("resolved config:\n{text}");
    println!("seed={}", rc.train.seed);
    println!("channels={}", join(&normalization(&manifest, &channels).modalities));
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
    let cfg_path = a.out.join("config.toml");
    std::fs::write(&cfg_path, &text).map_err(|e| CliError::data(format!("{}: {e}", cfg_path.display())))?;

    let train_data = load_split(&manifest, "train", &channels)?;
    let val_data = load_split(&manifest, "val", &channels)?;
    let (mut model, resume) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model.config() != &rc.model {
                return Err(CliError::usage("resume checkpoint was trained with a different model config"));
            }
            let state = ck
                .train_state
                .ok_or_else(|| CliError::data(format!("{} holds no training state", p.display())))?;
            (ck.model, Some(state))
        }
        None => (TintModel::build(rc.model.clone())?, None),
    };
    eprintln!("parameters: {}", model.count_params());
    let mut progress = |r: &train::EpochRecord| {
        eprintln!(
            "epoch {:>4}  step {:>7}  lr {:.1e}  train_loss {:.4}  val_rmse {:.4}",
            r.epoch, r.step, r.lr, r.train_loss, r.val_rmse
        )
    };
    let opts = FitOptions {
        out_dir: Some(&a.out),
        resume,
        normalization: Some(normalization(&manifest, &channels)),
        on_epoch: Some(&mut progress),
    };
    let report = fit(&mut model, &train_data, Some(&val_data), &rc.train, opts)?;
    println!("epochs_run={}", report.log.len());
    println!("steps={}", report.state.step);
    if let Some(last) = report.log.last() {
        println!("final_train_loss={}", last.train_loss);
        println!("final_val_rmse={}", last.val_rmse);
    }
    if let Some(b) = report.state.best_val_rmse {
        println!("best_val_rmse={b}");
        println!("best_epoch={}", report.state.best_epoch.unwrap_or_default());
    }
    println!("log={}", a.out.join(train::LOG_FILE).display());
    println!("checkpoint={}", a.out.join("best.ckpt").display());
    Ok(())
}

fn checkpoint_channels(m: &Manifest, ck: &Checkpoint) -> Result<Vec<usize>, CliError> {
    let want = ck.normalization.as_ref().map(|n| n.modalities.clone());
    let idx = channel_indices(m, want.as_deref())?;
    if idx.len() != ck.model.config().in_channels {
        return Err(CliError::data(format!(
            "model expects {} channels, dataset provides {}",
            ck.model.config().in_channels,
            idx.len()
        )));
    }
    Ok(idx)
}

pub fn eval(a: EvalArgs) -> CmdResult {
    eprintln!("resolved: {a:?}");
    let ck = Checkpoint::load(&a.ckpt)?;
    let manifest = Manifest::load(&a.data)?;
    if !tint_core::data::manifest::SPLITS.contains(&a.split.as_str()) {
        return Err(CliError::usage(format!("unknown split `{}`", a.split)));
    }
    let channels = checkpoint_channels(&manifest, &ck)?;
    let data = load_split(&manifest, &a.split, &channels)?;
    let report = evaluate(&ck.model, &data, a.batch_size.max(1))?;
    println!("split={}", a.split);
    println!("samples={}", report.predictions.len());
    println!("rmse_knots={}", report.rmse);
    println!("mae_knots={}", report.mae);
    if let Some(p) = &a.residuals {
        write_predictions(p, &report)?;
        println!("residuals={}", p.display());
    }
    Ok(())
}

/// Frames of a `[C, H, W]` or `[N, C, H, W]` file, normalized and resized
/// for `ck`'s model.
fn load_frames(path: &Path, ck: &Checkpoint) -> Result<Vec<Tensor>, CliError> {
    let t = read_tensor_file(path)?;
    let s = t.shape().to_vec();
    let (n, c, h, w) = match s.len() {
        3 => (1, s[0], s[1], s[2]),
        4 => (s[0], s[1], s[2], s[3]),
        _ => return Err(CliError::data(format!("expected a [C, H, W] or [N, C, H, W] tensor, found {s:?}"))),
    };
    let cfg = ck.model.config();
    if c != cfg.in_channels {
        return Err(CliError::data(format!("input has {c} channels, model expects {}", cfg.in_channels)));
    }
    let (mean, std) = match &ck.normalization {
        Some(nz) => (nz.channel_mean.clone(), nz.channel_std.clone()),
        None => {
            eprintln!("warning: checkpoint stores no normalization; using raw values");
            (vec![0.0; c], vec![1.0; c])
        }
    };
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let frame = Tensor::new(vec![c, h, w], t.data()[i * per..(i + 1) * per].to_vec(), t.dtype())?;
            let x = clean_and_normalize(&frame, &mean, &std)?;
            Ok(resize_bilinear(&x, cfg.input_size)?)
        })
        .collect()
}

pub fn predict(a: PredictArgs) -> CmdResult {
    eprintln!("resolved: {a:?}");
    let ck = Checkpoint::load(&a.ckpt)?;
    for frame in load_frames(&a.input, &ck)? {
        let batch = frame.reshaped(&[1, frame.shape()[0], frame.shape()[1], frame.shape()[2]])?;
        let p = ck.model.predict(&batch)?;
        println!("intensity_knots={}", p[0]);
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let rc = RunConfig::resolve(a.preset, a.config.as_deref())?;
    eprintln!("resolved: {a:?}\nmodel: {:?}", rc.model);
    println!("seed={}", a.seed);
    let started = std::time::Instant::now();
    let checks = check_blocks(&rc.model, a.seed, a.eps)?;
    let mut failed = 0;
    for c in &checks {
        let limit = if c.name == "full_model_mse" { a.model_threshold } else { a.threshold };
        let ok = c.max_rel_error < limit;
        failed += usize::from(!ok);
        println!(
            "block={} max_rel_error={:e} threshold={:e} worst={} coords={} status={}",
            c.name,
            c.max_rel_error,
            limit,
            c.worst,
            c.coords,
            if ok { "pass" } else { "fail" }
        );
    }
    println!("seconds={:.1}", started.elapsed().as_secs_f64());
    println!("gradcheck={}", if failed == 0 { "pass" } else { "fail" });
    if failed > 0 {
        return Err(CliError {
            code: 3,
            message: format!("{failed} gradient check(s) above threshold"),
        });
    }
    Ok(())
}

pub fn saliency(a: SaliencyArgs) -> CmdResult {
    eprintln!("resolved: {a:?}");
    let ck = Checkpoint::load(&a.ckpt)?;
    let frames = load_frames(&a.input, &ck)?;
    let frame = frames
        .get(a.frame)
        .ok_or_else(|| CliError::usage(format!("--frame {} out of range ({} frames)", a.frame, frames.len())))?;
    let s = train::saliency(&ck.model, frame)?;
    write_pgm(&a.out, &s)?;
    if s.degenerate {
        eprintln!("warning: zero input gradient; saliency map is uniformly zero (degenerate)");
    }
    println!("method={SALIENCY_METHOD}");
    println!("degenerate={}", s.degenerate);
    println!("saliency={}", a.out.display());
    Ok(())
}
