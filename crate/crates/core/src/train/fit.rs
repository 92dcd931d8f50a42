use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::checkpoint::{Checkpoint, Normalization};
use crate::data::{make_batches, BatchOptions, SplitData};
use crate::error::{Error, Result};
use crate::model::TintModel;
use crate::params::Mode;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{adam_step, evaluate, lr_at_epoch, mse_loss, TrainConfig, TrainState};

pub const LOG_FILE: &str = "train_log.tsv";
pub const LOG_HEADER: &str = "epoch\tstep\tlr\ttrain_loss\tval_rmse";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    pub lr: f64,
    /// Sample-weighted mean of the batch losses.
    pub train_loss: f64,
    /// NaN when there is no validation split.
    pub val_rmse: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_rmse
        )
    }
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Receives `train_log.tsv`, `last.ckpt`, `best.ckpt` and periodic
    /// snapshots.
    pub out_dir: Option<&'a Path>,
    /// Continue from a saved state; `model` must hold the matching weights.
    pub resume: Option<TrainState>,
    /// Stored in every checkpoint written.
    pub normalization: Option<Normalization>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

#[derive(Debug)]
pub struct FitReport {
    pub log: Vec<EpochRecord>,
    pub state: TrainState,
    /// Weights with the lowest validation RMSE (the final weights when there
    /// is no validation split).
    pub best: TintModel,
}

fn diverged(epoch: u64, step: u64, what: &str) -> Error {
    Error::Diverged(format!("{what} at step {step} (epoch {epoch})"))
}

/// One optimizer step on `images`/`labels`; returns the batch loss.
fn train_step(
    model: &mut TintModel,
    images: Tensor,
    labels: &[f64],
    state: &mut TrainState,
    lr: f64,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<f64> {
    let step = state.step + 1;
    let numeric = |e: Error| {
        if e.is_numeric() {
            diverged(epoch, step, &e.to_string())
        } else {
            e
        }
    };
    let dtype = model.dtype();
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let out = model.forward(&mut tape, x, Mode::Train).map_err(numeric)?;
    let target = tape.constant(Tensor::new(vec![labels.len()], labels.to_vec(), dtype)?);
    let loss = mse_loss(&mut tape, out.pred(), target).map_err(numeric)?;
    let loss_value = tape.value(loss)?.item();
    if !loss_value.is_finite() {
        return Err(diverged(epoch, step, "non-finite loss"));
    }
    tape.backward(loss).map_err(numeric)?;
    let mut grads = BTreeMap::new();
    for (name, &var) in &out.params {
        let g = tape.grad(var)?.expect("parameters always receive gradients");
        if !g.is_finite() {
            return Err(diverged(epoch, step, &format!("non-finite gradient for `{name}`")));
        }
        grads.insert(name.clone(), g);
    }
    adam_step(model.store_mut(), &grads, &mut state.adam, lr, cfg)?;
    model.apply_bn_updates(&out.bn_updates)?;
    state.step = step;
    Ok(loss_value)
}

fn save_ckpt(dir: &Path, name: &str, model: &TintModel, norm: &Option<Normalization>, state: &TrainState) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        normalization: norm.clone(),
        train_state: Some(state.clone()),
    }
    .save(dir.join(name))
}

/// Trains `model` in place for epochs `[state.next_epoch, cfg.epochs)`.
///
/// Batch order and augmentation depend only on `(cfg.seed, epoch)`, so a
/// run resumed from `last.ckpt` reproduces the uninterrupted run exactly.
pub fn fit(
    model: &mut TintModel,
    train: &SplitData,
    val: Option<&SplitData>,
    cfg: &TrainConfig,
    mut opts: FitOptions,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val = val.filter(|v| !v.is_empty());
    let fresh = opts.resume.is_none();
    let mut state = opts.resume.take().unwrap_or_default();
    if fresh {
        state.rng_seed = cfg.seed;
    } else if state.rng_seed != cfg.seed {
        return Err(Error::Config(format!(
            "resumed run was seeded with {}, not {}",
            state.rng_seed, cfg.seed
        )));
    }

    if fresh && cfg.init_head_bias {
        let mean = train.labels().iter().sum::<f64>() / train.len() as f64;
        let b = model.store_mut().param_mut("head.bias")?;
        b.data_mut()[0] = mean;
        b.round_in_place();
    }

    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join(LOG_FILE);
        if fresh || !log.exists() {
            fs::write(&log, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&log, e))?;
        }
    }

    let mut log = Vec::new();
    let mut best: Option<TintModel> = None;
    for epoch in state.next_epoch..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let bopts = BatchOptions {
            batch_size: cfg.batch_size,
            input_size: model.config().input_size,
            shuffle_seed: cfg.shuffle.then_some(cfg.seed),
            augment_seed: cfg.augment.then_some(cfg.seed),
            epoch,
            dtype: model.dtype(),
        };
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in make_batches(train, &bopts)? {
            let batch = batch?;
            let n = batch.labels.len();
            let loss = train_step(model, batch.images, &batch.labels, &mut state, lr, cfg, epoch)?;
            loss_sum += loss * n as f64;
            seen += n;
        }
        let val_rmse = match val {
            Some(v) => evaluate(model, v, cfg.eval_batch_size)?.rmse,
            None => f64::NAN,
        };
        state.next_epoch = epoch + 1;
        let record = EpochRecord {
            epoch,
            step: state.step,
            lr,
            train_loss: loss_sum / seen as f64,
            val_rmse,
        };

        let improved = val.is_some() && state.best_val_rmse.is_none_or(|b| val_rmse < b);
        if improved {
            state.best_val_rmse = Some(val_rmse);
            state.best_epoch = Some(epoch);
            best = Some(model.clone());
        }
        if let Some(dir) = opts.out_dir {
            let path = dir.join(LOG_FILE);
            let mut f = OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", record.to_line()).map_err(|e| Error::io(&path, e))?;
            save_ckpt(dir, LAST_CKPT, model, &opts.normalization, &state)?;
            if improved || val.is_none() {
                save_ckpt(dir, BEST_CKPT, model, &opts.normalization, &state)?;
            }
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_ckpt(dir, &format!("epoch_{:04}.ckpt", epoch + 1), model, &opts.normalization, &state)?;
            }
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        log.push(record);
    }

    let best = match best {
        Some(m) if val.is_some() => m,
        _ => match opts.out_dir.map(|d| d.join(BEST_CKPT)).filter(|p| p.exists() && val.is_some()) {
            Some(p) => Checkpoint::load(p)?.model,
            None => model.clone(),
        },
    };
    Ok(FitReport { log, state, best })
}
