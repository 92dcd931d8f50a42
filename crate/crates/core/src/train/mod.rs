//! Optimization, evaluation and attribution.

mod adam;
mod eval;
mod fit;
mod saliency;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub use adam::{adam_step, AdamState};
pub use eval::{evaluate, write_predictions, EvalReport, Prediction};
pub use fit::{fit, EpochRecord, FitOptions, FitReport, LOG_FILE, LOG_HEADER};
pub use saliency::{read_pgm, saliency, write_pgm, Pgm, Saliency, SALIENCY_METHOD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<u64>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds shuffling and augmentation.
    pub seed: u64,
    pub shuffle: bool,
    pub augment: bool,
    /// Also keep `epoch_NNNN.ckpt` every this many epochs (0 = never).
    pub checkpoint_every: u64,
    /// On a fresh run, start the head bias at the mean training label.
    pub init_head_bias: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            base_lr: 1e-5,
            decay_epochs: vec![50, 75],
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            shuffle: true,
            augment: true,
            checkpoint_every: 0,
            init_head_bias: true,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training config: {m}")));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be finite and non-negative");
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs must be strictly increasing");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad("decay_factor must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

/// Step schedule: `base_lr * decay_factor^k`, `k` = decay epochs reached.
///
/// The product is rounded to 15 significant digits so decimal schedules
/// land on the decimal value (`1e-5 * 0.1` is `1e-6`, not one ulp above).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: u64) -> f64 {
    let k = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    let lr = cfg.base_lr * cfg.decay_factor.powi(k as i32);
    format!("{lr:.14e}").parse().unwrap_or(lr)
}

/// Everything besides the weights needed to continue a run exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub next_epoch: u64,
    pub step: u64,
    pub best_val_rmse: Option<f64>,
    pub best_epoch: Option<u64>,
    /// Seed of the shuffle/augmentation streams; every per-epoch stream is
    /// derived from it, so it is the whole random state of a run.
    pub rng_seed: u64,
    pub adam: AdamState,
}

/// Mean squared error between a `[B]` prediction and a `[B]` target.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (p, t) = (tape.shape(pred)?.to_vec(), tape.shape(target)?.to_vec());
    if p != t || p.len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: p,
            rhs: t,
        });
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Data(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Tensor};

    #[test]
    fn schedule_steps_at_decay_epochs() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = [0, 49, 50, 74, 75, 99].iter().map(|&e| lr_at_epoch(&cfg, e)).collect();
        let expect = [1e-5, 1e-5, 1e-6, 1e-6, 1e-7, 1e-7];
        assert_eq!(lrs, expect);
    }

    #[test]
    fn mse_and_rmse_agree() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![2], vec![1.0, 4.0], DType::F64).unwrap());
        let t = tape.constant(Tensor::new(vec![2], vec![2.0, 2.0], DType::F64).unwrap());
        let l = mse_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l).unwrap().item(), 2.5);
        assert_eq!(rmse(&[1.0, 4.0], &[2.0, 2.0]).unwrap(), 2.5f64.sqrt());
        assert!(rmse(&[], &[]).is_err());
    }
}
