//! Named parameter storage and the per-forward binding context.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{DType, Tensor};

/// BatchNorm running-average momentum (weight on the previous value).
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
/// Std of the (truncated) normal used for weights and positional tables.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable parameters plus non-trainable buffers (BatchNorm running stats),
/// both keyed by canonical dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t.with_requires_grad(false));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn count_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn to_dtype(&self, dtype: DType) -> ParamStore {
        let conv = |m: &BTreeMap<String, Tensor>| m.iter().map(|(k, v)| (k.clone(), v.to_dtype(dtype))).collect();
        ParamStore {
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }

    /// Folds measured batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var)] {
                let name = format!("{}.{suffix}", u.prefix);
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::UnknownParam(name.clone()))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
                buf.round_in_place();
            }
        }
        Ok(())
    }
}

/// Batch statistics recorded by one training-mode BatchNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub prefix: String,
    pub stats: BatchStats,
}

/// Binds store entries to tape leaves on first use during a forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    updates: Vec<BnUpdate>,
    trainable: bool,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            bound: BTreeMap::new(),
            mode,
            updates: Vec::new(),
            trainable: true,
        }
    }

    /// Registers parameters as constants (no gradient bookkeeping).
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Overrides the tape node used for `name`.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.param(name)?.clone();
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn take_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.updates)
    }

    /// BatchNorm over the channel axis (axis 1) under the current mode.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.buffer(&format!("{prefix}.running_mean"))?;
                let var = self.store.buffer(&format!("{prefix}.running_var"))?;
                self.tape.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Init {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// N(0, std^2) resampled until inside +-2 std.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data, self.dtype).expect("positive extents")
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Tensor::new(shape.to_vec(), data, self.dtype).expect("positive extents")
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data, self.dtype).expect("positive extents")
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape, self.dtype)
    }

    pub fn ones(&self, shape: &[usize]) -> Tensor {
        Tensor::ones(shape, self.dtype)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_is_clipped_and_seeded() {
        let a = Init::new(7, DType::F32).trunc_normal(&[1000], INIT_STD);
        let b = Init::new(7, DType::F32).trunc_normal(&[1000], INIT_STD);
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD + 1e-9));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::new();
        store.insert_buffer("bn.running_mean", Tensor::zeros(&[1], DType::F64));
        store.insert_buffer("bn.running_var", Tensor::ones(&[1], DType::F64));
        let upd = BnUpdate {
            prefix: "bn".into(),
            stats: BatchStats {
                mean: vec![2.0],
                var: vec![3.0],
            },
        };
        store.apply_bn_updates(&[upd]).unwrap();
        assert!((store.buffer("bn.running_mean").unwrap().item() - 0.2).abs() < 1e-12);
        assert!((store.buffer("bn.running_var").unwrap().item() - 1.2).abs() < 1e-12);
    }
}
