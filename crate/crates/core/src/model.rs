//! The four-stage Tint network.
//!
//! patch embed -> [positional] -> stage 1 (MBConv) -> downsample -> stage 2
//! -> downsample -> stage 3 -> downsample -> stage 4 (transformer blocks)
//! -> mean over tokens -> `v . w + b`.
//!
//! Stage resolutions are exactly input/4, /8, /16, /32.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::TransformerBlock;
use crate::error::{Error, Result};
use crate::nn::{Downsample, MBConv, PatchEmbed, PositionalEmbedding};
use crate::params::{BnUpdate, Forward, Init, Mode, ParamStore, INIT_STD};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub embed_dims: [usize; 4],
    pub depths: [usize; 4],
    /// Heads for stages 2-4.
    pub num_heads: [usize; 3],
    /// Window sizes for stages 2-4.
    pub window_sizes: [usize; 3],
    pub mlp_ratio: usize,
    pub mbconv_expand: usize,
    pub use_positional: bool,
    pub use_attention_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Smallest Tiny-ViT-style widths at 224 px input.
    fn default() -> Self {
        Self {
            input_size: 224,
            in_channels: 1,
            embed_dims: [64, 128, 160, 320],
            depths: [2, 2, 6, 2],
            num_heads: [4, 5, 10],
            window_sizes: [7, 14, 7],
            mlp_ratio: 4,
            mbconv_expand: 4,
            use_positional: true,
            use_attention_bias: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for gradient checks and fast CI training.
    pub fn test_config() -> Self {
        Self {
            input_size: 32,
            in_channels: 1,
            embed_dims: [8, 16, 16, 16],
            depths: [1, 1, 1, 1],
            num_heads: [2, 2, 2],
            window_sizes: [4, 2, 1],
            mlp_ratio: 4,
            mbconv_expand: 4,
            use_positional: true,
            use_attention_bias: true,
            seed: 0,
        }
    }

    /// Side length of the token grid at each stage.
    pub fn resolutions(&self) -> [usize; 4] {
        let s = self.input_size;
        [s / 4, s / 8, s / 16, s / 32]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=3).contains(&self.in_channels) {
            return bad(format!("in_channels must be 1-3, got {}", self.in_channels));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("input_size must be a positive multiple of 32, got {}", self.input_size));
        }
        if self.embed_dims.contains(&0) {
            return bad("embed_dims must be positive".into());
        }
        if self.mlp_ratio == 0 || self.mbconv_expand == 0 {
            return bad("mlp_ratio and mbconv_expand must be positive".into());
        }
        let res = self.resolutions();
        for s in 0..3 {
            let (dim, heads, win) = (self.embed_dims[s + 1], self.num_heads[s], self.window_sizes[s]);
            if heads == 0 || dim % heads != 0 {
                return bad(format!("embed_dims[{}]={dim} is not divisible by num_heads[{s}]={heads}", s + 1));
            }
            if win == 0 || res[s + 1] % win != 0 {
                return bad(format!(
                    "stage {} resolution {} is not divisible by window_sizes[{s}]={win}",
                    s + 2,
                    res[s + 1]
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum StageBlocks {
    Conv(Vec<MBConv>),
    Attention(Vec<TransformerBlock>),
}

#[derive(Clone, Debug)]
struct Stage {
    downsample: Option<Downsample>,
    blocks: StageBlocks,
}

#[derive(Clone, Debug)]
struct Architecture {
    patch_embed: PatchEmbed,
    positional: Option<PositionalEmbedding>,
    stages: Vec<Stage>,
}

impl Architecture {
    fn new(cfg: &ModelConfig) -> Self {
        let res = cfg.resolutions();
        let d = cfg.embed_dims;
        let patch_embed = PatchEmbed::new("patch_embed", cfg.in_channels, d[0]);
        let positional = cfg.use_positional.then(|| PositionalEmbedding {
            name: "pos_embed".into(),
            len: res[0] * res[0],
            dim: d[0],
        });
        let mut stages = vec![Stage {
            downsample: None,
            blocks: StageBlocks::Conv(
                (0..cfg.depths[0])
                    .map(|i| MBConv::new(&format!("stages.0.blocks.{i}"), d[0], cfg.mbconv_expand))
                    .collect(),
            ),
        }];
        for s in 1..4 {
            let blocks = (0..cfg.depths[s])
                .map(|i| {
                    TransformerBlock::new(
                        &format!("stages.{s}.blocks.{i}"),
                        d[s],
                        cfg.num_heads[s - 1],
                        cfg.window_sizes[s - 1],
                        cfg.mlp_ratio,
                        cfg.use_attention_bias,
                    )
                })
                .collect();
            stages.push(Stage {
                downsample: Some(Downsample::new(&format!("stages.{s}.downsample"), d[s - 1], d[s])),
                blocks: StageBlocks::Attention(blocks),
            });
        }
        Self {
            patch_embed,
            positional,
            stages,
        }
    }

    fn init(&self, cfg: &ModelConfig, store: &mut ParamStore, init: &mut Init) {
        self.patch_embed.init(store, init);
        if let Some(p) = &self.positional {
            p.init(store, init);
        }
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                ds.init(store, init);
            }
            match &stage.blocks {
                StageBlocks::Conv(b) => b.iter().for_each(|b| b.init(store, init)),
                StageBlocks::Attention(b) => b.iter().for_each(|b| b.init(store, init)),
            }
        }
        let c4 = cfg.embed_dims[3];
        store.insert_param("head.weight", init.trunc_normal(&[c4], INIT_STD));
        store.insert_param("head.bias", init.zeros(&[]));
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Patch-embedded tokens `[B, L, C1]` before the positional table.
    pub patch_tokens: Var,
    /// Tokens entering stage 1 (after the positional table, if enabled).
    pub embedded: Var,
    /// Input to each stage (after its downsample), `[B, C, H, W]`.
    pub stage_inputs: Vec<Var>,
    /// Output of each stage, `[B, C, H, W]`.
    pub stage_outputs: Vec<Var>,
    /// Pooled image features `[B, C4]`.
    pub pooled: Var,
    /// Predicted intensity per image `[B]`.
    pub pred: Var,
}

pub struct ForwardOutput {
    pub trace: ForwardTrace,
    pub bn_updates: Vec<BnUpdate>,
    /// Tape node of every parameter the pass read, by name.
    pub params: BTreeMap<String, Var>,
}

impl ForwardOutput {
    pub fn pred(&self) -> Var {
        self.trace.pred
    }
}

/// Mean over the token grid of `x [B, C, H, W]`, then `v . w + b` with the
/// `head.weight [C]` and `head.bias []` parameters. Returns `(pooled, pred)`.
pub fn regression_head(f: &mut Forward, x: Var) -> Result<(Var, Var)> {
    let xs = f.tape.shape(x)?.to_vec();
    if xs.len() != 4 {
        return Err(Error::InvalidShape {
            shape: xs,
            reason: "head expects [B, C, H, W]".into(),
        });
    }
    let (b, c) = (xs[0], xs[1]);
    let tokens = f.tape.reshape(x, &[b, c, xs[2] * xs[3]])?;
    let pooled = f.tape.mean(tokens, 2)?;
    let w = f.param("head.weight")?;
    let bias = f.param("head.bias")?;
    let w_col = f.tape.reshape(w, &[c, 1])?;
    let y = f.tape.matmul(pooled, w_col)?;
    let y = f.tape.reshape(y, &[b])?;
    let pred = f.tape.add(y, bias)?;
    Ok((pooled, pred))
}

#[derive(Clone, Debug)]
pub struct TintModel {
    config: ModelConfig,
    arch: Architecture,
    store: ParamStore,
}

impl PartialEq for TintModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.store == other.store
    }
}

impl TintModel {
    /// Builds and seeds a float32 model.
    pub fn build(config: ModelConfig) -> Result<Self> {
        Self::build_with_dtype(config, DType::F32)
    }

    pub fn build_with_dtype(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed, dtype);
        arch.init(&config, &mut store, &mut init);
        Ok(Self { config, arch, store })
    }

    /// Reassembles a model from a config and a complete parameter store.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let template = Self::build(config.clone())?;
        let expect_p: Vec<_> = template.store.params().keys().collect();
        let got_p: Vec<_> = store.params().keys().collect();
        let expect_b: Vec<_> = template.store.buffers().keys().collect();
        let got_b: Vec<_> = store.buffers().keys().collect();
        if expect_p != got_p || expect_b != got_b {
            return Err(Error::Corrupt("parameter names do not match the model config".into()));
        }
        for (name, t) in template.store.params().iter().chain(template.store.buffers()) {
            let other = store.params().get(name).or_else(|| store.buffers().get(name)).expect("checked names");
            if other.shape() != t.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    other.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            arch: template.arch,
            config,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.count_params()
    }

    pub fn to_dtype(&self, dtype: DType) -> TintModel {
        Self {
            config: self.config.clone(),
            arch: self.arch.clone(),
            store: self.store.to_dtype(dtype),
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.param("head.bias").map(Tensor::dtype).unwrap_or(DType::F32)
    }

    /// Forward on a fresh binding of every parameter.
    pub fn forward(&self, tape: &mut Tape, images: Var, mode: Mode) -> Result<ForwardOutput> {
        let mut f = Forward::new(tape, &self.store, mode);
        let trace = self.forward_in(&mut f, images)?;
        Ok(ForwardOutput {
            trace,
            bn_updates: f.take_updates(),
            params: f.bound().clone(),
        })
    }

    /// Forward through a caller-supplied context (for parameter overrides).
    pub fn forward_in(&self, f: &mut Forward, images: Var) -> Result<ForwardTrace> {
        let s = f.tape.shape(images)?.to_vec();
        let cfg = &self.config;
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_size || s[3] != cfg.input_size {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: s,
                rhs: vec![cfg.in_channels, cfg.input_size, cfg.input_size],
            });
        }
        let b = s[0];
        let (patch_tokens, (gh, gw)) = self.arch.patch_embed.forward(f, images)?;
        let embedded = match &self.arch.positional {
            Some(p) => p.forward(f, patch_tokens)?,
            None => patch_tokens,
        };
        let c0 = cfg.embed_dims[0];
        let x = f.tape.permute(embedded, &[0, 2, 1])?;
        let mut x = f.tape.reshape(x, &[b, c0, gh, gw])?;

        let mut stage_inputs = Vec::with_capacity(4);
        let mut stage_outputs = Vec::with_capacity(4);
        for stage in &self.arch.stages {
            if let Some(ds) = &stage.downsample {
                x = ds.forward(f, x)?;
            }
            stage_inputs.push(x);
            match &stage.blocks {
                StageBlocks::Conv(blocks) => {
                    for blk in blocks {
                        x = blk.forward(f, x)?;
                    }
                }
                StageBlocks::Attention(blocks) => {
                    let mut t = f.tape.permute(x, &[0, 2, 3, 1])?;
                    for blk in blocks {
                        t = blk.forward(f, t)?;
                    }
                    x = f.tape.permute(t, &[0, 3, 1, 2])?;
                }
            }
            stage_outputs.push(x);
        }

        let (pooled, pred) = regression_head(f, x)?;
        Ok(ForwardTrace {
            patch_tokens,
            embedded,
            stage_inputs,
            stage_outputs,
            pooled,
            pred,
        })
    }

    /// Eval-mode predictions for a `[B, Cin, S, S]` batch.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.to_dtype(self.dtype()));
        let mut f = Forward::new(&mut tape, &self.store, Mode::Eval).frozen();
        let trace = self.forward_in(&mut f, x)?;
        Ok(tape.value(trace.pred)?.data().to_vec())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        self.store.apply_bn_updates(updates)
    }
}
