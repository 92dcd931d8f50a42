//! Convolutional and token-wise building blocks: patch embedding, positional
//! embedding, MBConv, downsampling, linear layers, LayerNorm and the MLP.
//!
//! Each block is a small description (name prefix plus hyperparameters) that
//! knows how to create its parameters in a [`ParamStore`] and how to run its
//! forward pass through a [`Forward`] context.

use crate::error::{Error, Result};
use crate::params::{Forward, Init, ParamStore, INIT_STD, LN_EPS};
use crate::tape::Var;

/// Bias-free convolution followed by BatchNorm (a conv bias would be
/// cancelled by the batch mean subtraction).
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvBn {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(name, channels, channels, kernel, stride, pad)
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        let n = &self.name;
        let w = [self.cout, self.cin / self.groups, self.kernel, self.kernel];
        store.insert_param(format!("{n}.conv.weight"), init.trunc_normal(&w, INIT_STD));
        store.insert_param(format!("{n}.bn.weight"), init.ones(&[self.cout]));
        store.insert_param(format!("{n}.bn.bias"), init.zeros(&[self.cout]));
        store.insert_buffer(format!("{n}.bn.running_mean"), init.zeros(&[self.cout]));
        store.insert_buffer(format!("{n}.bn.running_var"), init.ones(&[self.cout]));
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.conv.weight", self.name))?;
        let y = f.tape.conv2d(x, w, None, self.stride, self.pad, self.groups)?;
        f.batch_norm(&format!("{}.bn", self.name), y)
    }
}

fn channels_of(f: &Forward, x: Var, op: &'static str, expected: usize) -> Result<[usize; 4]> {
    let s = f.tape.shape(x)?;
    if s.len() != 4 || s[1] != expected {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![expected],
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Two stride-2 3x3 convolutions (each with BatchNorm and GELU), then the
/// spatial grid is flattened into a token sequence.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
}

impl PatchEmbed {
    pub fn new(name: &str, in_channels: usize, dim: usize) -> Self {
        let mid = (dim / 2).max(1);
        Self {
            conv1: ConvBn::new(format!("{name}.conv1"), in_channels, mid, 3, 2, 1),
            conv2: ConvBn::new(format!("{name}.conv2"), mid, dim, 3, 2, 1),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        self.conv1.init(store, init);
        self.conv2.init(store, init);
    }

    /// `[B, Cin, H, W] -> ([B, H/4 * W/4, C], (H/4, W/4))`.
    pub fn forward(&self, f: &mut Forward, image: Var) -> Result<(Var, (usize, usize))> {
        let [b, _, h, w] = channels_of(f, image, "patch_embed", self.conv1.cin)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidShape {
                shape: vec![h, w],
                reason: "patch embedding needs spatial extents divisible by 4".into(),
            });
        }
        let y = self.conv1.forward(f, image)?;
        let y = f.tape.gelu(y)?;
        let y = self.conv2.forward(f, y)?;
        let y = f.tape.gelu(y)?;
        let (gh, gw) = (h / 4, w / 4);
        let c = self.conv2.cout;
        let y = f.tape.reshape(y, &[b, c, gh * gw])?;
        let tokens = f.tape.permute(y, &[0, 2, 1])?;
        Ok((tokens, (gh, gw)))
    }
}

/// Learnable `[L, C]` table added to every image's token sequence.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    pub name: String,
    pub len: usize,
    pub dim: usize,
}

impl PositionalEmbedding {
    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        store.insert_param(self.name.clone(), init.normal(&[self.len, self.dim], INIT_STD));
    }

    pub fn forward(&self, f: &mut Forward, tokens: Var) -> Result<Var> {
        let table = f.param(&self.name)?;
        add_positional(f, tokens, table)
    }
}

/// `tokens [B, L, C] + table [L, C]`, broadcast over the batch.
pub fn add_positional(f: &mut Forward, tokens: Var, table: Var) -> Result<Var> {
    let ts = f.tape.shape(tokens)?.to_vec();
    let ps = f.tape.shape(table)?.to_vec();
    if ts.len() != 3 || ps.len() != 2 || ts[1..] != ps[..] {
        return Err(Error::ShapeMismatch {
            op: "add_positional",
            lhs: ts,
            rhs: ps,
        });
    }
    f.tape.add(tokens, table)
}

/// Inverted bottleneck: 1x1 expand, 3x3 depthwise, 1x1 project, with a
/// residual around the whole branch.
#[derive(Clone, Debug)]
pub struct MBConv {
    pub dim: usize,
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub project: ConvBn,
}

impl MBConv {
    pub fn new(name: &str, dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio;
        Self {
            dim,
            expand: ConvBn::new(format!("{name}.conv1"), dim, hidden, 1, 1, 0),
            depthwise: ConvBn::depthwise(format!("{name}.conv2"), hidden, 3, 1, 1),
            project: ConvBn::new(format!("{name}.conv3"), hidden, dim, 1, 1, 0),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        self.expand.init(store, init);
        self.depthwise.init(store, init);
        self.project.init(store, init);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        channels_of(f, x, "mbconv", self.dim)?;
        let y = self.expand.forward(f, x)?;
        let y = f.tape.gelu(y)?;
        let y = self.depthwise.forward(f, y)?;
        let y = f.tape.gelu(y)?;
        let y = self.project.forward(f, y)?;
        f.tape.add(x, y)
    }
}

/// Halves the resolution and moves to the next stage's width:
/// 1x1 expand, 3x3 depthwise stride 2, 1x1 project.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub project: ConvBn,
}

impl Downsample {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            expand: ConvBn::new(format!("{name}.conv1"), in_dim, out_dim, 1, 1, 0),
            depthwise: ConvBn::depthwise(format!("{name}.conv2"), out_dim, 3, 2, 1),
            project: ConvBn::new(format!("{name}.conv3"), out_dim, out_dim, 1, 1, 0),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        self.expand.init(store, init);
        self.depthwise.init(store, init);
        self.project.init(store, init);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let [_, _, h, w] = channels_of(f, x, "downsample", self.expand.cin)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: vec![h, w],
                reason: "downsample needs even spatial extents".into(),
            });
        }
        let y = self.expand.forward(f, x)?;
        let y = f.tape.gelu(y)?;
        let y = self.depthwise.forward(f, y)?;
        let y = f.tape.gelu(y)?;
        self.project.forward(f, y)
    }
}

/// `x @ W + b` over the last axis, `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        store.insert_param(format!("{}.weight", self.name), init.trunc_normal(&[self.din, self.dout], INIT_STD));
        store.insert_param(format!("{}.bias", self.name), init.zeros(&[self.dout]));
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.weight", self.name))?;
        let b = f.param(&format!("{}.bias", self.name))?;
        let y = f.tape.matmul(x, w)?;
        f.tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        store.insert_param(format!("{}.weight", self.name), init.ones(&[self.dim]));
        store.insert_param(format!("{}.bias", self.name), init.zeros(&[self.dim]));
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let g = f.param(&format!("{}.weight", self.name))?;
        let b = f.param(&format!("{}.bias", self.name))?;
        f.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Pre-norm MLP branch: `fc2(gelu(fc1(LN(x))))`, no residual.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, dim: usize, ratio: usize) -> Self {
        Self {
            norm: LayerNorm::new(format!("{name}.norm"), dim),
            fc1: Linear::new(format!("{name}.fc1"), dim, dim * ratio),
            fc2: Linear::new(format!("{name}.fc2"), dim * ratio, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        self.norm.init(store, init);
        self.fc1.init(store, init);
        self.fc2.init(store, init);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let s = f.tape.shape(x)?;
        if s.last() != Some(&self.norm.dim) {
            return Err(Error::ShapeMismatch {
                op: "mlp_block",
                lhs: s.to_vec(),
                rhs: vec![self.norm.dim],
            });
        }
        let y = self.norm.forward(f, x)?;
        let y = self.fc1.forward(f, y)?;
        let y = f.tape.gelu(y)?;
        self.fc2.forward(f, y)
    }
}
