//! Multi-head self-attention over non-overlapping windows, relative-position
//! attention bias, and the transformer block that wraps them.
//!
//! Per head `h`: `A_h = softmax(Q_h K_h^T / sqrt(d) + B_h) V_h`, with
//! `Q = Z W_q`, `K = Z W_k`, `V = Z W_v` and `d = C / m`. Head outputs are
//! concatenated and projected by `W_O`. The residual is added by the caller
//! once around the whole multi-head output.

use crate::error::{Error, Result};
use crate::nn::{ConvBn, LayerNorm, Mlp};
use crate::params::{Forward, Init, ParamStore, INIT_STD};
use crate::tape::{Tape, Var};

/// Projection handles for one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

fn head_split(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x)?.to_vec();
    let (n, l, c) = (s[0], s[1], s[2]);
    let y = tape.reshape(x, &[n, l, heads, c / heads])?;
    tape.permute(y, &[0, 2, 1, 3])
}

/// Attention probabilities `[N, m, L, L]`; every row sums to one.
pub fn attention_probs(tape: &mut Tape, z: Var, w: &AttentionWeights, bias: Option<Var>) -> Result<Var> {
    let (q, k, _) = project_qkv(tape, z, w, bias)?;
    logits_softmax(tape, q, k, w.heads, bias)
}

fn project_qkv(tape: &mut Tape, z: Var, w: &AttentionWeights, bias: Option<Var>) -> Result<(Var, Var, Var)> {
    let zs = tape.shape(z)?.to_vec();
    if zs.len() != 3 {
        return Err(Error::InvalidShape {
            shape: zs,
            reason: "attention expects [N, L, C]".into(),
        });
    }
    let (l, c) = (zs[1], zs[2]);
    if w.heads == 0 || c % w.heads != 0 {
        return Err(Error::Config(format!("width {c} is not divisible by {} heads", w.heads)));
    }
    for (name, v) in [("W_q", w.wq), ("W_k", w.wk), ("W_v", w.wv), ("W_O", w.wo)] {
        if tape.shape(v)? != [c, c] {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: tape.shape(v)?.to_vec(),
                rhs: vec![c, c],
            });
        }
    }
    if let Some(b) = bias {
        if tape.shape(b)? != [w.heads, l, l] {
            return Err(Error::ShapeMismatch {
                op: "attention bias",
                lhs: tape.shape(b)?.to_vec(),
                rhs: vec![w.heads, l, l],
            });
        }
    }
    let q = tape.matmul(z, w.wq)?;
    let k = tape.matmul(z, w.wk)?;
    let v = tape.matmul(z, w.wv)?;
    Ok((
        head_split(tape, q, w.heads)?,
        head_split(tape, k, w.heads)?,
        head_split(tape, v, w.heads)?,
    ))
}

fn logits_softmax(tape: &mut Tape, q: Var, k: Var, heads: usize, bias: Option<Var>) -> Result<Var> {
    let d = tape.shape(q)?[3];
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    if let Some(b) = bias {
        logits = tape.add(logits, b)?;
    }
    debug_assert_eq!(tape.shape(logits)?[1], heads);
    tape.softmax(logits, 3)
}

/// Multi-head self-attention output `[N, L, C]`, without residual.
pub fn scaled_dot_attention(tape: &mut Tape, z: Var, w: &AttentionWeights, bias: Option<Var>) -> Result<Var> {
    let zs = tape.shape(z)?.to_vec();
    let (q, k, v) = project_qkv(tape, z, w, bias)?;
    let p = logits_softmax(tape, q, k, w.heads, bias)?;
    let heads_out = tape.matmul(p, v)?;
    let merged = tape.permute(heads_out, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &zs)?;
    tape.matmul(merged, w.wo)
}

fn window_dims(shape: &[usize], w: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected [B, H, W, C]".into(),
        });
    }
    let (b, h, wd, c) = (shape[0], shape[1], shape[2], shape[3]);
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("spatial extents not divisible by window size {w}"),
        });
    }
    Ok((b, h, wd, c))
}

/// `[B, H, W, C] -> [B * (H/w) * (W/w), w*w, C]`, windows and the tokens
/// inside each window both in row-major order.
pub fn window_partition(tape: &mut Tape, x: Var, w: usize) -> Result<Var> {
    let (b, h, wd, c) = window_dims(tape.shape(x)?, w)?;
    let (nh, nw) = (h / w, wd / w);
    let y = tape.reshape(x, &[b, nh, w, nw, w, c])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(y, &[b * nh * nw, w * w, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(tape: &mut Tape, windows: Var, w: usize, h: usize, wd: usize) -> Result<Var> {
    let s = tape.shape(windows)?.to_vec();
    if w == 0 || h % w != 0 || wd % w != 0 || s.len() != 3 || s[1] != w * w {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("windows inconsistent with window {w} over {h}x{wd}"),
        });
    }
    let (nh, nw) = (h / w, wd / w);
    if s[0] % (nh * nw) != 0 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("window count not a multiple of {}", nh * nw),
        });
    }
    let (b, c) = (s[0] / (nh * nw), s[2]);
    let y = tape.reshape(windows, &[b, nh, nw, w, w, c])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(y, &[b, h, wd, c])
}

/// Table column for every (query, key) token pair of a `w x w` window,
/// row-major over the `w^2 x w^2` pairs. Depends only on the 2-D offset.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let span = 2 * w - 1;
    let mut idx = Vec::with_capacity(w.pow(4));
    for i in 0..w * w {
        let (yi, xi) = (i / w, i % w);
        for j in 0..w * w {
            let (yj, xj) = (j / w, j % w);
            let dy = yi + w - 1 - yj;
            let dx = xi + w - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Expands `table [m, (2w-1)^2]` into the per-pair bias `[m, w^2, w^2]`.
pub fn attention_bias_lookup(tape: &mut Tape, table: Var, w: usize) -> Result<Var> {
    let s = tape.shape(table)?.to_vec();
    if s.len() != 2 || s[1] != (2 * w - 1).pow(2) {
        return Err(Error::ShapeMismatch {
            op: "attention_bias_lookup",
            lhs: s,
            rhs: vec![(2 * w - 1).pow(2)],
        });
    }
    let g = tape.gather_last(table, &relative_position_index(w))?;
    tape.reshape(g, &[s[0], w * w, w * w])
}

/// Windowed multi-head attention layer.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub use_bias: bool,
}

impl WindowAttention {
    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        for p in ["wq", "wk", "wv", "wo"] {
            store.insert_param(format!("{}.{p}", self.name), init.trunc_normal(&[self.dim, self.dim], INIT_STD));
        }
        if self.use_bias {
            let cols = (2 * self.window - 1).pow(2);
            store.insert_param(format!("{}.bias_table", self.name), init.zeros(&[self.heads, cols]));
        }
    }

    pub fn weights(&self, f: &mut Forward) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            wq: f.param(&format!("{}.wq", self.name))?,
            wk: f.param(&format!("{}.wk", self.name))?,
            wv: f.param(&format!("{}.wv", self.name))?,
            wo: f.param(&format!("{}.wo", self.name))?,
            heads: self.heads,
        })
    }

    /// `x [B, H, W, C]` -> attention output of the same shape (no residual).
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (_, h, wd, _) = window_dims(f.tape.shape(x)?, self.window)?;
        let weights = self.weights(f)?;
        let bias = if self.use_bias {
            let table = f.param(&format!("{}.bias_table", self.name))?;
            Some(attention_bias_lookup(f.tape, table, self.window)?)
        } else {
            None
        };
        let windows = window_partition(f.tape, x, self.window)?;
        let y = scaled_dot_attention(f.tape, windows, &weights, bias)?;
        window_reverse(f.tape, y, self.window, h, wd)
    }
}

/// `a = x + attn(LN(x))`, `b = a + dwconv(a)`, `out = b + mlp(b)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub dim: usize,
    pub norm: LayerNorm,
    pub attn: WindowAttention,
    pub local_conv: ConvBn,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, window: usize, mlp_ratio: usize, use_bias: bool) -> Self {
        Self {
            dim,
            norm: LayerNorm::new(format!("{name}.norm1"), dim),
            attn: WindowAttention {
                name: format!("{name}.attn"),
                dim,
                heads,
                window,
                use_bias,
            },
            local_conv: ConvBn::depthwise(format!("{name}.local_conv"), dim, 3, 1, 1),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, mlp_ratio),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        self.norm.init(store, init);
        self.attn.init(store, init);
        self.local_conv.init(store, init);
        self.mlp.init(store, init);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let s = f.tape.shape(x)?.to_vec();
        window_dims(&s, self.attn.window)?;
        if s[3] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "transformer_block",
                lhs: s,
                rhs: vec![self.dim],
            });
        }
        let normed = self.norm.forward(f, x)?;
        let attn = self.attn.forward(f, normed)?;
        let a = f.tape.add(x, attn)?;

        let nchw = f.tape.permute(a, &[0, 3, 1, 2])?;
        let local = self.local_conv.forward(f, nchw)?;
        let local = f.tape.permute(local, &[0, 2, 3, 1])?;
        let b = f.tape.add(a, local)?;

        let m = self.mlp.forward(f, b)?;
        f.tape.add(b, m)
    }
}
