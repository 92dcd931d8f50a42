//! Per-block and whole-model gradient checks on a model configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{TransformerBlock, WindowAttention};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::model::{regression_head, ModelConfig, TintModel};
use crate::nn::{ConvBn, Downsample, LayerNorm, MBConv, Mlp, PatchEmbed, PositionalEmbedding};
use crate::params::{Forward, Init, Mode, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};
use crate::train::mse_loss;

pub const BLOCK_THRESHOLD: f64 = 1e-4;
pub const MODEL_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Tensor holding the worst coordinate (`input` or a parameter name).
    pub worst: String,
    /// Inputs plus parameters checked.
    pub coords: usize,
    pub threshold: f64,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data, DType::F64).expect("positive extents")
}

/// Replaces every parameter with fresh noise so that zero-initialized
/// tensors (biases, bias tables) are exercised away from zero.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    for (_, t) in store.params_mut() {
        let noise = randn(rng, &[t.numel()], std);
        for (v, z) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += z;
        }
    }
}

/// Checks `sum(R * body(x))` for a fixed random `R`, w.r.t. `x` and every
/// parameter in `store`.
fn check_body<F>(name: &str, store: &ParamStore, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng, eps: f64, body: F) -> Result<BlockCheck>
where
    F: Fn(&mut Forward, Var) -> Result<Var>,
{
    let names: Vec<String> = store.params().keys().cloned().collect();
    let out_shape = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut f = Forward::new(&mut tape, store, mode);
        let y = body(&mut f, xv)?;
        tape.shape(y)?.to_vec()
    };
    let weights = randn(rng, &out_shape, 1.0);
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|n| store.param(n).expect("listed").clone()));
    let coords = inputs.iter().map(Tensor::numel).sum();
    let reports = grad_check_many(
        |tape, vars| {
            let r = tape.constant(weights.clone());
            let mut f = Forward::new(tape, store, mode);
            for (n, &v) in names.iter().zip(&vars[1..]) {
                f.bind(n.clone(), v);
            }
            let y = body(&mut f, vars[0])?;
            let p = f.tape.mul(y, r)?;
            f.tape.sum_all(p)
        },
        &inputs,
        eps,
    )?;
    Ok(summarize(name, &names, &reports, coords, BLOCK_THRESHOLD))
}

fn summarize(name: &str, names: &[String], reports: &[GradCheckReport], coords: usize, threshold: f64) -> BlockCheck {
    let (i, worst) = reports
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, r)| if r.max_rel_error > acc.1 { (i, r.max_rel_error) } else { acc });
    BlockCheck {
        name: name.to_string(),
        max_rel_error: worst,
        worst: if i == 0 { "input".to_string() } else { names[i - 1].clone() },
        coords,
        threshold,
    }
}

fn block_store(seed: u64, rng: &mut ChaCha8Rng, init_fn: impl FnOnce(&mut ParamStore, &mut Init)) -> ParamStore {
    let mut store = ParamStore::new();
    init_fn(&mut store, &mut Init::new(seed, DType::F64));
    perturb(&mut store, rng, 0.1);
    store
}

/// Runs every block check, then the full-model MSE check, in float64.
pub fn check_blocks(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<Vec<BlockCheck>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let [c1, c2, ..] = cfg.embed_dims;
    let b = 2;
    let s = cfg.input_size;
    let r1 = cfg.resolutions()[0];
    let (m, w) = (cfg.num_heads[0], cfg.window_sizes[0]);
    // Stage-2 sized grid holding at least one full window.
    let g = w.max(2);

    let pe = PatchEmbed::new("patch_embed", cfg.in_channels, c1);
    let store = block_store(seed, &mut rng, |st, i| pe.init(st, i));
    let x = randn(&mut rng, &[b, cfg.in_channels, s, s], 1.0);
    out.push(check_body("patch_embed", &store, x, Mode::Train, &mut rng, eps, |f, x| {
        Ok(pe.forward(f, x)?.0)
    })?);

    let pos = PositionalEmbedding {
        name: "pos_embed".into(),
        len: r1 * r1,
        dim: c1,
    };
    let store = block_store(seed, &mut rng, |st, i| pos.init(st, i));
    let x = randn(&mut rng, &[b, r1 * r1, c1], 1.0);
    out.push(check_body("positional", &store, x, Mode::Train, &mut rng, eps, |f, x| pos.forward(f, x))?);

    let mb = MBConv::new("mbconv", c1, cfg.mbconv_expand);
    let store = block_store(seed, &mut rng, |st, i| mb.init(st, i));
    let x = randn(&mut rng, &[b, c1, r1, r1], 1.0);
    out.push(check_body("mbconv", &store, x, Mode::Train, &mut rng, eps, |f, x| mb.forward(f, x))?);

    let ds = Downsample::new("downsample", c1, c2);
    let store = block_store(seed, &mut rng, |st, i| ds.init(st, i));
    let x = randn(&mut rng, &[b, c1, r1, r1], 1.0);
    out.push(check_body("downsample", &store, x, Mode::Train, &mut rng, eps, |f, x| ds.forward(f, x))?);

    let attn = WindowAttention {
        name: "attn".into(),
        dim: c2,
        heads: m,
        window: w,
        use_bias: cfg.use_attention_bias,
    };
    let store = block_store(seed, &mut rng, |st, i| attn.init(st, i));
    let x = randn(&mut rng, &[b, g, g, c2], 1.0);
    out.push(check_body("window_attention", &store, x, Mode::Train, &mut rng, eps, |f, x| attn.forward(f, x))?);

    let dw = ConvBn::depthwise("local_conv", c2, 3, 1, 1);
    let store = block_store(seed, &mut rng, |st, i| dw.init(st, i));
    let x = randn(&mut rng, &[b, c2, g, g], 1.0);
    out.push(check_body("depthwise_conv", &store, x, Mode::Train, &mut rng, eps, |f, x| dw.forward(f, x))?);

    let mlp = Mlp::new("mlp", c2, cfg.mlp_ratio);
    let store = block_store(seed, &mut rng, |st, i| mlp.init(st, i));
    let x = randn(&mut rng, &[b, g * g, c2], 1.0);
    out.push(check_body("mlp", &store, x, Mode::Train, &mut rng, eps, |f, x| mlp.forward(f, x))?);

    let ln = LayerNorm::new("norm", c2);
    let store = block_store(seed, &mut rng, |st, i| ln.init(st, i));
    let x = randn(&mut rng, &[b, g * g, c2], 1.0);
    out.push(check_body("layer_norm", &store, x, Mode::Train, &mut rng, eps, |f, x| ln.forward(f, x))?);

    for (label, mode) in [("batch_norm_train", Mode::Train), ("batch_norm_eval", Mode::Eval)] {
        let mut store = block_store(seed, &mut rng, |st, i| {
            st.insert_param("bn.weight", i.ones(&[c2]));
            st.insert_param("bn.bias", i.zeros(&[c2]));
        });
        store.insert_buffer("bn.running_mean", randn(&mut rng, &[c2], 0.5));
        let var = randn(&mut rng, &[c2], 0.5);
        store.insert_buffer("bn.running_var", Tensor::new(vec![c2], var.data().iter().map(|v| 1.0 + v.abs()).collect(), DType::F64)?);
        let x = randn(&mut rng, &[b, c2, g, g], 1.0);
        out.push(check_body(label, &store, x, mode, &mut rng, eps, |f, x| f.batch_norm("bn", x))?);
    }

    let blk = TransformerBlock::new("block", c2, m, w, cfg.mlp_ratio, cfg.use_attention_bias);
    let store = block_store(seed, &mut rng, |st, i| blk.init(st, i));
    let x = randn(&mut rng, &[b, g, g, c2], 1.0);
    out.push(check_body("transformer_block", &store, x, Mode::Train, &mut rng, eps, |f, x| blk.forward(f, x))?);

    let c4 = cfg.embed_dims[3];
    let store = block_store(seed, &mut rng, |st, i| {
        st.insert_param("head.weight", i.trunc_normal(&[c4], 0.02));
        st.insert_param("head.bias", i.zeros(&[]));
    });
    let x = randn(&mut rng, &[b, c4, 2, 2], 1.0);
    out.push(check_body("head", &store, x, Mode::Train, &mut rng, eps, |f, x| Ok(regression_head(f, x)?.1))?);

    out.push(check_model(cfg, seed, &mut rng, eps)?);
    Ok(out)
}

/// Spread of the targets around the model's own predictions in the
/// whole-model check. Several biases have exactly zero gradient (a later
/// BatchNorm cancels them) and their numeric estimate is pure roundoff,
/// which grows with the residual; a small residual keeps it under the floor.
const TARGET_OFFSET_STD: f64 = 0.1;

/// MSE loss of the whole network (train mode, batch 2) w.r.t. the images and
/// every parameter.
fn check_model(cfg: &ModelConfig, seed: u64, rng: &mut ChaCha8Rng, eps: f64) -> Result<BlockCheck> {
    let mut model = TintModel::build_with_dtype(ModelConfig { seed, ..cfg.clone() }, DType::F64)?;
    perturb(model.store_mut(), rng, 0.1);
    let b = 2;
    let x = randn(rng, &[b, cfg.in_channels, cfg.input_size, cfg.input_size], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pred = model.forward(&mut tape, xv, Mode::Train)?.pred();
    let noise = randn(rng, &[b], TARGET_OFFSET_STD);
    let target: Vec<f64> = tape.value(pred)?.data().iter().zip(noise.data()).map(|(p, n)| p + n).collect();
    let target = Tensor::new(vec![b], target, DType::F64)?;

    let store = model.store();
    let names: Vec<String> = store.params().keys().cloned().collect();
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|n| store.param(n).expect("listed").clone()));
    let coords = inputs.iter().map(Tensor::numel).sum();
    let reports = grad_check_many(
        |tape, vars| {
            let t = tape.constant(target.clone());
            let mut f = Forward::new(tape, store, Mode::Train);
            for (n, &v) in names.iter().zip(&vars[1..]) {
                f.bind(n.clone(), v);
            }
            let trace = model.forward_in(&mut f, vars[0])?;
            mse_loss(f.tape, trace.pred, t)
        },
        &inputs,
        eps,
    )?;
    Ok(summarize("full_model_mse", &names, &reports, coords, MODEL_THRESHOLD))
}
