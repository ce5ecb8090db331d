//! Vision Transformer encoder: patchify, linear patch embedding, class
//! token, learned position embeddings, pre-LN encoder blocks and a
//! class-token readout.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, truncated_normal, ParamStore};
use crate::tensor::{Scalar, Tensor, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl VitConfig {
    /// ViT-B/32 at 256×256 input with a 4-way output.
    pub fn vit_b32() -> Self {
        VitConfig {
            image_size: 256,
            channels: 3,
            patch_size: 32,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_dim: 3072,
            dropout_rate: 0.1,
            num_classes: 4,
        }
    }

    /// Small enough for finite-difference checks and CI training runs.
    pub fn tiny() -> Self {
        VitConfig {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_dim: 32,
            dropout_rate: 0.0,
            num_classes: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit-b32" => Ok(Self::vit_b32()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected vit-b32 or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Number of backbone scalars, computed from the shapes alone.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let embed = self.patch_dim() * d + d + d + (self.num_patches() + 1) * d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * self.mlp_dim + self.mlp_dim) + (self.mlp_dim * d + d);
        embed + self.num_layers * block + 2 * d
    }
}

/// Parameter names, fixed by position in the network.
pub mod names {
    pub const PATCH_WEIGHT: &str = "embed.patch.weight";
    pub const PATCH_BIAS: &str = "embed.patch.bias";
    pub const CLASS_TOKEN: &str = "embed.cls";
    pub const POSITION: &str = "embed.pos";
    pub const FINAL_GAMMA: &str = "final_ln.gamma";
    pub const FINAL_BETA: &str = "final_ln.beta";

    pub fn layer(l: usize, suffix: &str) -> String {
        format!("encoder.{l}.{suffix}")
    }
}

fn insert_dense<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(&format!("{prefix}.weight"), fan_in_uniform(fan_in, fan_out, rng))?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]))
}

fn insert_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::ones(vec![d]))?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(vec![d]))
}

/// Adds freshly initialized backbone parameters to `store`.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    cfg: &VitConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.hidden_dim;
    insert_dense(store, "embed.patch", cfg.patch_dim(), d, rng)?;
    store.insert(names::CLASS_TOKEN, truncated_normal(vec![1, d], 0.02, rng))?;
    store.insert(
        names::POSITION,
        truncated_normal(vec![cfg.num_patches() + 1, d], 0.02, rng),
    )?;
    for l in 0..cfg.num_layers {
        insert_norm(store, &names::layer(l, "ln1"), d)?;
        for proj in ["q", "k", "v", "out"] {
            insert_dense(store, &names::layer(l, &format!("attn.{proj}")), d, d, rng)?;
        }
        insert_norm(store, &names::layer(l, "ln2"), d)?;
        insert_dense(store, &names::layer(l, "mlp.fc1"), d, cfg.mlp_dim, rng)?;
        insert_dense(store, &names::layer(l, "mlp.fc2"), cfg.mlp_dim, d, rng)?;
    }
    insert_norm(store, "final_ln", d)
}

/// Forward-pass mode: dropout is active only when `training` is set.
pub struct Ctx<'a> {
    pub training: bool,
    pub rng: &'a mut dyn RngCore,
}

/// Splits an `H×W×C` image into `P×P×C` patches, one flattened patch per
/// row, patches in row-major grid order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let [h, w, c] = image.shape()[..] else {
        return Err(Error::shape(
            "patchify",
            format!("expected H×W×C image, got {:?}", image.shape()),
        ));
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}×{w} image is not divisible into {patch_size}×{patch_size} patches"),
        ));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let row_len = patch_size * c;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch_size {
                let start = ((gy * patch_size + py) * w + gx * patch_size) * c;
                out.extend_from_slice(&src[start..start + row_len]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch_size * patch_size * c], out)
}

/// Patch projection, class-token prepend and position-embedding add.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    patches: Var,
) -> Result<Var> {
    let w = g.param(store, names::PATCH_WEIGHT)?;
    let b = g.param(store, names::PATCH_BIAS)?;
    let cls = g.param(store, names::CLASS_TOKEN)?;
    let pos = g.param(store, names::POSITION)?;
    let tokens = g.dense(patches, w, b)?;
    let tokens = g.concat_rows(&[cls, tokens])?;
    g.add(tokens, pos)
}

pub struct Attention {
    pub output: Var,
    /// One `T×T` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head self-attention with parameters under `prefix` (`q`, `k`, `v`,
/// `out` dense layers).
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    tokens: Var,
    num_heads: usize,
) -> Result<Attention> {
    let (_, d) = g.value(tokens).dims2("attention")?;
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "hidden dim {d} is not divisible by {num_heads} heads"
        )));
    }
    let head_dim = d / num_heads;
    let project = |g: &mut Graph<T>, name: &str| -> Result<Var> {
        let w = g.param(store, &format!("{prefix}.{name}.weight"))?;
        let b = g.param(store, &format!("{prefix}.{name}.bias"))?;
        g.dense(tokens, w, b)
    };
    let q = project(g, "q")?;
    let k = project(g, "k")?;
    let v = project(g, "v")?;
    let scale = T::of(1.0 / (head_dim as f64).sqrt());

    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.cols(q, lo, hi)?;
        let kh = g.cols(k, lo, hi)?;
        let vh = g.cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_last(scores)?;
        heads.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let wo = g.param(store, &format!("{prefix}.out.weight"))?;
    let bo = g.param(store, &format!("{prefix}.out.bias"))?;
    Ok(Attention {
        output: g.dense(merged, wo, bo)?,
        weights,
    })
}

fn norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Pre-LN block `layer`: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
pub fn encoder_block<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &VitConfig,
    store: &ParamStore<T>,
    layer: usize,
    tokens: Var,
    ctx: &mut Ctx<'_>,
) -> Result<(Var, Attention)> {
    let p = |s: &str| names::layer(layer, s);

    let h = norm(g, store, &p("ln1"), tokens)?;
    let attn = multi_head_attention(g, store, &p("attn"), h, cfg.num_heads)?;
    let x1 = g.add(tokens, attn.output)?;

    let h = norm(g, store, &p("ln2"), x1)?;
    let w1 = g.param(store, &p("mlp.fc1.weight"))?;
    let b1 = g.param(store, &p("mlp.fc1.bias"))?;
    let h = g.dense(h, w1, b1)?;
    let h = g.gelu(h);
    let h = g.dropout(h, cfg.dropout_rate, ctx.training, ctx.rng)?;
    let w2 = g.param(store, &p("mlp.fc2.weight"))?;
    let b2 = g.param(store, &p("mlp.fc2.bias"))?;
    let h = g.dense(h, w2, b2)?;
    let h = g.dropout(h, cfg.dropout_rate, ctx.training, ctx.rng)?;
    Ok((g.add(x1, h)?, attn))
}

/// Per-image trace of one backbone pass.
pub struct ImageTrace {
    pub tokens: Var,
    pub attention: Vec<Attention>,
    pub class_repr: Var,
}

/// Runs one `H×W×C` image through the backbone.
pub fn forward_image<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &VitConfig,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    ctx: &mut Ctx<'_>,
) -> Result<ImageTrace> {
    let expected = [cfg.image_size, cfg.image_size, cfg.channels];
    if image.shape() != expected {
        return Err(Error::shape(
            "vit_forward",
            format!("image {:?}, model expects {:?}", image.shape(), expected),
        ));
    }
    let patches = g.input(patchify(image, cfg.patch_size)?);
    let mut x = embed(g, store, patches)?;
    x = g.dropout(x, cfg.dropout_rate, ctx.training, ctx.rng)?;
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let (next, attn) = encoder_block(g, cfg, store, l, x, ctx)?;
        x = next;
        attention.push(attn);
    }
    // LayerNorm is per token, so normalizing only the class row is exact.
    let cls = g.rows(x, 0, 1)?;
    let class_repr = norm(g, store, "final_ln", cls)?;
    Ok(ImageTrace {
        tokens: x,
        attention,
        class_repr,
    })
}

/// Backbone over a `B×H×W×C` batch; returns the `B×D` class-token features.
pub fn vit_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &VitConfig,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    if images.shape().len() != 4 {
        return Err(Error::shape(
            "vit_forward",
            format!("expected B×H×W×C batch, got {:?}", images.shape()),
        ));
    }
    let mut rows = Vec::with_capacity(images.shape()[0]);
    for b in 0..images.shape()[0] {
        let image = images.index0(b)?;
        rows.push(forward_image(g, cfg, store, &image, ctx)?.class_repr);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}
