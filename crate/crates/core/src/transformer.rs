//! Pre-norm transformer encoder with optional adapters and prompt MLPs at
//! every adapted linear, plus classification pooling.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{fan_in_std, Ctx, Group, Initializer, LayerNorm, Linear, LinearSpec, ParamStore};
use crate::pointlora::{pointlora_layer_forward, LoraAdapter, PromptMlps, Site};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::tokenizer::Role;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub drop_path: f64,
    pub qkv_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            dim: 384,
            heads: 6,
            ffn_dim: 1536,
            drop_path: 0.3,
            qkv_bias: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!(
                "drop path rate {} outside [0, 1)",
                self.drop_path
            )));
        }
        Ok(())
    }

    /// Per-block stochastic-depth rates, linearly spaced from 0.
    pub fn drop_rates(&self) -> Vec<f64> {
        if self.depth == 1 {
            return alloc::vec![0.0];
        }
        (0..self.depth)
            .map(|i| self.drop_path * i as f64 / (self.depth - 1) as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    /// Adapters indexed by [`Site::index`].
    pub adapters: [Option<LoraAdapter>; 4],
}

impl Block {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<'_, R>,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let d = cfg.dim;
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d);
        let mut lin = |suffix: &str, i: usize, o: usize, bias: bool, group: Group| {
            Linear::new(
                store,
                init,
                LinearSpec {
                    name: &format!("{name}.{suffix}"),
                    in_dim: i,
                    out_dim: o,
                    bias,
                    group,
                    init: fan_in_std(i, 1.0),
                },
            )
        };
        let qkv = lin("attn.qkv", d, 3 * d, cfg.qkv_bias, Group::Attention);
        let proj = lin("attn.proj", d, d, true, Group::Attention);
        let fc1 = lin("mlp.fc1", d, cfg.ffn_dim, true, Group::Ffn);
        let fc2 = lin("mlp.fc2", cfg.ffn_dim, d, true, Group::Ffn);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d);
        Self {
            norm1,
            qkv,
            proj,
            norm2,
            fc1,
            fc2,
            adapters: [None, None, None, None],
        }
    }

    pub fn linear(&self, site: Site) -> &Linear {
        match site {
            Site::Qkv => &self.qkv,
            Site::Proj => &self.proj,
            Site::Fc1 => &self.fc1,
            Site::Fc2 => &self.fc2,
        }
    }

    pub fn adapter(&self, site: Site) -> Option<&LoraAdapter> {
        self.adapters[site.index()].as_ref()
    }
}

/// `batch` sequences of `seq` tokens each, stacked row-wise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub seq: usize,
}

impl Layout {
    fn rows(&self, b: usize) -> Vec<usize> {
        (b * self.seq..(b + 1) * self.seq).collect()
    }
}

/// Per-block context: prompt MLPs (shared by all adapted blocks) and
/// per-row residual-branch scales for stochastic depth.
pub struct BlockExtras<'a, F> {
    pub prompts: Option<&'a PromptMlps>,
    pub drop_attn: Option<Tensor<F>>,
    pub drop_ffn: Option<Tensor<F>>,
}

impl<F> Default for BlockExtras<'_, F> {
    fn default() -> Self {
        Self {
            prompts: None,
            drop_attn: None,
            drop_ffn: None,
        }
    }
}

fn site_forward<F: Real>(
    ctx: &mut Ctx<'_, F>,
    blk: &Block,
    site: Site,
    prompts: Option<&PromptMlps>,
    x: Var,
) -> Result<Var> {
    let prompt = prompts.and_then(|p| match site {
        Site::Qkv => Some(&p.qkv),
        s if s == p.ffn_site => Some(&p.ffn),
        _ => None,
    });
    pointlora_layer_forward(ctx, blk.linear(site), blk.adapter(site), prompt, x)
}

/// `x + Attn(LN(x))` with multi-head scaled dot-product attention over each
/// sequence.
pub fn attention_forward<F: Real>(
    ctx: &mut Ctx<'_, F>,
    blk: &Block,
    cfg: &EncoderConfig,
    layout: Layout,
    x: Var,
    extras: &BlockExtras<'_, F>,
) -> Result<Var> {
    let d = cfg.dim;
    let hd = d / cfg.heads;
    let scale = F::one() / F::lit(hd as f64).sqrt();
    let h = blk.norm1.forward(ctx, x)?;
    let qkv = site_forward(ctx, blk, Site::Qkv, extras.prompts, h)?;
    let mut outs = Vec::with_capacity(layout.batch);
    for b in 0..layout.batch {
        let rows = if layout.batch == 1 {
            qkv
        } else {
            ctx.g.gather_rows(qkv, &layout.rows(b))?
        };
        let mut heads = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let q = ctx.g.slice_cols(rows, i * hd, hd)?;
            let k = ctx.g.slice_cols(rows, d + i * hd, hd)?;
            let v = ctx.g.slice_cols(rows, 2 * d + i * hd, hd)?;
            let kt = ctx.g.transpose(k)?;
            let s = ctx.g.matmul(q, kt)?;
            let s = ctx.g.scale(s, scale)?;
            let a = ctx.g.softmax_rows(s)?;
            heads.push(ctx.g.matmul(a, v)?);
        }
        outs.push(if heads.len() == 1 {
            heads[0]
        } else {
            ctx.g.concat_cols(&heads)?
        });
    }
    let o = if outs.len() == 1 {
        outs[0]
    } else {
        ctx.g.concat_rows(&outs)?
    };
    let o = site_forward(ctx, blk, Site::Proj, extras.prompts, o)?;
    residual(ctx, x, o, extras.drop_attn.as_ref())
}

/// `x + FFN(LN(x))`, `FFN = fc2(GELU(fc1(·)))`.
pub fn ffn_forward<F: Real>(
    ctx: &mut Ctx<'_, F>,
    blk: &Block,
    x: Var,
    extras: &BlockExtras<'_, F>,
) -> Result<Var> {
    let h = blk.norm2.forward(ctx, x)?;
    let h = site_forward(ctx, blk, Site::Fc1, extras.prompts, h)?;
    let h = ctx.g.gelu(h)?;
    let o = site_forward(ctx, blk, Site::Fc2, extras.prompts, h)?;
    residual(ctx, x, o, extras.drop_ffn.as_ref())
}

fn residual<F: Real>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    branch: Var,
    drop: Option<&Tensor<F>>,
) -> Result<Var> {
    let branch = match drop {
        Some(mask) => {
            let m = ctx.constant(mask.clone());
            ctx.g.mul(branch, m)?
        }
        None => branch,
    };
    ctx.g.add(x, branch)
}

pub fn block_forward<F: Real>(
    ctx: &mut Ctx<'_, F>,
    blk: &Block,
    cfg: &EncoderConfig,
    layout: Layout,
    x: Var,
    extras: &BlockExtras<'_, F>,
) -> Result<Var> {
    let x = attention_forward(ctx, blk, cfg, layout, x, extras)?;
    ffn_forward(ctx, blk, x, extras)
}

/// Per-row branch scales: each sequence keeps its branch with probability
/// `1 − rate`, rescaled by `1/(1 − rate)`.
pub fn drop_path_mask<F: Real, R: Rng + ?Sized>(
    rng: &mut R,
    layout: Layout,
    dim: usize,
    rate: f64,
) -> Option<Tensor<F>> {
    if rate <= 0.0 {
        return None;
    }
    let keep: Vec<F> = (0..layout.batch)
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                F::lit(1.0 / (1.0 - rate))
            }
        })
        .collect();
    Some(Tensor::from_fn(&[layout.batch * layout.seq, dim], |i| {
        keep[i / (layout.seq * dim)]
    }))
}

/// Blocks followed by the final norm. `rng` enables stochastic depth.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward<F: Real, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, F>,
    blocks: &[Block],
    norm: &LayerNorm,
    cfg: &EncoderConfig,
    layout: Layout,
    x: Var,
    prompts: Option<&PromptMlps>,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    if blocks.len() != cfg.depth {
        return Err(Error::Contract(format!(
            "{} blocks for a depth-{} config",
            blocks.len(),
            cfg.depth
        )));
    }
    let rates = cfg.drop_rates();
    let mut x = x;
    for (blk, &rate) in blocks.iter().zip(&rates) {
        let mut extras = BlockExtras {
            prompts,
            ..Default::default()
        };
        if let Some(r) = rng.as_deref_mut() {
            extras.drop_attn = drop_path_mask(r, layout, cfg.dim, rate);
            extras.drop_ffn = drop_path_mask(r, layout, cfg.dim, rate);
        }
        x = block_forward(ctx, blk, cfg, layout, x, &extras)?;
    }
    norm.forward(ctx, x)
}

/// `[cls ‖ max over the other tokens]` per sequence, giving `batch×2d`.
/// Prompt tokens join the max unless `include_prompts` is off.
pub fn pool_features<F: Real>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    layout: Layout,
    roles: &[Role],
    include_prompts: bool,
) -> Result<Var> {
    if roles.len() != layout.seq {
        return Err(crate::error::shape_err("pool_features", &[layout.seq], &[roles.len()]));
    }
    if roles.first() != Some(&Role::Class) {
        return Err(Error::Contract("pooling needs a class token at position 0".into()));
    }
    let pooled: Vec<usize> = roles
        .iter()
        .enumerate()
        .filter(|(_, r)| match r {
            Role::Class => false,
            Role::Patch => true,
            Role::Prompt => include_prompts,
        })
        .map(|(i, _)| i)
        .collect();
    if pooled.is_empty() {
        return Err(Error::Contract("nothing to max-pool besides the class token".into()));
    }
    let mut outs = Vec::with_capacity(layout.batch);
    for b in 0..layout.batch {
        let base = b * layout.seq;
        let cls = ctx.g.gather_rows(x, &[base])?;
        let rows: Vec<usize> = pooled.iter().map(|&i| base + i).collect();
        let others = ctx.g.gather_rows(x, &rows)?;
        let m = ctx.g.max_rows(others)?;
        outs.push(ctx.g.concat_cols(&[cls, m])?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        ctx.g.concat_rows(&outs)
    }
}
