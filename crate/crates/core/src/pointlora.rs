//! Low-rank adapters, prompt MLPs, the mask predictor and multi-scale
//! prompt-token selection.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{make_patches, PatchSet, Point, PointCloud};
use crate::graph::Var;
use crate::nn::{fan_in_std, Ctx, Group, Init, Initializer, Linear, LinearSpec, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{matmul, topk_indices, Tensor};

/// Linear layers inside a block that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Site {
    /// Fused query/key/value projection, `d → 3d`.
    Qkv,
    /// Attention output projection, `d → d`.
    Proj,
    /// First FFN linear, `d → d_ff`.
    Fc1,
    /// Second FFN linear, `d_ff → d`.
    Fc2,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::Qkv, Site::Proj, Site::Fc1, Site::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Site::Qkv => "qkv",
            Site::Proj => "proj",
            Site::Fc1 => "fc1",
            Site::Fc2 => "fc2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `ΔW = scaling · W_down · W_up` on top of a frozen base linear.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraAdapter {
    /// `W_down ~ N(0, init_std²)`, `W_up = 0`, so the adapter starts as an
    /// exact no-op.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<'_, R>,
        name: &str,
        base: &Linear,
        rank: usize,
        scaling: f64,
        init_std: f64,
    ) -> Result<Self> {
        if rank == 0 || rank >= base.in_dim.min(base.out_dim) {
            return Err(Error::Config(format!(
                "rank {rank} must be in [1, {}) for {name}",
                base.in_dim.min(base.out_dim)
            )));
        }
        let down = init.tensor(&[base.in_dim, rank], Init::Normal(init_std));
        let down = store.push(format!("{name}.lora_down"), down, Group::Lora, true);
        let up = store.push(
            format!("{name}.lora_up"),
            Tensor::zeros(&[rank, base.out_dim]),
            Group::Lora,
            true,
        );
        Ok(Self {
            down,
            up,
            rank,
            scaling,
        })
    }

    pub fn delta<F: Real>(&self, store: &ParamStore<F>) -> Result<Tensor<F>> {
        Ok(matmul(store.value(self.down), store.value(self.up))?.scale(F::lit(self.scaling)))
    }
}

/// `x·W_p (+ b) + scaling·(x·W_down)·W_up`.
pub fn lora_forward<F: Real>(
    ctx: &mut Ctx<'_, F>,
    base: &Linear,
    adapter: Option<&LoraAdapter>,
    x: Var,
) -> Result<Var> {
    let y = base.forward(ctx, x)?;
    let Some(a) = adapter else { return Ok(y) };
    let down = ctx.p(a.down);
    let up = ctx.p(a.up);
    let h = ctx.g.matmul(x, down)?;
    let h = ctx.g.matmul(h, up)?;
    let h = if a.scaling == 1.0 {
        h
    } else {
        ctx.g.scale(h, F::lit(a.scaling))?
    };
    ctx.g.add(y, h)
}

/// `W_p + scaling·W_down·W_up`.
pub fn merged_weight<F: Real>(
    base: &Tensor<F>,
    down: &Tensor<F>,
    up: &Tensor<F>,
    scaling: f64,
) -> Result<Tensor<F>> {
    base.add(&matmul(down, up)?.scale(F::lit(scaling)))
}

/// Folds the adapter into its base weight and drops both factors from the
/// store.
pub fn lora_merge<F: Real>(
    store: &mut ParamStore<F>,
    base: &Linear,
    adapter: LoraAdapter,
) -> Result<()> {
    let merged = merged_weight(
        store.value(base.weight),
        store.value(adapter.down),
        store.value(adapter.up),
        adapter.scaling,
    )?;
    store.get_mut(base.weight).value = merged;
    store.remove(adapter.down);
    store.remove(adapter.up);
    Ok(())
}

/// Pointwise `in → p → out` MLP with GELU; output layer starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PromptMlp {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<'_, R>,
        name: &str,
        dims: (usize, usize, usize),
    ) -> Self {
        let (i, p, o) = dims;
        let fc1 = Linear::new(
            store,
            init,
            LinearSpec {
                name: &format!("{name}.fc1"),
                in_dim: i,
                out_dim: p,
                bias: true,
                group: Group::PromptMlp,
                init: fan_in_std(i, 1.0),
            },
        );
        let fc2 = Linear::new(
            store,
            init,
            LinearSpec {
                name: &format!("{name}.fc2"),
                in_dim: p,
                out_dim: o,
                bias: true,
                group: Group::PromptMlp,
                init: Init::Zeros,
            },
        );
        Self { fc1, fc2 }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.gelu(h)?;
        self.fc2.forward(ctx, h)
    }
}

/// The two model-wide prompt MLPs: one feeding every block's qkv projection
/// and one feeding every block's FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMlps {
    pub qkv: PromptMlp,
    pub ffn: PromptMlp,
    /// FFN linear whose output receives the FFN prompt MLP; the MLP reads
    /// that linear's input.
    pub ffn_site: Site,
}

/// `x·W_p + scaling·(x·W_down)·W_up + PromptMLP(x)`, pointwise over every
/// row of `x`.
pub fn pointlora_layer_forward<F: Real>(
    ctx: &mut Ctx<'_, F>,
    base: &Linear,
    adapter: Option<&LoraAdapter>,
    prompt: Option<&PromptMlp>,
    x: Var,
) -> Result<Var> {
    let y = lora_forward(ctx, base, adapter, x)?;
    match prompt {
        Some(mlp) => {
            let p = mlp.forward(ctx, x)?;
            ctx.g.add(y, p)
        }
        None => Ok(y),
    }
}

/// Scores tokens: `sigmoid(W2·GELU(W1·t))`, shared across scales.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPredictor {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MaskPredictor {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<'_, R>,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        let fc1 = Linear::new(
            store,
            init,
            LinearSpec {
                name: &format!("{name}.fc1"),
                in_dim: dim,
                out_dim: hidden,
                bias: true,
                group: Group::MaskPredictor,
                init: fan_in_std(dim, 1.0),
            },
        );
        let fc2 = Linear::new(
            store,
            init,
            LinearSpec {
                name: &format!("{name}.fc2"),
                in_dim: hidden,
                out_dim: 1,
                bias: true,
                group: Group::MaskPredictor,
                init: fan_in_std(hidden, 1.0),
            },
        );
        Self { fc1, fc2 }
    }
}

/// Per-token importance scores in (0, 1) as an `n×1` column.
pub fn predict_token_scores<F: Real>(
    ctx: &mut Ctx<'_, F>,
    predictor: &MaskPredictor,
    tokens: Var,
) -> Result<Var> {
    let h = predictor.fc1.forward(ctx, tokens)?;
    let h = ctx.g.gelu(h)?;
    let s = predictor.fc2.forward(ctx, h)?;
    ctx.g.sigmoid(s)
}

/// One sampling scale: `groups` centers, `group_size` neighbours each,
/// `select` tokens kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScaleSpec {
    pub groups: usize,
    pub group_size: usize,
    pub select: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiScaleConfig {
    pub scales: Vec<ScaleSpec>,
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        Self {
            scales: alloc::vec![
                ScaleSpec {
                    groups: 128,
                    group_size: 32,
                    select: 32,
                },
                ScaleSpec {
                    groups: 64,
                    group_size: 64,
                    select: 8,
                },
            ],
        }
    }
}

impl MultiScaleConfig {
    /// Total selected prompt tokens, `N_s`.
    pub fn selected_total(&self) -> usize {
        self.scales.iter().map(|s| s.select).sum()
    }

    /// Total generated tokens over all scales, `N_total`.
    pub fn generated_total(&self) -> usize {
        self.scales.iter().map(|s| s.groups).sum()
    }

    pub fn max_groups(&self) -> usize {
        self.scales
            .iter()
            .map(|s| s.groups.max(s.group_size))
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        for (m, s) in self.scales.iter().enumerate() {
            if s.groups == 0 || s.group_size == 0 {
                return Err(Error::Config(format!("scale {m}: empty groups")));
            }
            if s.select > s.groups {
                return Err(Error::Range {
                    what: "selected token count",
                    value: s.select,
                    limit: s.groups,
                });
            }
        }
        Ok(())
    }
}

/// Per-scale patches of one cloud.
pub fn multi_scale_patches(cloud: &PointCloud, cfg: &MultiScaleConfig) -> Result<Vec<PatchSet>> {
    cfg.validate()?;
    cfg.scales
        .iter()
        .map(|s| make_patches(cloud, s.groups, s.group_size))
        .collect()
}

/// Per-scale tokens (`g_m×d`) from the shared prompt tokenizer, computed
/// without gradients.
pub fn multi_scale_tokenize<F: Real>(
    store: &ParamStore<F>,
    cloud: &PointCloud,
    cfg: &MultiScaleConfig,
    net: &crate::tokenizer::MiniPointNet,
) -> Result<Vec<(PatchSet, Tensor<F>)>> {
    multi_scale_patches(cloud, cfg)?
        .into_iter()
        .map(|p| {
            let t = crate::tokenizer::embed_patches(store, net, &p)?;
            Ok((p, t))
        })
        .collect()
}

/// Scores, chosen indices and the gathered prompt tokens of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionState<F> {
    pub scores: Vec<Vec<F>>,
    pub chosen: Vec<Vec<usize>>,
    /// `N_s×d` selected tokens, concatenated in scale order.
    pub tokens: Tensor<F>,
    pub centers: Vec<Point>,
}

impl<F: Real> SelectionState<F> {
    pub fn selected_total(&self) -> usize {
        self.chosen.iter().map(Vec::len).sum()
    }
}

/// Hard top-K per scale, concatenated in scale order.
pub fn select_topk_tokens<F: Real>(
    tokens: &[Tensor<F>],
    centers: &[Vec<Point>],
    scores: &[Vec<F>],
    cfg: &MultiScaleConfig,
) -> Result<SelectionState<F>> {
    let m = cfg.scales.len();
    if tokens.len() != m || scores.len() != m || centers.len() != m {
        return Err(crate::error::shape_err(
            "select_topk_tokens",
            &[m],
            &[tokens.len(), scores.len(), centers.len()],
        ));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut rows = Vec::with_capacity(m);
    let mut picked_centers = Vec::new();
    for (((spec, t), s), c) in cfg.scales.iter().zip(tokens).zip(scores).zip(centers) {
        if t.rows() != s.len() || c.len() != s.len() {
            return Err(crate::error::shape_err(
                "select_topk_tokens",
                t.shape(),
                &[s.len(), c.len()],
            ));
        }
        if spec.select > s.len() {
            return Err(Error::Range {
                what: "selected token count",
                value: spec.select,
                limit: s.len(),
            });
        }
        let idx = topk_indices(s, spec.select)?;
        rows.push(t.gather_rows(&idx)?);
        picked_centers.extend(idx.iter().map(|&i| c[i]));
        chosen.push(idx);
    }
    let refs: Vec<&Tensor<F>> = rows.iter().collect();
    Ok(SelectionState {
        scores: scores.to_vec(),
        chosen,
        tokens: Tensor::concat_rows(&refs)?,
        centers: picked_centers,
    })
}
