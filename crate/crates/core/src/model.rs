//! Full model: frozen backbone, PointLoRA modules, classification head.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{make_patches, Point, PointCloud};
use crate::graph::Var;
use crate::nn::{fan_in_std, Ctx, Group, Init, Initializer, LayerNorm, Linear, LinearSpec, ParamId, ParamStore};
use crate::pointlora::{
    lora_merge, multi_scale_patches, predict_token_scores, LoraAdapter, MaskPredictor,
    MultiScaleConfig, PromptMlp, PromptMlps, SelectionState, Site,
};
use crate::real::Real;
use crate::tensor::{topk_indices, Tensor};
use crate::tokenizer::{embed_patches, points_tensor, MiniPointNet, PosNet, Role, TokenSequence};
use crate::transformer::{
    block_forward, drop_path_mask, pool_features, Block, BlockExtras, EncoderConfig, Layout,
};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TokenizerConfig {
    pub groups: usize,
    pub group_size: usize,
    pub hidden: [usize; 2],
    pub pos_hidden: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            groups: 128,
            group_size: 32,
            hidden: [128, 256],
            pos_hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct HeadConfig {
    /// Hidden widths of the MLP head; empty means a single linear layer.
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            classes: 15,
        }
    }
}

/// Where multi-scale tokens are embedded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PromptTokenizer {
    /// Reuse the frozen backbone mini-PointNet and positional net.
    Shared,
    /// A trainable copy of both, initialized from the backbone.
    Separate,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PeftConfig {
    pub rank: usize,
    pub scaling: f64,
    pub lora_init_std: f64,
    pub lora_sites: Vec<Site>,
    /// 1-based inclusive block range receiving adapters and prompt MLPs;
    /// `None` means every block.
    pub blocks: Option<[usize; 2]>,
    /// Mask predictor, prompt tokens and prompt MLPs. Off gives plain LoRA.
    pub token_selection: bool,
    pub prompt_width: usize,
    pub ffn_prompt_site: Site,
    /// Mask predictor hidden width; `None` uses the token width.
    pub mask_hidden: Option<usize>,
    pub multiscale: MultiScaleConfig,
    pub pool_prompts: bool,
    pub prompt_tokenizer: PromptTokenizer,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            scaling: 1.0,
            lora_init_std: 0.02,
            lora_sites: vec![Site::Qkv, Site::Proj],
            blocks: None,
            token_selection: true,
            prompt_width: 32,
            ffn_prompt_site: Site::Fc2,
            mask_hidden: None,
            multiscale: MultiScaleConfig::default(),
            pool_prompts: true,
            prompt_tokenizer: PromptTokenizer::Shared,
        }
    }
}

/// Which backbone parts train alongside the PointLoRA modules and head.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FreezeConfig {
    pub train_norms: bool,
    pub train_class_token: bool,
    pub train_positional: bool,
}

impl Default for FreezeConfig {
    fn default() -> Self {
        Self {
            train_norms: true,
            train_class_token: true,
            train_positional: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub tokenizer: TokenizerConfig,
    pub head: HeadConfig,
    pub peft: PeftConfig,
    pub freeze: FreezeConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let t = &self.tokenizer;
        if t.groups == 0 || t.group_size == 0 || t.hidden.contains(&0) || t.pos_hidden == 0 {
            return Err(Error::Config("tokenizer sizes must be positive".into()));
        }
        if self.head.classes < 2 {
            return Err(Error::Config("the head needs at least 2 classes".into()));
        }
        let p = &self.peft;
        if let Some([a, b]) = p.blocks {
            if a == 0 || a > b || b > self.encoder.depth {
                return Err(Error::Config(format!(
                    "block range {a}..={b} outside 1..={}",
                    self.encoder.depth
                )));
            }
        }
        if !p.scaling.is_finite() || p.lora_init_std < 0.0 {
            return Err(Error::Config("invalid adapter scaling or init".into()));
        }
        let e = &self.encoder;
        for &site in &p.lora_sites {
            let (i, o) = match site {
                Site::Qkv => (e.dim, 3 * e.dim),
                Site::Proj => (e.dim, e.dim),
                Site::Fc1 => (e.dim, e.ffn_dim),
                Site::Fc2 => (e.ffn_dim, e.dim),
            };
            if p.rank == 0 || p.rank >= i.min(o) {
                return Err(Error::Config(format!(
                    "rank {} must lie in 1..{} for the {} site",
                    p.rank,
                    i.min(o),
                    site.name()
                )));
            }
        }
        if matches!(p.ffn_prompt_site, Site::Qkv | Site::Proj) {
            return Err(Error::Config("the FFN prompt site must be fc1 or fc2".into()));
        }
        if p.token_selection {
            p.multiscale.validate()?;
            if p.prompt_width == 0 || p.mask_hidden == Some(0) {
                return Err(Error::Config("prompt widths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Smallest cloud every sampling stage can handle.
    pub fn min_points(&self) -> usize {
        let mut n = self.tokenizer.groups.max(self.tokenizer.group_size);
        if self.peft.token_selection {
            n = n.max(self.peft.multiscale.max_groups());
        }
        n
    }

    fn injected(&self, block: usize) -> bool {
        match self.peft.blocks {
            None => true,
            Some([a, b]) => (a..=b).contains(&(block + 1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptModule {
    pub mlps: PromptMlps,
    pub predictor: MaskPredictor,
    /// Present only for [`PromptTokenizer::Separate`].
    pub tokenizer: Option<(MiniPointNet, PosNet)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub tokenizer: MiniPointNet,
    pub pos: PosNet,
    pub cls_token: ParamId,
    pub cls_pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub prompt: Option<PromptModule>,
    pub head: Vec<Linear>,
}

/// Names of the trainable tensors after the freeze policy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeRegistry {
    pub trainable: Vec<String>,
}

impl<F: Real> Model<F> {
    /// Random backbone from `backbone_seed`; PointLoRA modules and head from
    /// `init_seed`. Adapters are attached and the freeze policy applied.
    pub fn random(config: ModelConfig, backbone_seed: u64, init_seed: u64) -> Result<Self> {
        let mut b = ChaCha8Rng::seed_from_u64(backbone_seed);
        let mut i = ChaCha8Rng::seed_from_u64(init_seed);
        Self::build(config, Initializer::new(&mut b), Initializer::new(&mut i), true)
    }

    /// Every tensor zero (norm gains one); for sizing and as a load target.
    pub fn zeroed(config: ModelConfig, with_adapters: bool) -> Result<Self> {
        Self::build(
            config,
            Initializer::<ChaCha8Rng>::zeroed(),
            Initializer::<ChaCha8Rng>::zeroed(),
            with_adapters,
        )
    }

    fn build<R: Rng + ?Sized>(
        config: ModelConfig,
        mut backbone: Initializer<'_, R>,
        mut fresh: Initializer<'_, R>,
        with_adapters: bool,
    ) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let d = enc.dim;
        let tc = &config.tokenizer;
        let mut store = ParamStore::new();
        let tokenizer = MiniPointNet::new(
            &mut store,
            &mut backbone,
            "tokenizer",
            (tc.hidden[0], tc.hidden[1]),
            d,
            Group::Tokenizer,
        );
        let pos = PosNet::new(&mut store, &mut backbone, "pos_embed", tc.pos_hidden, d, Group::Positional);
        let cls_token = store.push(
            "cls_token".into(),
            backbone.tensor(&[1, d], Init::Normal(0.02)),
            Group::ClassToken,
            false,
        );
        let cls_pos = store.push(
            "cls_pos".into(),
            backbone.tensor(&[1, d], Init::Normal(0.02)),
            Group::ClassToken,
            false,
        );
        let mut blocks: Vec<Block> = (0..enc.depth)
            .map(|i| Block::new(&mut store, &mut backbone, &format!("blocks.{i}"), enc))
            .collect();
        let norm = LayerNorm::new(&mut store, "norm", d);

        let p = &config.peft;
        if with_adapters {
            for (i, blk) in blocks.iter_mut().enumerate() {
                if !config.injected(i) {
                    continue;
                }
                for &site in &p.lora_sites {
                    let base = blk.linear(site).clone();
                    let name = store.get(base.weight).name.trim_end_matches(".weight").to_string();
                    blk.adapters[site.index()] = Some(LoraAdapter::new(
                        &mut store,
                        &mut fresh,
                        &name,
                        &base,
                        p.rank,
                        p.scaling,
                        p.lora_init_std,
                    )?);
                }
            }
        }

        let prompt = if p.token_selection {
            let ffn_in = match p.ffn_prompt_site {
                Site::Fc1 => (d, enc.ffn_dim),
                _ => (enc.ffn_dim, d),
            };
            let mlps = PromptMlps {
                qkv: PromptMlp::new(&mut store, &mut fresh, "prompt.qkv_mlp", (d, p.prompt_width, 3 * d)),
                ffn: PromptMlp::new(
                    &mut store,
                    &mut fresh,
                    "prompt.ffn_mlp",
                    (ffn_in.0, p.prompt_width, ffn_in.1),
                ),
                ffn_site: p.ffn_prompt_site,
            };
            let predictor = MaskPredictor::new(
                &mut store,
                &mut fresh,
                "prompt.mask_predictor",
                d,
                p.mask_hidden.unwrap_or(d),
            );
            let tokenizer = match p.prompt_tokenizer {
                PromptTokenizer::Shared => None,
                PromptTokenizer::Separate => {
                    let mut zero = Initializer::<R>::zeroed();
                    let net = MiniPointNet::new(
                        &mut store,
                        &mut zero,
                        "prompt.tokenizer",
                        (tc.hidden[0], tc.hidden[1]),
                        d,
                        Group::PromptTokenizer,
                    );
                    let pnet = PosNet::new(&mut store, &mut zero, "prompt.pos_embed", tc.pos_hidden, d, Group::PromptTokenizer);
                    copy_params(&mut store, &tokenizer_ids(&tokenizer), &tokenizer_ids(&net));
                    copy_params(&mut store, &posnet_ids(&pos), &posnet_ids(&pnet));
                    Some((net, pnet))
                }
            };
            Some(PromptModule {
                mlps,
                predictor,
                tokenizer,
            })
        } else {
            None
        };
        let hc = &config.head;
        let mut head = Vec::new();
        let mut width = 2 * d;
        let dims: Vec<usize> = hc.hidden.iter().copied().chain([hc.classes]).collect();
        for (j, &o) in dims.iter().enumerate() {
            let last = j + 1 == dims.len();
            head.push(Linear::new(
                &mut store,
                &mut fresh,
                LinearSpec {
                    name: &format!("head.{j}"),
                    in_dim: width,
                    out_dim: o,
                    bias: true,
                    group: Group::Head,
                    init: fan_in_std(width, if last { 1.0 } else { core::f64::consts::SQRT_2 }),
                },
            ));
            width = o;
        }

        let mut model = Self {
            config,
            store,
            tokenizer,
            pos,
            cls_token,
            cls_pos,
            blocks,
            norm,
            prompt,
            head,
        };
        model.apply_freeze_policy();
        Ok(model)
    }

    /// Marks the PointLoRA modules and head trainable, the backbone frozen
    /// (norms, class token and positional net per the freeze config).
    pub fn apply_freeze_policy(&mut self) -> FreezeRegistry {
        let f = self.config.freeze.clone();
        let mut trainable = Vec::new();
        for (_, p) in self.store.iter_mut() {
            p.trainable = match p.group {
                Group::Lora
                | Group::PromptMlp
                | Group::MaskPredictor
                | Group::PromptTokenizer
                | Group::Head => true,
                Group::Norm => f.train_norms,
                Group::ClassToken => f.train_class_token,
                Group::Positional => f.train_positional,
                Group::Tokenizer | Group::Attention | Group::Ffn => false,
            };
            if p.trainable {
                trainable.push(p.name.clone());
            }
        }
        FreezeRegistry { trainable }
    }

    pub fn registry(&self) -> FreezeRegistry {
        FreezeRegistry {
            trainable: self
                .store
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(_, p)| p.name.clone())
                .collect(),
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks.iter().any(|b| b.adapters.iter().any(Option::is_some))
    }

    /// Folds every adapter into its base weight.
    pub fn merge(&mut self) -> Result<()> {
        if !self.has_adapters() {
            return Err(Error::Contract("no adapters found".into()));
        }
        for blk in self.blocks.iter_mut() {
            for site in Site::ALL {
                if let Some(a) = blk.adapters[site.index()].take() {
                    lora_merge(&mut self.store, blk.linear(site), a)?;
                }
            }
        }
        Ok(())
    }

    /// Copies every backbone tensor (tokenizer, positional net, class token,
    /// norms, attention, FFN) from `source` by name; a separate prompt
    /// tokenizer is re-initialized from the new backbone tokenizer.
    pub fn load_backbone(&mut self, source: &ParamStore<F>) -> Result<()> {
        let mut updates = Vec::new();
        for (id, p) in self.store.iter() {
            if !p.group.is_backbone() {
                continue;
            }
            let src = source
                .find(&p.name)
                .map(|s| source.value(s))
                .ok_or_else(|| Error::Config(format!("backbone is missing tensor {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "backbone tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            updates.push((id, src.clone()));
        }
        for (id, v) in updates {
            self.store.get_mut(id).value = v;
        }
        if let Some((net, pnet)) = self.prompt.as_ref().and_then(|p| p.tokenizer.as_ref()) {
            copy_params(&mut self.store, &tokenizer_ids(&self.tokenizer), &tokenizer_ids(net));
            copy_params(&mut self.store, &posnet_ids(&self.pos), &posnet_ids(pnet));
        }
        Ok(())
    }

    fn prompted(&self, block: usize) -> bool {
        self.prompt.is_some() && self.config.injected(block)
    }

    /// Sequence length: class token, patches, prompts.
    pub fn seq_len(&self) -> usize {
        1 + self.config.tokenizer.groups
            + if self.prompt.is_some() {
                self.config.peft.multiscale.selected_total()
            } else {
                0
            }
    }

    pub fn roles(&self) -> Vec<Role> {
        let mut r = vec![Role::Class];
        r.extend(core::iter::repeat_n(Role::Patch, self.config.tokenizer.groups));
        if self.prompt.is_some() {
            r.extend(core::iter::repeat_n(Role::Prompt, self.config.peft.multiscale.selected_total()));
        }
        r
    }

    /// Sampling, grouping and every frozen embedding of one cloud.
    pub fn prepare(&self, cloud: &PointCloud) -> Result<CloudTokens<F>> {
        let need = self.config.min_points();
        if cloud.len() < need {
            return Err(Error::Range {
                what: "cloud size",
                value: cloud.len(),
                limit: need,
            });
        }
        let tc = &self.config.tokenizer;
        let patches = make_patches(cloud, tc.groups, tc.group_size)?;
        let patch_tokens = embed_patches(&self.store, &self.tokenizer, &patches)?;
        let mut scales = Vec::new();
        if let Some(pm) = &self.prompt {
            for p in multi_scale_patches(cloud, &self.config.peft.multiscale)? {
                let tokens = match pm.tokenizer {
                    None => Some(embed_patches(&self.store, &self.tokenizer, &p)?),
                    Some(_) => None,
                };
                scales.push(ScaleTokens {
                    offsets: points_tensor(&p.offsets),
                    group_size: p.group_size,
                    centers: p.centers,
                    tokens,
                });
            }
        }
        Ok(CloudTokens {
            patch_tokens,
            patch_centers: patches.centers,
            scales,
            label: cloud.label,
        })
    }

    fn pos_net(&self) -> &PosNet {
        match self.prompt.as_ref().and_then(|p| p.tokenizer.as_ref()) {
            Some((_, pos)) => pos,
            None => &self.pos,
        }
    }

    /// Prompt tokens for one cloud: `(tokens + positions, all scores,
    /// chosen indices per scale)`.
    fn prompt_tokens(
        &self,
        ctx: &mut Ctx<'_, F>,
        pm: &PromptModule,
        item: &CloudTokens<F>,
    ) -> Result<(Var, Var, Vec<Vec<usize>>, Vec<Point>)> {
        let ms = &self.config.peft.multiscale;
        if item.scales.len() != ms.scales.len() {
            return Err(Error::Contract("tokens were prepared for another config".into()));
        }
        let mut per_scale = Vec::with_capacity(ms.scales.len());
        for s in &item.scales {
            per_scale.push(match (&s.tokens, &pm.tokenizer) {
                (Some(t), _) => ctx.constant(t.clone()),
                (None, Some((net, _))) => {
                    let x = ctx.constant(s.offsets.clone());
                    net.forward(ctx, x, s.group_size)?
                }
                (None, None) => return Err(Error::Contract("missing cached scale tokens".into())),
            });
        }
        let stacked = if per_scale.len() == 1 {
            per_scale[0]
        } else {
            ctx.g.concat_rows(&per_scale)?
        };
        let scores = predict_token_scores(ctx, &pm.predictor, stacked)?;
        let values = ctx.value(scores).data().to_vec();
        let mut chosen = Vec::with_capacity(ms.scales.len());
        let mut rows = Vec::new();
        let mut centers = Vec::new();
        let mut offset = 0;
        for (spec, s) in ms.scales.iter().zip(&item.scales) {
            let idx = topk_indices(&values[offset..offset + spec.groups], spec.select)?;
            rows.extend(idx.iter().map(|&i| offset + i));
            centers.extend(idx.iter().map(|&i| s.centers[i]));
            chosen.push(idx);
            offset += spec.groups;
        }
        let tokens = ctx.g.gather_rows(stacked, &rows)?;
        let c = ctx.constant(points_tensor(&centers));
        let pos = self.pos_net().forward(ctx, c)?;
        let prompts = ctx.g.add(tokens, pos)?;
        Ok((prompts, scores, chosen, centers))
    }

    /// Batched forward. `rng` switches on stochastic depth (training).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        ctx: &mut Ctx<'_, F>,
        batch: &[&CloudTokens<F>],
        rng: Option<&mut R>,
    ) -> Result<ForwardOut> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let d = self.config.encoder.dim;
        let cls = ctx.p(self.cls_token);
        let cls_pos = ctx.p(self.cls_pos);
        let cls = ctx.g.add(cls, cls_pos)?;
        let mut seqs = Vec::with_capacity(batch.len());
        let mut scores = Vec::new();
        let mut chosen = Vec::new();
        for item in batch {
            if item.patch_tokens.shape() != [self.config.tokenizer.groups, d] {
                return Err(crate::error::shape_err(
                    "forward",
                    item.patch_tokens.shape(),
                    &[self.config.tokenizer.groups, d],
                ));
            }
            let t = ctx.constant(item.patch_tokens.clone());
            let c = ctx.constant(points_tensor(&item.patch_centers));
            let pe = self.pos.forward(ctx, c)?;
            let patches = ctx.g.add(t, pe)?;
            let mut parts = vec![cls, patches];
            if let Some(pm) = &self.prompt {
                let (p, s, idx, _) = self.prompt_tokens(ctx, pm, item)?;
                parts.push(p);
                scores.push(s);
                chosen.push(idx);
            }
            seqs.push(ctx.g.concat_rows(&parts)?);
        }
        let layout = Layout {
            batch: batch.len(),
            seq: self.seq_len(),
        };
        let x = if seqs.len() == 1 {
            seqs[0]
        } else {
            ctx.g.concat_rows(&seqs)?
        };
        let prompts = self.prompt.as_ref().map(|p| &p.mlps);
        let x = self.encode(ctx, layout, x, prompts, rng)?;
        let roles = self.roles();
        let mut h = pool_features(ctx, x, layout, &roles, self.config.peft.pool_prompts)?;
        for (j, lin) in self.head.iter().enumerate() {
            h = lin.forward(ctx, h)?;
            if j + 1 < self.head.len() {
                h = ctx.g.relu(h)?;
            }
        }
        let scores = match scores.len() {
            0 => None,
            1 => Some(scores[0]),
            _ => Some(ctx.g.concat_rows(&scores)?),
        };
        Ok(ForwardOut {
            logits: h,
            scores,
            chosen,
        })
    }

    /// Blocks plus final norm; prompt MLPs only inside the injected range.
    fn encode<R: Rng + ?Sized>(
        &self,
        ctx: &mut Ctx<'_, F>,
        layout: Layout,
        x: Var,
        prompts: Option<&PromptMlps>,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let enc = &self.config.encoder;
        let rates = enc.drop_rates();
        let mut x = x;
        for (i, blk) in self.blocks.iter().enumerate() {
            let mut extras = BlockExtras {
                prompts: if self.prompted(i) { prompts } else { None },
                ..Default::default()
            };
            if let Some(r) = rng.as_deref_mut() {
                extras.drop_attn = drop_path_mask(r, layout, enc.dim, rates[i]);
                extras.drop_ffn = drop_path_mask(r, layout, enc.dim, rates[i]);
            }
            x = block_forward(ctx, blk, enc, layout, x, &extras)?;
        }
        self.norm.forward(ctx, x)
    }

    /// Eval-mode logits (`batch×classes`).
    pub fn logits(&self, batch: &[&CloudTokens<F>]) -> Result<Tensor<F>> {
        let mut ctx = Ctx::new(&self.store, false);
        let out = self.forward::<ChaCha8Rng>(&mut ctx, batch, None)?;
        Ok(ctx.g.value(out.logits).clone())
    }

    /// Eval-mode class predictions, lowest class index on ties.
    pub fn predict(&self, batch: &[&CloudTokens<F>]) -> Result<Vec<usize>> {
        let l = self.logits(batch)?;
        Ok((0..l.rows())
            .map(|i| topk_indices(l.row(i), 1).map(|v| v[0]).unwrap_or(0))
            .collect())
    }

    /// Selection state of one prepared cloud (eval mode).
    pub fn selection(&self, item: &CloudTokens<F>) -> Result<Option<SelectionState<F>>> {
        let Some(pm) = &self.prompt else { return Ok(None) };
        let mut ctx = Ctx::new(&self.store, false);
        let (prompts, scores, chosen, centers) = self.prompt_tokens(&mut ctx, pm, item)?;
        let values = ctx.value(scores).data();
        let mut per_scale = Vec::new();
        let mut offset = 0;
        for s in &self.config.peft.multiscale.scales {
            per_scale.push(values[offset..offset + s.groups].to_vec());
            offset += s.groups;
        }
        Ok(Some(SelectionState {
            scores: per_scale,
            chosen,
            tokens: ctx.g.value(prompts).clone(),
            centers,
        }))
    }

    /// Encoder input of one prepared cloud (eval mode), with roles.
    pub fn token_sequence(&self, item: &CloudTokens<F>) -> Result<TokenSequence<F>> {
        let mut ctx = Ctx::new(&self.store, false);
        let cls = ctx.p(self.cls_token);
        let cp = ctx.p(self.cls_pos);
        let cls = ctx.g.add(cls, cp)?;
        let t = ctx.constant(item.patch_tokens.clone());
        let c = ctx.constant(points_tensor(&item.patch_centers));
        let pe = self.pos.forward(&mut ctx, c)?;
        let patches = ctx.g.add(t, pe)?;
        let mut parts = vec![cls, patches];
        let mut centers = vec![[0.0; 3]];
        centers.extend(item.patch_centers.iter().copied());
        if let Some(pm) = &self.prompt {
            let (p, _, _, pc) = self.prompt_tokens(&mut ctx, pm, item)?;
            parts.push(p);
            centers.extend(pc);
        }
        let x = ctx.g.concat_rows(&parts)?;
        TokenSequence::new(ctx.g.value(x).clone(), centers, self.roles())
    }
}

fn tokenizer_ids(n: &MiniPointNet) -> Vec<ParamId> {
    n.first.iter().chain(&n.second).flat_map(Linear::params).collect()
}

fn posnet_ids(n: &PosNet) -> Vec<ParamId> {
    n.layers.iter().flat_map(Linear::params).collect()
}

fn copy_params<F: Real>(store: &mut ParamStore<F>, from: &[ParamId], to: &[ParamId]) {
    for (&a, &b) in from.iter().zip(to) {
        let v = store.value(a).clone();
        store.get_mut(b).value = v;
    }
}

/// Frozen-path data of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTokens<F> {
    /// `(g·k)×3` centered neighbours.
    pub offsets: Tensor<F>,
    pub group_size: usize,
    pub centers: Vec<Point>,
    /// Cached embeddings when the prompt tokenizer is frozen.
    pub tokens: Option<Tensor<F>>,
}

/// Everything about one cloud that does not depend on trainable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudTokens<F> {
    pub patch_tokens: Tensor<F>,
    pub patch_centers: Vec<Point>,
    pub scales: Vec<ScaleTokens<F>>,
    pub label: Option<usize>,
}

pub struct ForwardOut {
    pub logits: Var,
    /// `(batch·N_total)×1` mask-predictor scores over every generated token.
    pub scores: Option<Var>,
    pub chosen: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub group: Group,
    pub total: usize,
    pub tunable: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub total: usize,
    pub tunable: usize,
    pub ratio: f64,
    pub rows: Vec<AuditRow>,
}

/// Exact parameter counts under the model's current freeze flags.
pub fn audit_parameters<F: Real>(model: &Model<F>) -> AuditReport {
    let mut rows: Vec<AuditRow> = Group::ALL
        .iter()
        .map(|&group| AuditRow {
            group,
            total: 0,
            tunable: 0,
        })
        .collect();
    for (_, p) in model.store.iter() {
        let row = rows.iter_mut().find(|r| r.group == p.group).expect("known group");
        row.total += p.value.numel();
        if p.trainable {
            row.tunable += p.value.numel();
        }
    }
    rows.retain(|r| r.total > 0);
    let total = rows.iter().map(|r| r.total).sum();
    let tunable = rows.iter().map(|r| r.tunable).sum();
    AuditReport {
        total,
        tunable,
        ratio: if total == 0 { 0.0 } else { tunable as f64 / total as f64 },
        rows,
    }
}
