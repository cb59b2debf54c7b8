//! Named parameters, their component groups, and binding into a [`Graph`].
//!
//! Every weight of a model lives in one [`ParamStore`]; modules only hold
//! [`ParamId`]s. Sharing a module between call sites therefore means sharing
//! ids, which makes "same instance" checks trivial.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{affine, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to. Drives the freeze policy
/// and the audit breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Group {
    Tokenizer,
    Positional,
    ClassToken,
    Norm,
    Attention,
    Ffn,
    Lora,
    PromptMlp,
    MaskPredictor,
    PromptTokenizer,
    Head,
}

impl Group {
    pub const ALL: [Group; 11] = [
        Group::Tokenizer,
        Group::Positional,
        Group::ClassToken,
        Group::Norm,
        Group::Attention,
        Group::Ffn,
        Group::Lora,
        Group::PromptMlp,
        Group::MaskPredictor,
        Group::PromptTokenizer,
        Group::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Tokenizer => "tokenizer",
            Group::Positional => "positional",
            Group::ClassToken => "class_token",
            Group::Norm => "norm",
            Group::Attention => "attention",
            Group::Ffn => "ffn",
            Group::Lora => "lora",
            Group::PromptMlp => "prompt_mlp",
            Group::MaskPredictor => "mask_predictor",
            Group::PromptTokenizer => "prompt_tokenizer",
            Group::Head => "head",
        }
    }

    /// Parts of the pre-trained encoder, as opposed to fine-tuning additions.
    pub fn is_backbone(self) -> bool {
        matches!(
            self,
            Group::Tokenizer | Group::Positional | Group::ClassToken | Group::Norm | Group::Attention | Group::Ffn
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub group: Group,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    slots: Vec<Option<Param<F>>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn push(&mut self, name: String, value: Tensor<F>, group: Group, decay: bool) -> ParamId {
        self.slots.push(Some(Param {
            name,
            value,
            group,
            trainable: false,
            decay,
        }));
        ParamId(self.slots.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        self.slots[id.0].as_mut().expect("parameter was removed")
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.get(id).value
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param<F>> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    /// Live parameters in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| p.as_mut().map(|p| (ParamId(i), p)))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn numel(&self) -> usize {
        self.iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}

/// How a fresh tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Builds parameter tensors. Without an RNG every tensor is zero-filled,
/// which is what the auditor uses to size a model cheaply.
pub struct Initializer<'r, R: ?Sized> {
    rng: Option<&'r mut R>,
}

impl<'r, R: Rng + ?Sized> Initializer<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn zeroed() -> Self {
        Self { rng: None }
    }

    pub fn tensor<F: Real>(&mut self, shape: &[usize], init: Init) -> Tensor<F> {
        match (init, self.rng.as_deref_mut()) {
            (Init::Ones, _) => Tensor::full(shape, F::one()),
            (Init::Normal(std), Some(rng)) if std > 0.0 => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
            }
            _ => Tensor::zeros(shape),
        }
    }
}

/// Dense layer `x·W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct LinearSpec<'a> {
    pub name: &'a str,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
    pub group: Group,
    pub init: Init,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<'_, R>,
        spec: LinearSpec<'_>,
    ) -> Self {
        let w = init.tensor(&[spec.in_dim, spec.out_dim], spec.init);
        let weight = store.push(alloc::format!("{}.weight", spec.name), w, spec.group, true);
        let bias = spec.bias.then(|| {
            store.push(
                alloc::format!("{}.bias", spec.name),
                Tensor::zeros(&[spec.out_dim]),
                spec.group,
                false,
            )
        });
        Self {
            weight,
            bias,
            in_dim: spec.in_dim,
            out_dim: spec.out_dim,
        }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        affine(&mut ctx.g, x, w, b)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        core::iter::once(self.weight).chain(self.bias)
    }
}

/// `std = gain/√fan_in`, the scale that keeps activations O(1) through a
/// random network.
pub fn fan_in_std(fan_in: usize, gain: f64) -> Init {
    Init::Normal(gain / libm::sqrt(fan_in as f64))
}

/// Learned affine layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.push(
            alloc::format!("{name}.gamma"),
            Tensor::full(&[dim], F::one()),
            Group::Norm,
            false,
        );
        let beta = store.push(
            alloc::format!("{name}.beta"),
            Tensor::zeros(&[dim]),
            Group::Norm,
            false,
        );
        Self { gamma, beta }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.g.layer_norm(x, g, b, F::lit(LN_EPS))
    }
}

/// One forward pass: a fresh graph plus lazily bound parameters.
///
/// With `grad` off every parameter enters as a constant, so nothing is
/// differentiated.
pub struct Ctx<'s, F> {
    pub g: Graph<F>,
    store: &'s ParamStore<F>,
    bound: Vec<Option<Var>>,
    grad: bool,
}

impl<'s, F: Real> Ctx<'s, F> {
    pub fn new(store: &'s ParamStore<F>, grad: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.slots.len()],
            grad,
        }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    /// Graph handle for a parameter; bound once per pass.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.g.leaf(p.value.clone(), self.grad && p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.g.value(v)
    }

    /// Gradients of `loss` for every trainable parameter this pass touched.
    pub fn gradients(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<F>)>> {
        if !self.grad {
            return Err(Error::Contract("gradients requested from a no-grad pass".into()));
        }
        let mut grads = self.g.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.take(v).map(|t| (ParamId(i), t))
            })
            .collect())
    }
}
