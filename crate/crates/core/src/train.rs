//! Losses, AdamW, the warmup-cosine schedule and the train/eval loops.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::graph::Var;
use crate::model::{CloudTokens, Model};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.004,
            epsilon: 1e-6,
            label_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.epsilon > 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(alloc::format!(
                "invalid loss config: lambda {}, epsilon {}, smoothing {}",
                self.lambda,
                self.epsilon,
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Random anisotropic scale and translation of training clouds.
    pub augment: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            min_lr: 1e-6,
            weight_decay: 0.05,
            epochs: 300,
            warmup_epochs: 10,
            batch_size: 32,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip: None,
            augment: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(alloc::format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs,
                self.epochs
            )));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("invalid learning rate or weight decay".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy with label smoothing.
pub fn task_loss<F: Real>(ctx: &mut Ctx<'_, F>, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    ctx.g.cross_entropy(logits, labels, F::lit(smoothing))
}

/// `−mean(s·ln(s+ε) + (1−s)·ln(1−s+ε))` over every generated token.
pub fn mask_loss<F: Real>(ctx: &mut Ctx<'_, F>, scores: Var, epsilon: f64) -> Result<Var> {
    ctx.g.binary_entropy(scores, F::lit(epsilon))
}

pub fn total_loss<F: Real>(ctx: &mut Ctx<'_, F>, task: Var, mask: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    match mask {
        Some(m) if cfg.lambda != 0.0 => {
            let w = ctx.g.scale(m, F::lit(cfg.lambda))?;
            ctx.g.add(task, w)
        }
        _ => Ok(task),
    }
}

/// Plain-number mask loss, for reporting and oracles.
pub fn mask_loss_value(scores: &[f64], epsilon: f64) -> f64 {
    let n = scores.len() as f64;
    -scores
        .iter()
        .map(|&s| s * libm::log(s + epsilon) + (1.0 - s) * libm::log(1.0 - s + epsilon))
        .sum::<f64>()
        / n
}

/// Linear warmup from 0 to `peak`, then cosine decay reaching `floor` at
/// the final step.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, peak: f64, floor: f64) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(warmup_steps);
    if span == 0 {
        return if step + 1 >= total_steps { floor } else { peak };
    }
    let t = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
}

/// One AdamW update of a flat parameter slice, in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<F: Real>(
    p: &mut [F],
    g: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    lr: f64,
    weight_decay: f64,
    cfg: &OptimConfig,
) {
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - libm::pow(b1, t as f64);
    let bc2 = 1.0 - libm::pow(b2, t as f64);
    let (b1f, b2f) = (F::lit(b1), F::lit(b2));
    let decay = F::lit(1.0 - lr * weight_decay);
    let step = F::lit(lr / bc1);
    let bc2f = F::lit(bc2);
    let eps = F::lit(cfg.eps);
    for i in 0..p.len() {
        m[i] = b1f * m[i] + (F::one() - b1f) * g[i];
        v[i] = b2f * v[i] + (F::one() - b2f) * g[i] * g[i];
        p[i] = p[i] * decay - step * m[i] / ((v[i] / bc2f).sqrt() + eps);
    }
}

/// AdamW with decoupled decay on parameters flagged for it.
#[derive(Clone, Debug, Default)]
pub struct AdamW<F> {
    state: BTreeMap<ParamId, (Tensor<F>, Tensor<F>)>,
    pub t: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new() -> Self {
        Self {
            state: BTreeMap::new(),
            t: 0,
        }
    }

    /// Applies one step. Gradients for frozen parameters are rejected.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[(ParamId, Tensor<F>)],
        lr: f64,
        cfg: &OptimConfig,
    ) -> Result<()> {
        self.t += 1;
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                return Err(Error::Contract(alloc::format!("gradient for frozen tensor {}", p.name)));
            }
            if g.shape() != p.value.shape() {
                return Err(crate::error::shape_err("adamw", p.value.shape(), g.shape()));
            }
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            let (m, v) = self
                .state
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            adamw_update(p.value.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, lr, wd, cfg);
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<F: Real>(grads: &mut [(ParamId, Tensor<F>)], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Random anisotropic scale in [0.67, 1.5] and translation in [−0.2, 0.2]
/// per axis.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> PointCloud {
    let s: [f64; 3] = core::array::from_fn(|_| rng.random_range(2.0 / 3.0..1.5));
    let t: [f64; 3] = core::array::from_fn(|_| rng.random_range(-0.2..0.2));
    let pts = cloud
        .points()
        .iter()
        .map(|p| core::array::from_fn(|i| p[i] * s[i] + t[i]))
        .collect();
    let mut out = PointCloud::new(pts).expect("finite affine image of a valid cloud");
    out.label = cloud.label;
    out
}

/// Labeled clouds plus their frozen-path preprocessing.
pub struct Prepared<F> {
    pub clouds: Vec<PointCloud>,
    pub tokens: Vec<CloudTokens<F>>,
}

impl<F: Real> Prepared<F> {
    pub fn new(model: &Model<F>, clouds: Vec<PointCloud>) -> Result<Self> {
        if clouds.iter().any(|c| c.label.is_none()) {
            return Err(Error::Contract("every cloud needs a label".into()));
        }
        let tokens = clouds.iter().map(|c| model.prepare(c)).collect::<Result<_>>()?;
        Ok(Self { clouds, tokens })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Optimizer state and schedule position across epochs.
pub struct Trainer<F> {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub adam: AdamW<F>,
    pub step: usize,
    pub epoch: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new(optim: OptimConfig, loss: LossConfig) -> Result<Self> {
        optim.validate()?;
        loss.validate()?;
        Ok(Self {
            optim,
            loss,
            adam: AdamW::new(),
            step: 0,
            epoch: 0,
        })
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.optim.batch_size)
    }

    pub fn lr_at(&self, step: usize, n: usize) -> f64 {
        let spe = self.steps_per_epoch(n);
        lr_schedule(
            step,
            self.optim.epochs * spe,
            self.optim.warmup_epochs * spe,
            self.optim.lr,
            self.optim.min_lr,
        )
    }

    /// One loss/backward/update step on a batch; returns `(loss, correct)`.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        model: &mut Model<F>,
        batch: &[&CloudTokens<F>],
        lr: f64,
        rng: &mut R,
    ) -> Result<(f64, usize)> {
        let labels: Vec<usize> = batch
            .iter()
            .map(|t| t.label.ok_or_else(|| Error::Contract("unlabeled cloud".into())))
            .collect::<Result<_>>()?;
        let (loss, correct, mut grads) = {
            let mut ctx = Ctx::new(&model.store, true);
            let out = model.forward(&mut ctx, batch, Some(rng))?;
            let task = task_loss(&mut ctx, out.logits, &labels, self.loss.label_smoothing)?;
            let mask = match out.scores {
                Some(s) => Some(mask_loss(&mut ctx, s, self.loss.epsilon)?),
                None => None,
            };
            let total = total_loss(&mut ctx, task, mask, &self.loss)?;
            let logits = ctx.value(out.logits);
            let correct = (0..logits.rows())
                .filter(|&i| argmax(logits.row(i)) == labels[i])
                .count();
            let loss = ctx.value(total).item().as_f64();
            (loss, correct, ctx.gradients(total)?)
        };
        if let Some(c) = self.optim.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        self.adam.step(&mut model.store, &grads, lr, &self.optim)?;
        Ok((loss, correct))
    }

    /// One pass over `data` in a seeded random order.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        model: &mut Model<F>,
        data: &Prepared<F>,
        rng: &mut R,
    ) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let n = data.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(self.optim.batch_size) {
            let lr = self.lr_at(self.step, n);
            last_lr = lr;
            let (loss, c) = if self.optim.augment {
                let fresh: Vec<CloudTokens<F>> = chunk
                    .iter()
                    .map(|&i| model.prepare(&augment(&data.clouds[i], rng)))
                    .collect::<Result<_>>()?;
                let batch: Vec<&CloudTokens<F>> = fresh.iter().collect();
                self.train_step(model, &batch, lr, rng)?
            } else {
                let batch: Vec<&CloudTokens<F>> = chunk.iter().map(|&i| &data.tokens[i]).collect();
                self.train_step(model, &batch, lr, rng)?
            };
            loss_sum += loss * chunk.len() as f64;
            correct += c;
            self.step += 1;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            lr: last_lr,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        })
    }
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Overall accuracy in eval mode.
pub fn evaluate<F: Real>(model: &Model<F>, data: &Prepared<F>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let mut correct = 0;
    for chunk in data.tokens.chunks(batch_size.max(1)) {
        let batch: Vec<&CloudTokens<F>> = chunk.iter().collect();
        let pred = model.predict(&batch)?;
        correct += pred
            .iter()
            .zip(chunk)
            .filter(|(p, t)| t.label == Some(**p))
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of explicit predictions.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Contract("prediction/label mismatch or empty set".into()));
    }
    let hit = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hit as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_examples() {
        let cfg = OptimConfig::default();
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, 0.0, &cfg);
        assert_eq!(p, [1.0]);
        adamw_update(&mut p, &[1.0], &mut [0.0], &mut [0.0], 1, 0.1, 0.0, &cfg);
        // bias-corrected first step moves by ≈ lr
        assert!((p[0] - 0.9).abs() < 1e-6);
        let mut p = [2.0f64];
        adamw_update(&mut p, &[0.0], &mut [0.0], &mut [0.0], 1, 0.1, 0.05, &cfg);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints() {
        let (total, warm) = (100, 10);
        assert_eq!(lr_schedule(0, total, warm, 5e-4, 1e-6), 0.0);
        assert!((lr_schedule(10, total, warm, 5e-4, 1e-6) - 5e-4).abs() < 1e-15);
        assert!((lr_schedule(99, total, warm, 5e-4, 1e-6) - 1e-6).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 10..100 {
            let lr = lr_schedule(s, total, warm, 5e-4, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn mask_loss_values() {
        assert!((mask_loss_value(&[0.5; 7], 1e-6) - core::f64::consts::LN_2).abs() < 1e-5);
        let eps = 1e-6;
        let h = |s: f64| -(s * (s + eps).ln() + (1.0 - s) * (1.0 - s + eps).ln());
        let mixed = mask_loss_value(&[0.5, 1.0 - eps], eps);
        assert!((mixed - 0.5 * (h(0.5) + h(1.0 - eps))).abs() < 1e-12);
        assert!(mask_loss_value(&[1e-9, 1.0 - 1e-9], eps) < 1e-4);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = alloc::vec![(ParamId(0), Tensor::<f64>::full(&[4], 3.0))];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 6.0).abs() < 1e-12);
        let after: f64 = g[0].1.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
