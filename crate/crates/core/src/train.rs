//! AdamW training loop with warmup, cosine decay, and gradient clipping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Mode;
use crate::error::{Error, Result};
use crate::head::{scene_loss, LossBreakdown, LossConfig};
use crate::model::Detector;
use crate::nn::{Graph, ParamStore};
use crate::sim::{apply_drop, Drop, Scene};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Zero one randomly chosen camera per scene with `drop_probability`.
    pub drop_augment: bool,
    pub drop_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.02,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 10.0,
            drop_augment: false,
            drop_probability: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..=1.0).contains(&self.min_lr_ratio)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.grad_clip >= 0.0
            && (0.0..=1.0).contains(&self.drop_probability);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = peak * self.min_lr_ratio;
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam moments with decoupled weight decay on dense weight matrices.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(store),
            v: zeros(store),
            decay: store
                .ids()
                .map(|id| store.get(id).rank() == 2 && store.name(id).ends_with(".weight"))
                .collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let wd = if self.decay[i] { cfg.weight_decay } else { 0.0 };
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
                *x -= lr * (update + wd * *x);
            }
        }
    }
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Batch-mean per-layer components.
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
    pub grad_norm: f64,
    pub scenes: Vec<usize>,
}

/// Mean deep-supervised loss over a batch, forward only.
pub fn batch_loss(det: &Detector, scenes: &[&Scene], cfg: &LossConfig) -> Result<(f64, LossBreakdown)> {
    let mut g = Graph::new(&det.store, false);
    let (loss, parts) = batch_graph(det, &mut g, scenes, cfg)?;
    Ok((g.value(loss).item(), parts))
}

fn batch_graph(
    det: &Detector,
    g: &mut Graph<'_>,
    scenes: &[&Scene],
    cfg: &LossConfig,
) -> Result<(crate::Var, LossBreakdown)> {
    let inputs: Vec<_> = scenes.iter().map(|s| s.input()).collect();
    let preds = det.forward(g, &inputs, Mode::Train)?;
    for (k, layer) in preds.iter().flatten().enumerate() {
        let finite = |v| g.value(v).data().iter().all(|x: &f64| x.is_finite());
        if !finite(layer.logits) || !finite(layer.decoded) {
            return Err(Error::Numerical(format!(
                "non-finite predictions in decoder output {k}"
            )));
        }
    }
    let scale = 1.0 / scenes.len() as f64;
    let mut total = None;
    let mut parts = LossBreakdown::default();
    for (p, s) in preds.iter().zip(scenes) {
        let (l, b) = scene_loss(g, p, &s.objects, det.config.num_classes, cfg)?;
        parts.accumulate(&b, scale);
        total = Some(match total {
            Some(t) => g.tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    Ok((g.tape.scale(total, scale), parts))
}

/// Gradient of the mean batch loss w.r.t. every parameter.
pub fn batch_gradients(
    det: &Detector,
    scenes: &[&Scene],
    cfg: &LossConfig,
) -> Result<(f64, LossBreakdown, Vec<Option<Tensor>>)> {
    let mut g = Graph::new(&det.store, true);
    let (loss, parts) = batch_graph(det, &mut g, scenes, cfg)?;
    let value = g.value(loss).item();
    let mut grads = g.tape.backward(loss)?;
    Ok((value, parts, g.param_grads(&mut grads)))
}

/// Trains `det` on `scenes`, calling `on_step` after every update.
///
/// A non-finite loss or gradient aborts with [`Error::Numerical`] before
/// the parameters are touched.
pub fn train(
    det: &mut Detector,
    scenes: &[Scene],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(&det.store);
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let mut batch: Vec<Scene> = Vec::new();
        let mut refs: Vec<&Scene> = Vec::new();
        if cfg.drop_augment {
            for &i in &idx {
                let s = &scenes[i];
                let cams = s.images.shape()[0];
                if cams > 1 && rng.random_bool(cfg.drop_probability) {
                    let c = rng.random_range(0..cams);
                    batch.push(apply_drop(s, &Drop::Cameras(vec![c]))?);
                } else {
                    batch.push(s.clone());
                }
            }
            refs.extend(batch.iter());
        } else {
            refs.extend(idx.iter().map(|&i| &scenes[i]));
        }
        let (loss, parts, mut grads) = batch_gradients(det, &refs, loss_cfg).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("step {step}, scenes {idx:?}: {m}")),
            e => e,
        })?;
        let sq: f64 = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "step {step}: loss {loss}, gradient norm {norm}, scenes {idx:?}, per-layer cls {:?} reg {:?}",
                parts.cls, parts.reg
            )));
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut det.store, &grads, lr, cfg);
        let log = StepLog {
            step,
            lr,
            loss,
            cls: parts.cls,
            reg: parts.reg,
            grad_norm: norm,
            scenes: idx,
        };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}
