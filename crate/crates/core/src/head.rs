//! Box and class heads, the set-prediction loss, and box types.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::WorldRange;
use crate::matching::hungarian;
use crate::nn::{Graph, Mlp, ParamStore};
use crate::tensor::{focal_term, Tensor, Var};

/// Regression layout: center offset (3, meters), log size (w, l, h),
/// sin yaw, cos yaw, vx, vy.
pub const BOX_DIMS: usize = 10;

/// Ground-truth object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub center: [f64; 3],
    /// `[w, l, h]` in meters.
    pub size: [f64; 3],
    /// Heading in `(−π, π]`.
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class: usize,
    #[serde(default)]
    pub track_id: u64,
}

impl GtBox {
    /// Regression target with an absolute center.
    pub fn encode(&self) -> [f64; BOX_DIMS] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0].ln(),
            self.size[1].ln(),
            self.size[2].ln(),
            s,
            c,
            self.velocity[0],
            self.velocity[1],
        ]
    }
}

/// Decoded prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class: usize,
    pub score: f64,
}

impl Detection {
    /// Box parameters in absolute-center form (see [`GtBox::encode`]).
    pub fn from_params(p: &[f64], class: usize, score: f64) -> Self {
        Self {
            center: [p[0], p[1], p[2]],
            size: [p[3].exp(), p[4].exp(), p[5].exp()],
            yaw: p[6].atan2(p[7]),
            velocity: [p[8], p[9]],
            class,
            score,
        }
    }

    /// Oracle detection of a ground-truth box.
    pub fn from_gt(gt: &GtBox, score: f64) -> Self {
        Self {
            center: gt.center,
            size: gt.size,
            yaw: gt.yaw,
            velocity: gt.velocity,
            class: gt.class,
            score,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub box_weights: [f64; BOX_DIMS],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 2.0,
            reg_weight: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            // velocity counts double
            box_weights: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.cls_weight, self.reg_weight, self.focal_alpha, self.focal_gamma]
            .iter()
            .chain(&self.box_weights)
            .all(|w| w.is_finite() && *w >= 0.0)
            && self.focal_alpha <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Classification and regression FFNs, shared by every decoder layer.
#[derive(Clone, Debug)]
pub struct Heads {
    pub cls: Mlp,
    pub reg: Mlp,
    pub num_classes: usize,
    pub range: WorldRange,
}

/// One layer's predictions on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `[n × classes]`.
    pub logits: Var,
    /// `[n × 10]` with the center relative to the reference point.
    pub boxes: Var,
    /// `[n × 10]` with an absolute center.
    pub decoded: Var,
}

impl Heads {
    pub const PRIOR: f64 = 0.01;

    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        dim: usize,
        num_classes: usize,
        range: WorldRange,
    ) -> Self {
        let cls = Mlp::new(store, rng, "head.cls", dim, dim, num_classes);
        let bias = -((1.0 - Self::PRIOR) / Self::PRIOR).ln();
        store.get_mut(cls.fc2.b.expect("class bias")).data_mut().fill(bias);
        Self {
            cls,
            reg: Mlp::new(store, rng, "head.reg", dim, dim, BOX_DIMS),
            num_classes,
            range,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for l in [&self.cls.fc1, &self.cls.fc2, &self.reg.fc1, &self.reg.fc2] {
            l.zero(store);
        }
    }

    pub fn predict(&self, g: &mut Graph<'_>, features: Var, refs: Var) -> Result<Prediction> {
        let logits = self.cls.forward(g, features)?;
        let boxes = self.reg.forward(g, features)?;
        let ext = g.constant(Tensor::new(vec![3], self.range.extent().to_vec())?);
        let lo = g.constant(Tensor::new(vec![3], self.range.min().to_vec())?);
        let world = g.tape.mul(refs, ext)?;
        let world = g.tape.add(world, lo)?;
        let offset = g.tape.slice(boxes, 1, 0, 3)?;
        let center = g.tape.add(world, offset)?;
        let rest = g.tape.slice(boxes, 1, 3, BOX_DIMS - 3)?;
        let decoded = g.tape.concat(&[center, rest], 1)?;
        Ok(Prediction {
            logits,
            boxes,
            decoded,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// All queries of one prediction as detections, highest class per query.
pub fn decode(logits: &Tensor, decoded: &Tensor) -> Vec<Detection> {
    let n = logits.shape()[0];
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let (class, &best) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (k, v)| if *v > *acc.1 { (k, v) } else { acc });
            Detection::from_params(decoded.row(i), class, sigmoid(best))
        })
        .collect()
}

/// Matching cost `[n × m]`: weighted positive focal term of the GT class
/// plus weighted mean L1 distance of the absolute box parameters.
pub fn match_cost(logits: &Tensor, decoded: &Tensor, gt: &[GtBox], cfg: &LossConfig) -> Vec<f64> {
    let n = logits.shape()[0];
    let targets: Vec<_> = gt.iter().map(GtBox::encode).collect();
    let mut cost = Vec::with_capacity(n * gt.len());
    for i in 0..n {
        let (lrow, brow) = (logits.row(i), decoded.row(i));
        for (t, obj) in targets.iter().zip(gt) {
            let cls = focal_term(lrow[obj.class], true, cfg.focal_alpha, cfg.focal_gamma).0;
            let reg: f64 = (0..BOX_DIMS)
                .map(|d| cfg.box_weights[d] * (brow[d] - t[d]).abs())
                .sum::<f64>()
                / BOX_DIMS as f64;
            cost.push(cfg.cls_weight * cls + cfg.reg_weight * reg);
        }
    }
    cost
}

/// Unweighted per-layer components of a scene loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
}

impl LossBreakdown {
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        self.cls
            .iter()
            .zip(&self.reg)
            .map(|(c, r)| cfg.cls_weight * c + cfg.reg_weight * r)
            .sum()
    }

    /// Element-wise accumulation, for batch averages.
    pub fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        if self.cls.is_empty() {
            self.cls = vec![0.0; other.cls.len()];
            self.reg = vec![0.0; other.reg.len()];
        }
        for (a, b) in self.cls.iter_mut().zip(&other.cls) {
            *a += scale * b;
        }
        for (a, b) in self.reg.iter_mut().zip(&other.reg) {
            *a += scale * b;
        }
    }
}

/// Deep-supervised loss of one scene: per layer, Hungarian matching, focal
/// loss over all queries (unmatched ones as background) and weighted L1
/// over matched boxes, both normalized by `max(1, #GT)`; summed over layers.
pub fn scene_loss(
    g: &mut Graph<'_>,
    preds: &[Prediction],
    gt: &[GtBox],
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if gt.iter().any(|b| b.class >= num_classes) {
        return Err(Error::Contract("ground-truth class out of range".into()));
    }
    let norm = gt.len().max(1) as f64;
    let targets: Vec<_> = gt.iter().map(GtBox::encode).collect();
    let weights = g.constant(Tensor::new(vec![BOX_DIMS], cfg.box_weights.to_vec())?);
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    for p in preds {
        let n = g.tape.shape(p.logits)[0];
        let pairs = if gt.is_empty() {
            Vec::new()
        } else {
            let cost = match_cost(g.value(p.logits), g.value(p.decoded), gt, cfg);
            hungarian(&cost, n, gt.len())?
        };
        let mut labels = vec![false; n * num_classes];
        for &(i, j) in &pairs {
            labels[i * num_classes + gt[j].class] = true;
        }
        let focal = g.tape.focal_loss(p.logits, &labels, cfg.focal_alpha, cfg.focal_gamma)?;
        let cls = g.tape.scale(focal, 1.0 / norm);
        let reg = if pairs.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let rows: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
            let picked = g.tape.gather_rows(p.decoded, &rows)?;
            let mut t = Vec::with_capacity(pairs.len() * BOX_DIMS);
            for &(_, j) in &pairs {
                t.extend_from_slice(&targets[j]);
            }
            let t = g.constant(Tensor::new(vec![pairs.len(), BOX_DIMS], t)?);
            let diff = g.tape.sub(picked, t)?;
            let abs = g.tape.abs(diff);
            let weighted = g.tape.mul(abs, weights)?;
            let s = g.tape.sum(weighted);
            g.tape.scale(s, 1.0 / (BOX_DIMS as f64 * norm))
        };
        breakdown.cls.push(g.value(cls).item());
        breakdown.reg.push(g.value(reg).item());
        let c = g.tape.scale(cls, cfg.cls_weight);
        let r = g.tape.scale(reg, cfg.reg_weight);
        let layer = g.tape.add(c, r)?;
        total = Some(match total {
            Some(t) => g.tape.add(t, layer)?,
            None => layer,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("loss needs at least one layer".into()))?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_unit_box() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, -1.0]).unwrap();
        let boxes = Tensor::new(vec![1, 10], vec![1.0, 2.0, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 3.0, 0.0]).unwrap();
        let d = &decode(&logits, &boxes)[0];
        assert_eq!(d.size, [1.0; 3]);
        assert_eq!(d.yaw, 0.0);
        assert_eq!(d.class, 0);
        assert_eq!(d.score, 0.5);
        assert_eq!(d.center, [1.0, 2.0, 0.5]);
    }

    #[test]
    fn perfect_match_cost_is_small() {
        let gt = GtBox {
            center: [1.0, 2.0, 0.0],
            size: [2.0, 4.0, 1.5],
            yaw: 0.3,
            velocity: [1.0, 0.0],
            class: 1,
            track_id: 0,
        };
        let logits = Tensor::new(vec![1, 2], vec![-20.0, 20.0]).unwrap();
        let decoded = Tensor::new(vec![1, 10], gt.encode().to_vec()).unwrap();
        let cost = match_cost(&logits, &decoded, &[gt], &LossConfig::default());
        assert!(cost[0] < 1e-15, "{}", cost[0]);
    }
}
