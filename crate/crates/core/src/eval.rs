//! Center-distance detection metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{Detection, GtBox};

/// BEV center-distance thresholds in meters.
pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which translation and velocity errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub num_gt: usize,
    /// AP per entry of [`THRESHOLDS`].
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub thresholds: Vec<f64>,
    /// Mean over classes with ground truth, per threshold.
    pub ap_by_threshold: Vec<f64>,
    pub map: f64,
    /// Mean center error of true positives at [`TP_THRESHOLD`]; `None` when
    /// there are none.
    pub mate: Option<f64>,
    /// Mean velocity error of the same true positives.
    pub mave: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

impl DetectionMetrics {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.ap_by_threshold[i])
    }
}

fn bev_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `(frame, detection, ground truth)` indices of a true positive.
type Match = (usize, usize, usize);

/// Greedy score-ordered matching of one class pooled over frames.
/// Returns per detection (in score order) the matched GT, if any.
fn greedy_match(
    frames: &[(Vec<Detection>, Vec<GtBox>)],
    class: usize,
    threshold: f64,
) -> Vec<(f64, Option<Match>)> {
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (f, (d, _)) in frames.iter().enumerate() {
        for (i, det) in d.iter().enumerate() {
            if det.class == class {
                dets.push((det.score, f, i));
            }
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|(_, g)| vec![false; g.len()]).collect();
    dets.into_iter()
        .map(|(score, f, i)| {
            let det = &frames[f].0[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, gt) in frames[f].1.iter().enumerate() {
                if gt.class != class || taken[f][j] {
                    continue;
                }
                let d = bev_dist(&det.center, &gt.center);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            match best {
                Some((d, j)) if d <= threshold => {
                    taken[f][j] = true;
                    (score, Some((f, i, j)))
                }
                _ => (score, None),
            }
        })
        .collect()
}

/// Area under the precision-recall curve with precision replaced by its
/// running maximum from the right.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Metrics over aligned `(detections, ground truth)` frames.
pub fn evaluate(frames: &[(Vec<Detection>, Vec<GtBox>)], num_classes: usize) -> Result<DetectionMetrics> {
    for (d, g) in frames {
        if let Some(bad) = d.iter().find(|d| !d.score.is_finite() || d.class >= num_classes) {
            return Err(Error::Evaluation(format!("invalid detection {bad:?}")));
        }
        if g.iter().any(|g| g.class >= num_classes) {
            return Err(Error::Evaluation("ground-truth class out of range".into()));
        }
    }
    let mut num_gt = vec![0usize; num_classes];
    for (_, g) in frames {
        for b in g {
            num_gt[b.class] += 1;
        }
    }
    let mut per_class = Vec::new();
    let mut trans = Vec::new();
    let mut vel = Vec::new();
    for (class, &n_gt) in num_gt.iter().enumerate() {
        if n_gt == 0 {
            continue;
        }
        let mut ap = Vec::with_capacity(THRESHOLDS.len());
        for &t in &THRESHOLDS {
            let matches = greedy_match(frames, class, t);
            let tp: Vec<bool> = matches.iter().map(|m| m.1.is_some()).collect();
            ap.push(average_precision(&tp, n_gt));
            if t == TP_THRESHOLD {
                for (_, m) in &matches {
                    if let Some((f, i, j)) = *m {
                        let (d, g) = (&frames[f].0[i], &frames[f].1[j]);
                        trans.push(bev_dist(&d.center, &g.center));
                        vel.push((d.velocity[0] - g.velocity[0]).hypot(d.velocity[1] - g.velocity[1]));
                    }
                }
            }
        }
        per_class.push(ClassMetrics {
            class,
            num_gt: n_gt,
            ap,
        });
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let ap_by_threshold: Vec<f64> = (0..THRESHOLDS.len())
        .map(|k| {
            let v: Vec<f64> = per_class.iter().map(|c| c.ap[k]).collect();
            mean(&v).unwrap_or(0.0)
        })
        .collect();
    let map = mean(&ap_by_threshold).unwrap_or(0.0);
    Ok(DetectionMetrics {
        thresholds: THRESHOLDS.to_vec(),
        ap_by_threshold,
        map,
        mate: mean(&trans),
        mave: mean(&vel),
        per_class,
    })
}

/// Per-class AP keyed by class index, for reporting.
pub fn ap_table(m: &DetectionMetrics) -> BTreeMap<usize, Vec<f64>> {
    m.per_class.iter().map(|c| (c.class, c.ap.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x: f64, class: usize) -> GtBox {
        GtBox {
            center: [x, 0.0, 0.5],
            size: [1.0; 3],
            yaw: 0.0,
            velocity: [1.0, 0.0],
            class,
            track_id: 0,
        }
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![gt(0.0, 0), gt(10.0, 1)];
        let d = g.iter().map(|b| Detection::from_gt(b, 1.0)).collect();
        let m = evaluate(&[(d, g)], 2).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.mate, Some(0.0));
        assert_eq!(m.mave, Some(0.0));
    }

    #[test]
    fn no_predictions() {
        let m = evaluate(&[(vec![], vec![gt(0.0, 0)])], 1).unwrap();
        assert_eq!(m.map, 0.0);
        assert_eq!(m.mate, None);
    }

    #[test]
    fn half_recall_gives_half_ap() {
        let g = vec![gt(0.0, 0), gt(10.0, 0)];
        let d = vec![Detection::from_gt(&g[0], 0.9)];
        let m = evaluate(&[(d, g)], 1).unwrap();
        assert!(m.ap_by_threshold.iter().all(|&a| a == 0.5));
    }
}
