//! Greedy center-distance tracking with constant-velocity prediction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Detection;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub match_radius: f64,
    /// Frames a track survives without an update.
    pub max_age: usize,
    pub min_score: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            match_radius: 2.0,
            max_age: 3,
            min_score: 0.3,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.match_radius > 0.0 && self.match_radius.is_finite() && (0.0..=1.0).contains(&self.min_score) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid tracker config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub class: usize,
    pub age_since_update: usize,
    pub score: f64,
}

/// Output row of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    pub id: u64,
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Tracker state across frames.
#[derive(Clone, Debug, Default)]
pub struct Tracker {
    pub config: TrackerConfig,
    pub tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            config,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    /// Advances by `dt` seconds and associates `dets`. Returns the id given
    /// to each detection that passed the score filter, in input order, as
    /// `(detection index, id)`.
    pub fn step(&mut self, dets: &[Detection], dt: f64) -> Result<Vec<(usize, u64)>> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::Contract(format!("tracking step dt must be > 0, got {dt}")));
        }
        for t in &mut self.tracks {
            t.center[0] += t.velocity[0] * dt;
            t.center[1] += t.velocity[1] * dt;
        }
        let kept: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].score >= self.config.min_score)
            .collect();
        let mut pairs: Vec<(f64, usize, u64, usize)> = Vec::new();
        for &i in &kept {
            let d = &dets[i];
            for (k, t) in self.tracks.iter().enumerate() {
                if t.class != d.class {
                    continue;
                }
                let dist = (d.center[0] - t.center[0]).hypot(d.center[1] - t.center[1]);
                if dist <= self.config.match_radius {
                    pairs.push((dist, i, t.id, k));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_done = vec![false; dets.len()];
        let mut track_done = vec![false; self.tracks.len()];
        let mut ids: Vec<(usize, u64)> = Vec::new();
        for (_, i, id, k) in pairs {
            if det_done[i] || track_done[k] {
                continue;
            }
            det_done[i] = true;
            track_done[k] = true;
            let d = &dets[i];
            let t = &mut self.tracks[k];
            t.center = [d.center[0], d.center[1]];
            t.velocity = d.velocity;
            t.score = d.score;
            t.age_since_update = 0;
            ids.push((i, id));
        }
        for (k, t) in self.tracks.iter_mut().enumerate() {
            if !track_done[k] {
                t.age_since_update += 1;
            }
        }
        let max_age = self.config.max_age;
        self.tracks.retain(|t| t.age_since_update <= max_age);
        for &i in &kept {
            if det_done[i] {
                continue;
            }
            let d = &dets[i];
            let id = self.next_id;
            self.next_id += 1;
            self.tracks.push(Track {
                id,
                center: [d.center[0], d.center[1]],
                velocity: d.velocity,
                class: d.class,
                age_since_update: 0,
                score: d.score,
            });
            ids.push((i, id));
        }
        ids.sort_unstable();
        Ok(ids)
    }
}

/// Runs the tracker over per-frame detections.
pub fn track_sequence(frames: &[Vec<Detection>], dt: f64, cfg: &TrackerConfig) -> Result<Vec<TrackRecord>> {
    cfg.validate()?;
    let mut tracker = Tracker::new(cfg.clone());
    let mut out = Vec::new();
    for (f, dets) in frames.iter().enumerate() {
        for (i, id) in tracker.step(dets, dt)? {
            let d = &dets[i];
            out.push(TrackRecord {
                frame: f,
                id,
                class: d.class,
                x: d.center[0],
                y: d.center[1],
                score: d.score,
            });
        }
    }
    Ok(out)
}

/// Labeled center for metric computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Labeled {
    pub id: u64,
    pub xy: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub num_gt: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    /// `1 − (FP + FN + IDS) / #GT`.
    pub accuracy: f64,
}

/// Per-frame greedy center matching within `threshold`; an identity switch
/// is counted whenever a ground-truth track is matched to a different
/// predicted id than at its previous match.
pub fn tracking_metrics(gt: &[Vec<Labeled>], pred: &[Vec<Labeled>], threshold: f64) -> Result<TrackingMetrics> {
    if gt.len() != pred.len() {
        return Err(Error::Evaluation(format!(
            "{} ground-truth frames vs {} predicted frames",
            gt.len(),
            pred.len()
        )));
    }
    let mut last: HashMap<u64, u64> = HashMap::new();
    let (mut num_gt, mut fp, mut fn_, mut ids) = (0, 0, 0, 0);
    for (g, p) in gt.iter().zip(pred) {
        num_gt += g.len();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, a) in g.iter().enumerate() {
            for (j, b) in p.iter().enumerate() {
                let d = (a.xy[0] - b.xy[0]).hypot(a.xy[1] - b.xy[1]);
                if d <= threshold {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut gdone = vec![false; g.len()];
        let mut pdone = vec![false; p.len()];
        let mut matched = 0;
        for (_, i, j) in pairs {
            if gdone[i] || pdone[j] {
                continue;
            }
            gdone[i] = true;
            pdone[j] = true;
            matched += 1;
            if let Some(prev) = last.insert(g[i].id, p[j].id) {
                if prev != p[j].id {
                    ids += 1;
                }
            }
        }
        fn_ += g.len() - matched;
        fp += p.len() - matched;
    }
    let accuracy = 1.0 - (fp + fn_ + ids) as f64 / num_gt.max(1) as f64;
    Ok(TrackingMetrics {
        num_gt,
        fp,
        fn_,
        ids,
        accuracy,
    })
}
