//! Synthetic scenes: boxes with constant velocities, a noisy sparse radar,
//! and flat-shaded camera views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_extrinsics, world_to_frustum, CameraCalib, WorldRange};
use crate::head::GtBox;
use crate::radar::{RadarPoint, RadarPoints};
use crate::tensor::Tensor;

/// Per-class size and speed ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// `[w, l, h]` in meters.
    pub size: [f64; 3],
    /// Relative size jitter (uniform ±).
    pub size_jitter: f64,
    pub speed: [f64; 2],
    /// Flat RGB used when rasterizing.
    pub color: [f64; 3],
}

pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "car".into(),
            size: [1.9, 4.5, 1.6],
            size_jitter: 0.1,
            speed: [4.0, 10.0],
            color: [0.9, 0.15, 0.1],
        },
        ClassSpec {
            name: "pedestrian".into(),
            size: [0.7, 0.7, 1.8],
            size_jitter: 0.1,
            speed: [0.8, 2.0],
            color: [0.1, 0.85, 0.2],
        },
        ClassSpec {
            name: "barrier".into(),
            size: [0.5, 2.0, 1.0],
            size_jitter: 0.1,
            speed: [0.0, 0.0],
            color: [0.15, 0.3, 0.95],
        },
    ]
}

/// Radar measurement model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarNoiseModel {
    pub hit_probability: f64,
    /// Tangential (cross-range) noise, meters.
    pub azimuth_sigma: f64,
    /// Radial noise, meters.
    pub depth_sigma: f64,
    /// Returned height is drawn from `N(0, z_sigma)` regardless of the object.
    pub z_sigma: f64,
    pub clutter_points: usize,
    pub num_sweeps: usize,
    pub sweep_interval: f64,
    pub max_points: usize,
}

impl Default for RadarNoiseModel {
    fn default() -> Self {
        Self {
            hit_probability: 0.5,
            azimuth_sigma: 0.3,
            depth_sigma: 0.2,
            z_sigma: 0.5,
            clutter_points: 20,
            num_sweeps: 6,
            sweep_interval: 0.05,
            max_points: 2048,
        }
    }
}

impl RadarNoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.hit_probability)
            && [self.azimuth_sigma, self.depth_sigma, self.z_sigma, self.sweep_interval]
                .iter()
                .all(|s| s.is_finite() && *s >= 0.0)
            && self.num_sweeps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid radar noise model {self:?}")))
        }
    }

    /// Zero noise, every sweep hits, no clutter.
    pub fn noiseless(num_sweeps: usize) -> Self {
        Self {
            hit_probability: 1.0,
            azimuth_sigma: 0.0,
            depth_sigma: 0.0,
            z_sigma: 0.0,
            clutter_points: 0,
            num_sweeps,
            ..Self::default()
        }
    }
}

/// Camera rig and rendering settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    /// Heading of each camera, radians from world +x.
    pub yaws: Vec<f64>,
    pub position: [f64; 3],
    pub focal: f64,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub feature_stride: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            yaws: vec![0.55, -0.55],
            position: [1.5, 0.0, 1.6],
            focal: 120.0,
            image_size: [64, 176],
            feature_stride: 16,
        }
    }
}

impl CameraRig {
    pub fn calibrations(&self) -> Result<Vec<CameraCalib>> {
        let [h, w] = self.image_size;
        self.yaws
            .iter()
            .map(|&yaw| {
                CameraCalib::pinhole(
                    self.focal,
                    w as f64 / 2.0,
                    h as f64 / 2.0,
                    camera_extrinsics(self.position, yaw),
                    self.image_size,
                    self.feature_stride,
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub num_objects: usize,
    /// Objects are placed with `|x|, |y| ≤ spawn_extent`.
    pub spawn_extent: f64,
    /// Minimum center distance between objects at spawn.
    pub min_separation: f64,
    pub classes: Vec<ClassSpec>,
    pub radar: RadarNoiseModel,
    pub cameras: CameraRig,
    pub range: WorldRange,
    /// Seconds between sequence frames.
    pub frame_interval: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_objects: 10,
            spawn_extent: 40.0,
            min_separation: 4.0,
            classes: default_classes(),
            radar: RadarNoiseModel::default(),
            cameras: CameraRig::default(),
            range: WorldRange::default(),
            frame_interval: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        self.radar.validate()?;
        if self.classes.is_empty() {
            return Err(Error::Config("at least one object class is required".into()));
        }
        if [self.frame_interval, self.spawn_extent].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config("frame interval and spawn extent must be positive".into()));
        }
        if self.cameras.yaws.is_empty() {
            return Err(Error::Config("at least one camera is required".into()));
        }
        self.cameras.calibrations()?;
        Ok(())
    }
}

/// One frame of sensor data with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frame_index: usize,
    pub objects: Vec<GtBox>,
    pub calibrations: Vec<CameraCalib>,
    pub radar: RadarPoints,
    /// `[cameras × H × W × 3]`.
    pub images: Tensor,
}

impl Scene {
    pub fn input(&self) -> crate::model::SceneInput<'_> {
        crate::model::SceneInput {
            images: &self.images,
            calibs: &self.calibrations,
            radar: &self.radar,
        }
    }
}

/// Footprint corners of a box, counter-clockwise.
pub fn footprint(b: &GtBox) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.size[1] / 2.0, b.size[0] / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, bb)| {
        [b.center[0] + a * c - bb * s, b.center[1] + a * s + bb * c]
    })
}

/// Noise-free radar return on the box face most directly facing the
/// sensor at the origin, at parameter `u ∈ [0,1]` along the face.
pub fn surface_point(b: &GtBox, u: f64) -> [f64; 2] {
    let corners = footprint(b);
    let (cx, cy) = (b.center[0], b.center[1]);
    let mut best = (f64::INFINITY, 0);
    for i in 0..4 {
        let (p, q) = (corners[i], corners[(i + 1) % 4]);
        let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
        let normal = [mid[0] - cx, mid[1] - cy];
        // face whose outward normal points most toward the sensor
        let d = normal[0] * cx + normal[1] * cy;
        let n = (normal[0].powi(2) + normal[1].powi(2)).sqrt();
        let score = d / n.max(1e-12);
        if score < best.0 {
            best = (score, i);
        }
    }
    let (p, q) = (corners[best.1], corners[(best.1 + 1) % 4]);
    [p[0] + u * (q[0] - p[0]), p[1] + u * (q[1] - p[1])]
}

/// Adds radial and tangential noise (w.r.t. the sensor at the origin).
pub fn perturb(p: [f64; 2], noise: &RadarNoiseModel, rng: &mut impl Rng) -> [f64; 2] {
    let r = (p[0] * p[0] + p[1] * p[1]).sqrt().max(1e-9);
    let radial = [p[0] / r, p[1] / r];
    let tangent = [-radial[1], radial[0]];
    let dr = gaussian(rng, noise.depth_sigma);
    let dt = gaussian(rng, noise.azimuth_sigma);
    [
        p[0] + dr * radial[0] + dt * tangent[0],
        p[1] + dr * radial[1] + dt * tangent[1],
    ]
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    }
}

/// Radar returns of a frame: per object per sweep a Bernoulli hit on the
/// facing surface at the sweep's time, plus static clutter.
pub fn simulate_radar(objects: &[GtBox], cfg: &SimConfig, rng: &mut impl Rng) -> Result<RadarPoints> {
    let noise = &cfg.radar;
    let mut rows: Vec<RadarPoint> = Vec::new();
    for k in 0..noise.num_sweeps {
        let t = -(k as f64) * noise.sweep_interval;
        for b in objects {
            if !rng.random_bool(noise.hit_probability) {
                continue;
            }
            let mut past = b.clone();
            past.center[0] += b.velocity[0] * t;
            past.center[1] += b.velocity[1] * t;
            let u = rng.random_range(0.0..=1.0);
            let p = perturb(surface_point(&past, u), noise, rng);
            let z = gaussian(rng, noise.z_sigma);
            rows.push([p[0], p[1], z, b.velocity[0], b.velocity[1], t]);
        }
    }
    let r = &cfg.range;
    for _ in 0..noise.clutter_points {
        let x = rng.random_range(r.x_min..r.x_max);
        let y = rng.random_range(r.y_min..r.y_max);
        let z = gaussian(rng, noise.z_sigma);
        let k = rng.random_range(0..noise.num_sweeps);
        rows.push([x, y, z, 0.0, 0.0, -(k as f64) * noise.sweep_interval]);
    }
    rows.truncate(noise.max_points);
    RadarPoints::new(rows, noise.max_points)
}

/// Renders one camera: a textured ground/sky background with each visible
/// box drawn as the bounding rectangle of its projected corners, far to
/// near.
pub fn render(objects: &[GtBox], calib: &CameraCalib, classes: &[ClassSpec], texture_seed: u64) -> Tensor {
    let [h, w] = calib.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed);
    let horizon = h / 2;
    let mut img = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for _ in 0..w {
            let n: f64 = rng.random_range(-0.05..0.05);
            let px = if r < horizon {
                [0.55 + n, 0.65 + n, 0.8 + n]
            } else {
                [0.35 + n, 0.35 + n, 0.33 + n]
            };
            img.extend_from_slice(&px);
        }
    }
    let mut order: Vec<(f64, usize)> = Vec::new();
    let mut rects = Vec::new();
    for (i, b) in objects.iter().enumerate() {
        let mut corners = Vec::with_capacity(8);
        for c in footprint(b) {
            for dz in [-0.5, 0.5] {
                corners.push([c[0], c[1], b.center[2] + dz * b.size[2]]);
            }
        }
        let proj = world_to_frustum(calib, &corners);
        let front: Vec<_> = proj.iter().filter(|p| p.depth > 0.5).collect();
        if front.len() < proj.len() {
            continue;
        }
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &front {
            u0 = u0.min(p.pixel.0);
            u1 = u1.max(p.pixel.0);
            v0 = v0.min(p.pixel.1);
            v1 = v1.max(p.pixel.1);
        }
        let clip = |x: f64, hi: usize| x.round().clamp(0.0, hi as f64) as usize;
        let (c0, c1, r0, r1) = (clip(u0, w), clip(u1, w), clip(v0, h), clip(v1, h));
        if c1 <= c0 || r1 <= r0 {
            continue;
        }
        let depth = front.iter().map(|p| p.depth).fold(f64::MAX, f64::min);
        order.push((depth, i));
        rects.push((c0, c1, r0, r1));
    }
    let mut idx: Vec<usize> = (0..order.len()).collect();
    idx.sort_by(|&a, &b| order[b].0.total_cmp(&order[a].0).then(order[a].1.cmp(&order[b].1)));
    for k in idx {
        let (c0, c1, r0, r1) = rects[k];
        let color = classes[objects[order[k].1].class].color;
        for r in r0..r1 {
            for c in c0..c1 {
                let o = (r * w + c) * 3;
                img[o..o + 3].copy_from_slice(&color);
            }
        }
    }
    Tensor::new(vec![h, w, 3], img).expect("image shape")
}

fn spawn_objects(cfg: &SimConfig, rng: &mut impl Rng) -> Vec<GtBox> {
    let mut objects: Vec<GtBox> = Vec::with_capacity(cfg.num_objects);
    let e = cfg.spawn_extent;
    let mut attempts = 0;
    while objects.len() < cfg.num_objects && attempts < 1000 * cfg.num_objects.max(1) {
        attempts += 1;
        let x = rng.random_range(-e..e);
        let y = rng.random_range(-e..e);
        // keep clear of the ego vehicle
        if x.abs() < 3.0 && y.abs() < 3.0 {
            continue;
        }
        if objects
            .iter()
            .any(|o| (o.center[0] - x).hypot(o.center[1] - y) < cfg.min_separation)
        {
            continue;
        }
        let class = rng.random_range(0..cfg.classes.len());
        let spec = &cfg.classes[class];
        let j = spec.size_jitter;
        let size = spec.size.map(|s| s * (1.0 + rng.random_range(-j..=j)));
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = if spec.speed[1] > spec.speed[0] {
            rng.random_range(spec.speed[0]..spec.speed[1])
        } else {
            spec.speed[0]
        };
        objects.push(GtBox {
            center: [x, y, size[2] / 2.0],
            size,
            yaw,
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
            class,
            track_id: objects.len() as u64,
        });
    }
    objects
}

fn frame(objects: &[GtBox], frame_index: usize, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let calibrations = cfg.cameras.calibrations()?;
    let visible: Vec<GtBox> = objects
        .iter()
        .filter(|o| cfg.range.contains_xy(o.center[0], o.center[1]))
        .cloned()
        .collect();
    let radar = simulate_radar(&visible, cfg, rng)?;
    let texture_seed: u64 = rng.random();
    let [h, w] = cfg.cameras.image_size;
    let mut data = Vec::with_capacity(calibrations.len() * h * w * 3);
    for (i, c) in calibrations.iter().enumerate() {
        data.extend(render(&visible, c, &cfg.classes, texture_seed.wrapping_add(i as u64)).into_data());
    }
    let images = Tensor::new(vec![calibrations.len(), h, w, 3], data)?;
    Ok(Scene {
        frame_index,
        objects: visible,
        calibrations,
        radar,
        images,
    })
}

/// A single scene.
pub fn gen_scene(seed: u64, cfg: &SimConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = spawn_objects(cfg, &mut rng);
    frame(&objects, 0, cfg, &mut rng)
}

/// `frames` consecutive scenes; objects move at constant velocity and keep
/// their track ids. Objects outside the world range are not reported.
pub fn sequence(seed: u64, frames: usize, cfg: &SimConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = spawn_objects(cfg, &mut rng);
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            for o in &mut objects {
                o.center[0] += o.velocity[0] * cfg.frame_interval;
                o.center[1] += o.velocity[1] * cfg.frame_interval;
            }
        }
        out.push(frame(&objects, f, cfg, &mut rng)?);
    }
    Ok(out)
}

/// What to replace by zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drop {
    Cameras(Vec<usize>),
    Radar,
}

/// Copy of `scene` with the selected inputs replaced by zeros of the same
/// shape; calibrations and ground truth are untouched.
pub fn apply_drop(scene: &Scene, drop: &Drop) -> Result<Scene> {
    let mut out = scene.clone();
    match drop {
        Drop::Radar => out.radar = scene.radar.zeroed(),
        Drop::Cameras(ids) => {
            let n = scene.images.shape()[0];
            let per: usize = scene.images.shape()[1..].iter().product();
            for &i in ids {
                if i >= n {
                    return Err(Error::Contract(format!("no camera {i} in a {n}-camera scene")));
                }
                out.images.data_mut()[i * per..(i + 1) * per].fill(0.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn facing_surface_is_nearest_side() {
        let b = GtBox {
            center: [10.0, 0.0, 0.8],
            size: [2.0, 4.0, 1.6],
            yaw: 0.0,
            velocity: [0.0; 2],
            class: 0,
            track_id: 0,
        };
        for u in [0.0, 0.3, 1.0] {
            let p = surface_point(&b, u);
            assert!((p[0] - 8.0).abs() < 1e-12, "{p:?}");
            assert!(p[1].abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn empty_config_gives_empty_radar() {
        let cfg = SimConfig {
            num_objects: 0,
            radar: RadarNoiseModel {
                clutter_points: 0,
                ..RadarNoiseModel::default()
            },
            ..SimConfig::default()
        };
        let s = gen_scene(1, &cfg).unwrap();
        assert!(s.radar.is_empty());
        assert!(s.objects.is_empty());
        assert_eq!(s.images.shape(), &[2, 64, 176, 3]);
    }

    #[test]
    fn drop_preserves_shapes() {
        let s = gen_scene(2, &SimConfig::default()).unwrap();
        let d = apply_drop(&s, &Drop::Cameras(vec![0])).unwrap();
        assert_eq!(d.images.shape(), s.images.shape());
        let per = 64 * 176 * 3;
        assert!(d.images.data()[..per].iter().all(|&v| v == 0.0));
        assert_eq!(d.images.data()[per..], s.images.data()[per..]);
        assert!(apply_drop(&s, &Drop::Cameras(vec![2])).is_err());
        let r = apply_drop(&s, &Drop::Radar).unwrap();
        assert_eq!(r.radar.len(), s.radar.len());
    }
}
