//! Pinhole cameras, frustum lifting, and the normalized reference-point
//! convention shared by the decoder and the position embeddings.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frustum-space point `(u·d, v·d, d, 1)`.
pub type FrustumPoint = [f64; 4];

/// Pinhole intrinsics plus a rigid camera-to-world transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    /// 3×3 pinhole matrix in pixels, row-major.
    pub intrinsics: [[f64; 3]; 3],
    /// 4×4 camera-to-world rigid transform in meters, row-major.
    pub extrinsics: [[f64; 4]; 4],
    /// `[H, W]` in pixels.
    pub image_size: [usize; 2],
    pub feature_stride: usize,
}

impl CameraCalib {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
        image_size: [usize; 2],
        feature_stride: usize,
    ) -> Result<Self> {
        let calib = Self {
            intrinsics,
            extrinsics,
            image_size,
            feature_stride,
        };
        calib.validate()?;
        Ok(calib)
    }

    /// Pinhole camera with focal `f`, principal point `(cx, cy)`.
    pub fn pinhole(
        f: f64,
        cx: f64,
        cy: f64,
        extrinsics: [[f64; 4]; 4],
        image_size: [usize; 2],
        feature_stride: usize,
    ) -> Result<Self> {
        Self::new(
            [[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]],
            extrinsics,
            image_size,
            feature_stride,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if !k.iter().all(|v| v.is_finite()) || k.determinant().abs() < 1e-12 {
            return Err(Error::Calibration("intrinsics are singular".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err.is_nan() || err > 1e-9 || r.determinant() < 0.0 {
            return Err(Error::Calibration(format!(
                "extrinsic rotation is not orthonormal (error {err:e})"
            )));
        }
        let last = self.extrinsics[3];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Calibration(format!(
                "extrinsics bottom row must be [0, 0, 0, 1], got {last:?}"
            )));
        }
        let [h, w] = self.image_size;
        let s = self.feature_stride;
        if s == 0 || h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Calibration(format!(
                "image {h}x{w} not divisible by feature stride {s}"
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.intrinsics[r][c])
    }

    pub fn k_inv(&self) -> Result<Matrix3<f64>> {
        self.k()
            .try_inverse()
            .ok_or_else(|| Error::Calibration("intrinsics are singular".into()))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.extrinsics[r][c])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(
            self.extrinsics[0][3],
            self.extrinsics[1][3],
            self.extrinsics[2][3],
        )
    }

    /// Feature grid `(rows, cols)`.
    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.image_size[0] / self.feature_stride,
            self.image_size[1] / self.feature_stride,
        )
    }

    /// Pixel coordinates `(u, v)` of the center of feature cell `(row, col)`.
    pub fn token_pixel(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.feature_stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}

/// Depth samples along each camera ray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DepthBins(Vec<f64>);

impl DepthBins {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("depth bins must be non-empty".into()));
        }
        if values.iter().any(|&d| d <= 0.0 || !d.is_finite()) {
            return Err(Error::Config("depth bins must be positive".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("depth bins must be strictly increasing".into()));
        }
        Ok(Self(values))
    }

    /// `count` evenly spaced depths from `near` to `far` inclusive.
    pub fn linear(count: usize, near: f64, far: f64) -> Result<Self> {
        let values = match count {
            0 => vec![],
            1 => vec![near],
            _ => (0..count)
                .map(|i| near + (far - near) * i as f64 / (count - 1) as f64)
                .collect(),
        };
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for DepthBins {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DepthBins> for Vec<f64> {
    fn from(b: DepthBins) -> Self {
        b.0
    }
}

/// Axis-aligned box of valid world space in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for WorldRange {
    fn default() -> Self {
        Self {
            x_min: -51.2,
            x_max: 51.2,
            y_min: -51.2,
            y_max: 51.2,
            z_min: -5.0,
            z_max: 3.0,
        }
    }
}

impl WorldRange {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            (self.x_min, self.x_max),
            (self.y_min, self.y_max),
            (self.z_min, self.z_max),
        ]
        .iter()
        .all(|&(lo, hi)| lo.is_finite() && hi.is_finite() && hi > lo);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate world range {self:?}")))
        }
    }

    pub fn min(&self) -> [f64; 3] {
        [self.x_min, self.y_min, self.z_min]
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.x_max - self.x_min,
            self.y_max - self.y_min,
            self.z_max - self.z_min,
        ]
    }

    /// Normalized `[0,1]³` reference to world meters: `r·(max − min) + min`.
    pub fn denormalize(&self, r: [f64; 3]) -> [f64; 3] {
        let (lo, ext) = (self.min(), self.extent());
        [
            r[0] * ext[0] + lo[0],
            r[1] * ext[1] + lo[1],
            r[2] * ext[2] + lo[2],
        ]
    }

    /// Inverse of [`denormalize`](Self::denormalize); out-of-range points
    /// map outside `[0,1]`.
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let (lo, ext) = (self.min(), self.extent());
        [
            (p[0] - lo[0]) / ext[0],
            (p[1] - lo[1]) / ext[1],
            (p[2] - lo[2]) / ext[2],
        ]
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// Points `(u·dᵢ, v·dᵢ, dᵢ, 1)` along the ray through pixel `(u, v)`.
pub fn frustum_points(u: f64, v: f64, bins: &DepthBins) -> Vec<FrustumPoint> {
    bins.values()
        .iter()
        .map(|&d| [u * d, v * d, d, 1.0])
        .collect()
}

/// Lifts frustum points to world coordinates: `E · K⁻¹ · (u·d, v·d, d)`.
pub fn frustum_to_world(calib: &CameraCalib, pts: &[FrustumPoint]) -> Result<Vec<[f64; 3]>> {
    let k_inv = calib.k_inv()?;
    let (r, t) = (calib.rotation(), calib.translation());
    Ok(pts
        .iter()
        .map(|p| {
            let cam = k_inv * Vector3::new(p[0], p[1], p[2]);
            let w = r * cam + t;
            [w.x, w.y, w.z]
        })
        .collect())
}

/// Projection of a world point into a camera's frustum space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub point: FrustumPoint,
    /// Pixel coordinates `(u, v)`; meaningless when `depth <= 0`.
    pub pixel: (f64, f64),
    pub depth: f64,
    /// In front of the camera and inside the image bounds.
    pub visible: bool,
}

/// Inverse of [`frustum_to_world`], with a visibility flag.
pub fn world_to_frustum(calib: &CameraCalib, pts: &[[f64; 3]]) -> Vec<Projection> {
    let k = calib.k();
    let (r, t) = (calib.rotation(), calib.translation());
    let [h, w] = calib.image_size;
    pts.iter()
        .map(|p| {
            let cam = r.transpose() * (Vector3::new(p[0], p[1], p[2]) - t);
            let f = k * cam;
            let depth = f.z;
            let pixel = (f.x / depth, f.y / depth);
            let visible = depth > 0.0
                && pixel.0 >= 0.0
                && pixel.0 < w as f64
                && pixel.1 >= 0.0
                && pixel.1 < h as f64;
            Projection {
                point: [f.x, f.y, depth, 1.0],
                pixel,
                depth,
                visible,
            }
        })
        .collect()
}

/// Rigid camera-to-world transform for a camera at `position` looking along
/// world heading `yaw` (radians, counter-clockwise from +x), level with the
/// ground. World frame: x forward, y left, z up. Camera frame: x right,
/// y down, z forward.
pub fn camera_extrinsics(position: [f64; 3], yaw: f64) -> [[f64; 4]; 4] {
    let (s, c) = yaw.sin_cos();
    let forward = [c, s, 0.0];
    let right = [s, -c, 0.0];
    let down = [0.0, 0.0, -1.0];
    let mut e = [[0.0; 4]; 4];
    for i in 0..3 {
        e[i][0] = right[i];
        e[i][1] = down[i];
        e[i][2] = forward[i];
        e[i][3] = position[i];
    }
    e[3][3] = 1.0;
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_ext() -> [[f64; 4]; 4] {
        let mut e = [[0.0; 4]; 4];
        for (i, row) in e.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        e
    }

    fn identity_calib() -> CameraCalib {
        CameraCalib::pinhole(1.0, 0.0, 0.0, identity_ext(), [16, 16], 16).unwrap()
    }

    #[test]
    fn unit_depth_frustum_point() {
        let bins = DepthBins::new(vec![1.0]).unwrap();
        assert_eq!(frustum_points(2.0, 3.0, &bins), vec![[2.0, 3.0, 1.0, 1.0]]);
    }

    #[test]
    fn linear_bins_follow_arithmetic_progression() {
        let bins = DepthBins::linear(4, 1.0, 20.0).unwrap();
        let expected = [1.0, 1.0 + 19.0 / 3.0, 1.0 + 38.0 / 3.0, 20.0];
        for (a, b) in bins.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((bins.values()[1] - 7.333_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn depth_bins_reject_bad_values() {
        assert!(DepthBins::new(vec![0.0, 1.0]).is_err());
        assert!(DepthBins::new(vec![2.0, 1.0]).is_err());
        assert!(DepthBins::new(vec![]).is_err());
    }

    #[test]
    fn identity_lifting() {
        let w = frustum_to_world(&identity_calib(), &[[2.0, 3.0, 1.0, 1.0]]).unwrap();
        assert_eq!(w, vec![[2.0, 3.0, 1.0]]);
    }

    #[test]
    fn translation_shifts_world_points() {
        let mut e = identity_ext();
        e[0][3] = 10.0;
        let calib = CameraCalib::pinhole(1.0, 0.0, 0.0, e, [16, 16], 16).unwrap();
        let w = frustum_to_world(&calib, &[[0.0, 0.0, 1.0, 1.0]]).unwrap();
        assert_eq!(w, vec![[10.0, 0.0, 1.0]]);
    }

    #[test]
    fn principal_point_back_projects_onto_axis() {
        let calib = CameraCalib::pinhole(100.0, 50.0, 50.0, identity_ext(), [112, 112], 16).unwrap();
        let pts = frustum_points(50.0, 50.0, &DepthBins::new(vec![5.0]).unwrap());
        let w = frustum_to_world(&calib, &pts).unwrap()[0];
        assert!(w[0].abs() < 1e-12 && w[1].abs() < 1e-12 && (w[2] - 5.0).abs() < 1e-12);

        let p = world_to_frustum(&calib, &[[0.0, 0.0, 5.0]])[0];
        assert!((p.pixel.0 - 50.0).abs() < 1e-12 && (p.pixel.1 - 50.0).abs() < 1e-12);
        assert!((p.depth - 5.0).abs() < 1e-12);
        assert!(p.visible);
    }

    #[test]
    fn behind_camera_is_invisible() {
        let p = world_to_frustum(&identity_calib(), &[[0.0, 0.0, -1.0]])[0];
        assert!(!p.visible);
    }

    #[test]
    fn outside_image_is_invisible() {
        let calib = CameraCalib::pinhole(100.0, 50.0, 50.0, identity_ext(), [112, 112], 16).unwrap();
        let p = world_to_frustum(&calib, &[[10.0, 0.0, 5.0]])[0];
        assert!(p.depth > 0.0 && !p.visible);
    }

    #[test]
    fn calibration_validation() {
        let mut e = identity_ext();
        e[0][0] = 2.0;
        assert!(CameraCalib::pinhole(1.0, 0.0, 0.0, e, [16, 16], 16).is_err());
        assert!(CameraCalib::pinhole(0.0, 0.0, 0.0, identity_ext(), [16, 16], 16).is_err());
        assert!(CameraCalib::pinhole(1.0, 0.0, 0.0, identity_ext(), [20, 16], 16).is_err());
        let yawed = camera_extrinsics([1.0, 2.0, 1.5], 0.7);
        assert!(CameraCalib::pinhole(100.0, 8.0, 8.0, yawed, [16, 16], 16).is_ok());
    }

    #[test]
    fn camera_looks_along_yaw() {
        let calib =
            CameraCalib::pinhole(100.0, 50.0, 50.0, camera_extrinsics([0.0; 3], 0.0), [112, 112], 16)
                .unwrap();
        let p = world_to_frustum(&calib, &[[10.0, 0.0, 0.0]])[0];
        assert!((p.depth - 10.0).abs() < 1e-12 && p.visible);
        // a point to the left lands left of the principal point
        let q = world_to_frustum(&calib, &[[10.0, 1.0, 0.0]])[0];
        assert!(q.pixel.0 < 50.0);
        // a point above lands above the principal point
        let q = world_to_frustum(&calib, &[[10.0, 0.0, 1.0]])[0];
        assert!(q.pixel.1 < 50.0);
    }

    #[test]
    fn reference_normalization() {
        let range = WorldRange::default();
        let c = range.denormalize([0.5, 0.5, 0.5]);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[1], 0.0);
        assert_eq!(c[2], -1.0);
        assert_eq!(range.denormalize([0.0; 3]), range.min());
        assert_eq!(range.denormalize([1.0; 3]), [51.2, 51.2, 3.0]);
        let p = range.denormalize([0.25, 0.75, 0.5]);
        assert!((p[0] + 25.6).abs() < 1e-12);
        assert!((p[1] - 25.6).abs() < 1e-12);
        assert_eq!(range.normalize([-51.2, 0.0, -5.0])[0], 0.0);
        assert_eq!(range.normalize([0.0, 0.0, 0.0])[0], 0.5);
    }

    #[test]
    fn degenerate_range_rejected() {
        let r = WorldRange {
            x_max: -51.2,
            ..WorldRange::default()
        };
        assert!(r.validate().is_err());
    }
}
