//! Position embeddings for image tokens, radar tokens, and object queries.
//!
//! Token and query embeddings go through the same two encoders: `phi_im`
//! consumes normalized world points sampled along a ray (or a query point
//! tiled to the same width), `phi_ra` consumes a sine-cosine code of a
//! normalized BEV location.

use rand::Rng;

use crate::error::Result;
use crate::geometry::{frustum_points, frustum_to_world, CameraCalib, DepthBins, WorldRange};
use crate::nn::{Graph, Mlp, ParamStore};
use crate::tensor::{Tensor, Var};

/// Sine-cosine code of normalized coordinates.
///
/// For each axis value `x` and frequency `k < num_freqs` the angle is
/// `2π · x · base^(−k / num_freqs)`. Per axis the output holds all sines
/// followed by all cosines; axes are concatenated in order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinCos {
    pub num_freqs: usize,
    pub base: f64,
}

impl SinCos {
    pub fn new(num_freqs: usize) -> Self {
        Self {
            num_freqs,
            base: 10_000.0,
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let f = self.num_freqs as f64;
        (0..self.num_freqs)
            .map(|k| std::f64::consts::TAU * self.base.powf(-(k as f64) / f))
            .collect()
    }

    /// Output width for `axes` input coordinates.
    pub fn dim(&self, axes: usize) -> usize {
        2 * self.num_freqs * axes
    }

    /// Plain evaluation of one point.
    pub fn encode(&self, coords: &[f64]) -> Vec<f64> {
        let freqs = self.frequencies();
        let mut out = Vec::with_capacity(self.dim(coords.len()));
        for &x in coords {
            out.extend(freqs.iter().map(|w| (x * w).sin()));
            out.extend(freqs.iter().map(|w| (x * w).cos()));
        }
        out
    }

    /// Differentiable evaluation of `xy: [n×2]` → `[n × 4F]`.
    pub fn forward(&self, g: &mut Graph<'_>, xy: Var) -> Result<Var> {
        let f = self.num_freqs;
        let freqs = self.frequencies();
        // block-diagonal frequency matrix: [2 × 2F]
        let mut m = vec![0.0; 2 * 2 * f];
        for (k, w) in freqs.iter().enumerate() {
            m[k] = *w;
            m[2 * f + f + k] = *w;
        }
        let m = g.constant(Tensor::new(vec![2, 2 * f], m)?);
        let angles = g.tape.matmul(xy, m)?;
        let s = g.tape.sin(angles);
        let c = g.tape.cos(angles);
        let parts = [
            g.tape.slice(s, 1, 0, f)?,
            g.tape.slice(c, 1, 0, f)?,
            g.tape.slice(s, 1, f, f)?,
            g.tape.slice(c, 1, f, f)?,
        ];
        g.tape.concat(&parts, 1)
    }
}

/// The two encoders shared between token and query embeddings.
#[derive(Clone, Debug)]
pub struct PeEncoders {
    pub phi_im: Mlp,
    pub phi_ra: Mlp,
    pub sincos: SinCos,
    pub depth_bins: DepthBins,
    pub range: WorldRange,
}

impl PeEncoders {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        dim: usize,
        num_freqs: usize,
        depth_bins: DepthBins,
        range: WorldRange,
    ) -> Self {
        let sincos = SinCos::new(num_freqs);
        let hidden = 4 * dim;
        Self {
            phi_im: Mlp::new(store, rng, "pe.phi_im", 3 * depth_bins.len(), hidden, dim),
            phi_ra: Mlp::new(store, rng, "pe.phi_ra", sincos.dim(2), hidden, dim),
            sincos,
            depth_bins,
            range,
        }
    }

    /// Input width of `phi_im`.
    pub fn image_input_dim(&self) -> usize {
        3 * self.depth_bins.len()
    }

    /// Zeroes both encoders' output layers.
    pub fn zero_heads(&self, store: &mut ParamStore) {
        self.phi_im.fc2.zero(store);
        self.phi_ra.fc2.zero(store);
    }

    /// `phi_im` inputs for every feature cell of one camera, row-major over
    /// the feature grid: `[tokens × 3d]`.
    pub fn image_pe_inputs(&self, calib: &CameraCalib) -> Result<Tensor> {
        let (rows, cols) = calib.feature_size();
        let width = self.image_input_dim();
        let mut data = Vec::with_capacity(rows * cols * width);
        for r in 0..rows {
            for c in 0..cols {
                let (u, v) = calib.token_pixel(r, c);
                let world = frustum_to_world(calib, &frustum_points(u, v, &self.depth_bins))?;
                for p in world {
                    data.extend_from_slice(&self.range.normalize(p));
                }
            }
        }
        Tensor::new(vec![rows * cols, width], data)
    }

    /// Image token embeddings for one camera: `[tokens × D]`.
    pub fn image_token_pe(&self, g: &mut Graph<'_>, calib: &CameraCalib) -> Result<Var> {
        let x = g.constant(self.image_pe_inputs(calib)?);
        self.phi_im.forward(g, x)
    }

    /// Radar token embeddings from normalized cell centers `[cells × 2]`.
    pub fn radar_token_pe(&self, g: &mut Graph<'_>, centers: &Tensor) -> Result<Var> {
        let xy = g.constant(centers.clone());
        let code = self.sincos.forward(g, xy)?;
        self.phi_ra.forward(g, code)
    }

    /// Query embeddings `(PE_2d, PE_3d)` from normalized refs `[n×3]`.
    ///
    /// `PE_2d` sees only the ground-plane components; `PE_3d` feeds the
    /// query point tiled once per depth bin, matching the ray layout of the
    /// image token inputs.
    pub fn query_pe(&self, g: &mut Graph<'_>, refs: Var) -> Result<(Var, Var)> {
        let xy = g.tape.slice(refs, 1, 0, 2)?;
        let code = self.sincos.forward(g, xy)?;
        let pe_2d = self.phi_ra.forward(g, code)?;
        let tiled = vec![refs; self.depth_bins.len()];
        let tiled = if tiled.len() == 1 {
            refs
        } else {
            g.tape.concat(&tiled, 1)?
        };
        let pe_3d = self.phi_im.forward(g, tiled)?;
        Ok((pe_2d, pe_3d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_unit_cosines() {
        let e = SinCos::new(4);
        let v = e.encode(&[0.0, 0.0]);
        for axis in 0..2 {
            let base = axis * 8;
            assert!(v[base..base + 4].iter().all(|&s| s == 0.0));
            assert!(v[base + 4..base + 8].iter().all(|&c| c == 1.0));
        }
    }

    #[test]
    fn tape_and_plain_codes_agree() {
        let e = SinCos::new(5);
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        let pts = [[0.1, 0.7], [0.5, 0.5], [0.93, 0.02]];
        let xy = g.constant(Tensor::from_rows(&pts.map(|p| p.to_vec())));
        let out = e.forward(&mut g, xy).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(g.value(out).row(i), e.encode(p).as_slice());
        }
    }

    #[test]
    fn axis_halves_swap_under_transpose() {
        let e = SinCos::new(6);
        let a = e.encode(&[0.3, 0.8]);
        let b = e.encode(&[0.8, 0.3]);
        let half = e.dim(1);
        assert_eq!(a[..half], b[half..]);
        assert_eq!(a[half..], b[..half]);
    }

    #[test]
    fn zero_heads_zero_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bins = DepthBins::linear(4, 1.0, 20.0).unwrap();
        let enc = PeEncoders::new(&mut store, &mut rng, 8, 2, bins, WorldRange::default());
        enc.zero_heads(&mut store);
        let mut g = Graph::new(&store, false);
        let refs = g.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.9, 0.5, 0.4]).unwrap());
        let (a, b) = enc.query_pe(&mut g, refs).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.0));
        assert!(g.value(b).data().iter().all(|&v| v == 0.0));
        assert_eq!(enc.image_input_dim(), 12);
    }
}
