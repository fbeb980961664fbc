//! Radar point sets, pillar scattering onto a BEV grid, and the dense
//! encoder that spreads sparse pillar features over the whole grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::WorldRange;
use crate::nn::{Conv2d, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Channels stored per radar return.
pub const RADAR_CHANNELS: usize = 6;

/// One radar return: `[x, y, z, vx, vy, t_offset]` in world meters, m/s and
/// seconds relative to the current frame.
pub type RadarPoint = [f64; RADAR_CHANNELS];

/// Accumulated radar returns for one frame.
///
/// Rows whose channels are all exactly zero are padding and never reach the
/// grid; a zeroed point tensor therefore behaves as an absent sensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RadarPoints {
    pub rows: Vec<RadarPoint>,
}

impl RadarPoints {
    pub fn new(rows: Vec<RadarPoint>, max_points: usize) -> Result<Self> {
        if rows.len() > max_points {
            return Err(Error::Contract(format!(
                "{} radar points exceed the maximum of {max_points}",
                rows.len()
            )));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite radar channel".into()));
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Same shape, every channel zero.
    pub fn zeroed(&self) -> Self {
        Self {
            rows: vec![[0.0; RADAR_CHANNELS]; self.rows.len()],
        }
    }
}

/// Which per-point channels feed the pillar network.
///
/// Ground-plane position always enters as the offset from the cell center,
/// so the grid is translation-equivariant in whole cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PillarChannels {
    /// Offsets, z, vx, vy, time offset.
    #[default]
    Six,
    /// As `Six` without the time offset.
    Five,
}

impl PillarChannels {
    pub fn width(self) -> usize {
        match self {
            Self::Six => 6,
            Self::Five => 5,
        }
    }
}

/// Cell layout of the BEV grid: rows along world y, columns along world x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGeometry {
    pub rows: usize,
    pub cols: usize,
    /// World `(x, y)` of the corner of cell (0, 0).
    pub origin: [f64; 2],
    /// Cell extent `(x, y)` in meters.
    pub cell: [f64; 2],
}

impl BevGeometry {
    pub fn new(range: &WorldRange, rows: usize, cols: usize) -> Result<Self> {
        range.validate()?;
        if rows == 0 || cols == 0 || !rows.is_multiple_of(8) || !cols.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "BEV grid {rows}×{cols} must be non-empty and divisible by 8"
            )));
        }
        Ok(Self {
            rows,
            cols,
            origin: [range.x_min, range.y_min],
            cell: [
                (range.x_max - range.x_min) / cols as f64,
                (range.y_max - range.y_min) / rows as f64,
            ],
        })
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// `(row, col)` of the cell holding world `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin[0]) / self.cell[0]).floor();
        let r = ((y - self.origin[1]) / self.cell[1]).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell[0],
            self.origin[1] + (row as f64 + 0.5) * self.cell[1],
        ]
    }

    /// Normalized `(x, y)` cell centers in token order: `[cells × 2]`.
    pub fn normalized_centers(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.num_cells());
        for r in 0..self.rows {
            for c in 0..self.cols {
                data.push((c as f64 + 0.5) / self.cols as f64);
                data.push((r as f64 + 0.5) / self.rows as f64);
            }
        }
        Tensor::new(vec![self.num_cells(), 2], data).expect("center shape")
    }
}

/// Per-point pillar network inputs and their target cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarInputs {
    /// `[kept points × width]`.
    pub features: Tensor,
    /// Flat cell index `row · cols + col` per kept point.
    pub cells: Vec<usize>,
}

impl PillarInputs {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

// fixed channel scales keep inputs O(1)
const Z_SCALE: f64 = 2.0;
const V_SCALE: f64 = 5.0;
const T_SCALE: f64 = 0.25;

/// Assigns points to cells and builds pillar network inputs. Points
/// outside the grid and all-zero padding rows are dropped.
pub fn pillar_inputs(points: &RadarPoints, geom: &BevGeometry, channels: PillarChannels) -> PillarInputs {
    let width = channels.width();
    let mut data = Vec::new();
    let mut cells = Vec::new();
    for p in &points.rows {
        if p.iter().all(|&v| v == 0.0) {
            continue;
        }
        let Some((r, c)) = geom.cell_of(p[0], p[1]) else {
            continue;
        };
        let center = geom.cell_center(r, c);
        data.push((p[0] - center[0]) / geom.cell[0]);
        data.push((p[1] - center[1]) / geom.cell[1]);
        data.push(p[2] / Z_SCALE);
        data.push(p[3] / V_SCALE);
        data.push(p[4] / V_SCALE);
        if channels == PillarChannels::Six {
            data.push(p[5] / T_SCALE);
        }
        cells.push(r * geom.cols + c);
    }
    let n = cells.len();
    PillarInputs {
        features: Tensor::new(vec![n, width], data).expect("pillar shape"),
        cells,
    }
}

/// Per-point linear + ReLU, max-pooled per cell.
#[derive(Clone, Debug)]
pub struct PillarNet {
    pub fc: Linear,
    pub channels: PillarChannels,
}

impl PillarNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        channels: PillarChannels,
        out_dim: usize,
    ) -> Self {
        Self {
            fc: Linear::new(store, rng, "pillar.fc", channels.width(), out_dim),
            channels,
        }
    }

    /// Dense BEV map `[rows × cols × C]`; empty cells are zero.
    pub fn forward(&self, g: &mut Graph<'_>, points: &RadarPoints, geom: &BevGeometry) -> Result<Var> {
        let inputs = pillar_inputs(points, geom, self.channels);
        self.scatter(g, &inputs, geom)
    }

    pub fn scatter(&self, g: &mut Graph<'_>, inputs: &PillarInputs, geom: &BevGeometry) -> Result<Var> {
        let c = self.fc.out_dim;
        let grid = if inputs.is_empty() {
            g.constant(Tensor::zeros(&[geom.num_cells(), c]))
        } else {
            let x = g.constant(inputs.features.clone());
            let h = self.fc.forward(g, x)?;
            let h = g.tape.relu(h);
            g.tape.scatter_max(h, &inputs.cells, geom.num_cells())?
        };
        g.tape.reshape(grid, &[geom.rows, geom.cols, c])
    }
}

/// Fraction of grid cells that receive no radar return.
pub fn empty_cell_fraction(points: &RadarPoints, geom: &BevGeometry) -> f64 {
    let inputs = pillar_inputs(points, geom, PillarChannels::Six);
    let mut hit = vec![false; geom.num_cells()];
    for &c in &inputs.cells {
        hit[c] = true;
    }
    hit.iter().filter(|&&h| !h).count() as f64 / geom.num_cells() as f64
}

#[derive(Clone, Debug)]
struct DownBlock {
    conv: Conv2d,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

/// Downsample-then-upsample encoder with global self-attention at the
/// coarsest scale and concatenating skip connections.
#[derive(Clone, Debug)]
pub struct DenseEncoder {
    down: Vec<DownBlock>,
    grid_pe: ParamId,
    attn: Vec<AttnBlock>,
    /// 1×1 fusion convs, coarsest first.
    up: Vec<Conv2d>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl DenseEncoder {
    /// Encoder for a `rows × cols × c` grid, widths `2c, 4c, 4c` on the way
    /// down, producing `out` channels at full resolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        rows: usize,
        cols: usize,
        c: usize,
        out: usize,
        attn_layers: usize,
        heads: usize,
    ) -> Result<Self> {
        if !rows.is_multiple_of(8) || !cols.is_multiple_of(8) || rows == 0 || cols == 0 {
            return Err(Error::Config(format!(
                "dense encoder grid {rows}×{cols} must be divisible by 8"
            )));
        }
        let widths = [c, 2 * c, 4 * c, 4 * c];
        let down = (0..3)
            .map(|i| {
                let conv = Conv2d::new(store, rng, &format!("rde.down{i}.conv"), widths[i], widths[i + 1], 3, 2);
                // empty regions would otherwise normalize to exactly zero and
                // sit on the ReLU kink with no gradient
                *store.get_mut(conv.b) = crate::nn::uniform(rng, &[widths[i + 1]], -0.1, 0.1);
                DownBlock {
                    conv,
                    norm: LayerNorm::new(store, &format!("rde.down{i}.norm"), widths[i + 1]),
                }
            })
            .collect();
        let coarse = (rows / 8) * (cols / 8);
        let grid_pe = store.add(
            "rde.grid_pe",
            crate::nn::uniform(rng, &[coarse, widths[3]], -0.1, 0.1),
        );
        let attn = (0..attn_layers)
            .map(|i| -> Result<AttnBlock> {
                let d = widths[3];
                Ok(AttnBlock {
                    attn: MultiHeadAttention::new(store, rng, &format!("rde.attn{i}.attn"), d, heads)?,
                    norm1: LayerNorm::new(store, &format!("rde.attn{i}.norm1"), d),
                    ffn: Mlp::new(store, rng, &format!("rde.attn{i}.ffn"), d, 2 * d, d),
                    norm2: LayerNorm::new(store, &format!("rde.attn{i}.norm2"), d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // stage i fuses upsampled features with the skip of width widths[2 - i]
        let up_out = [widths[2], widths[1], out];
        let mut up = Vec::with_capacity(3);
        let mut cur = widths[3];
        for i in 0..3 {
            let skip = widths[2 - i];
            up.push(Conv2d::new(store, rng, &format!("rde.up{i}"), cur + skip, up_out[i], 1, 1));
            cur = up_out[i];
        }
        Ok(Self {
            down,
            grid_pe,
            attn,
            up,
            in_channels: c,
            out_channels: out,
            rows,
            cols,
        })
    }

    /// `[rows × cols × c]` → `[rows × cols × out]`.
    pub fn forward(&self, g: &mut Graph<'_>, grid: Var) -> Result<Var> {
        let shape = g.tape.shape(grid).to_vec();
        if shape != [self.rows, self.cols, self.in_channels] {
            return Err(Error::Config(format!(
                "dense encoder expects [{}, {}, {}], got {shape:?}",
                self.rows, self.cols, self.in_channels
            )));
        }
        let mut skips = vec![grid];
        let mut x = grid;
        for b in &self.down {
            let y = b.conv.forward(g, x)?;
            let y = b.norm.forward(g, y)?;
            x = g.tape.relu(y);
            skips.push(x);
        }
        let coarse_shape = g.tape.shape(x).to_vec();
        let (ch, cw, cd) = (coarse_shape[0], coarse_shape[1], coarse_shape[2]);
        let mut t = g.tape.reshape(x, &[ch * cw, cd])?;
        let pe = g.param(self.grid_pe);
        for blk in &self.attn {
            // grid embedding enters queries and keys
            let qk = g.tape.add(t, pe)?;
            let a = blk.attn.forward(g, qk, qk, t)?;
            let r = g.tape.add(t, a)?;
            t = blk.norm1.forward(g, r)?;
            let f = blk.ffn.forward(g, t)?;
            let r = g.tape.add(t, f)?;
            t = blk.norm2.forward(g, r)?;
        }
        let mut x = g.tape.reshape(t, &[ch, cw, cd])?;
        for (i, conv) in self.up.iter().enumerate() {
            let u = g.tape.upsample2x(x)?;
            let skip = skips[2 - i];
            let cat = g.tape.concat(&[u, skip], 2)?;
            let y = conv.forward(g, cat)?;
            x = if i + 1 < self.up.len() { g.tape.relu(y) } else { y };
        }
        Ok(x)
    }
}
