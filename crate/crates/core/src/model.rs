//! The assembled detector: image backbone stub, radar pillars and dense
//! encoder, position embeddings, sequential decoder, and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderStack, Mode, QueryInit, Tokens};
use crate::error::{Error, Result};
use crate::geometry::{CameraCalib, DepthBins, WorldRange};
use crate::head::{decode, Detection, Heads, Prediction};
use crate::nn::{Conv2d, Graph, ParamStore};
use crate::pos_embed::PeEncoders;
use crate::radar::{BevGeometry, DenseEncoder, PillarChannels, PillarNet, RadarPoints};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub train_layers: usize,
    pub inference_layers: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub ffn_hidden: usize,
    /// Sine-cosine frequencies per BEV axis.
    pub num_freqs: usize,
    pub depth_bins: DepthBins,
    pub range: WorldRange,
    pub bev_rows: usize,
    pub bev_cols: usize,
    /// Pillar feature width.
    pub bev_channels: usize,
    pub rde_attn_layers: usize,
    pub rde_heads: usize,
    pub pillar_channels: PillarChannels,
    /// Hidden widths of the stride-2 image convs; one more conv maps to
    /// `embed_dim`, so the total stride is `2^(len + 1)`.
    pub backbone_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            train_layers: 6,
            inference_layers: 3,
            num_queries: 24,
            num_classes: 3,
            ffn_hidden: 128,
            num_freqs: 16,
            depth_bins: DepthBins::linear(16, 1.0, 40.0).expect("default depth bins"),
            range: WorldRange::default(),
            bev_rows: 32,
            bev_cols: 32,
            bev_channels: 16,
            rde_attn_layers: 2,
            rde_heads: 4,
            pillar_channels: PillarChannels::Six,
            backbone_widths: vec![8, 16, 32],
        }
    }
}

impl ModelConfig {
    pub fn feature_stride(&self) -> usize {
        1 << (self.backbone_widths.len() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.inference_layers == 0 || self.inference_layers > self.train_layers {
            return bad(format!(
                "inference_layers {} must be in 1..={}",
                self.inference_layers, self.train_layers
            ));
        }
        if self.num_queries == 0 || self.num_classes == 0 || self.num_freqs == 0 {
            return bad("queries, classes and frequencies must be positive".into());
        }
        if self.ffn_hidden == 0 || self.bev_channels == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.rde_heads == 0 || !(4 * self.bev_channels).is_multiple_of(self.rde_heads) {
            return bad(format!(
                "coarse BEV width {} is not divisible by {} heads",
                4 * self.bev_channels,
                self.rde_heads
            ));
        }
        BevGeometry::new(&self.range, self.bev_rows, self.bev_cols)?;
        if self.backbone_widths.contains(&0) {
            return bad("backbone widths must be positive".into());
        }
        Ok(())
    }
}

/// Sensor inputs of one frame.
#[derive(Clone, Copy, Debug)]
pub struct SceneInput<'a> {
    /// `[cameras × H × W × 3]`.
    pub images: &'a Tensor,
    pub calibs: &'a [CameraCalib],
    pub radar: &'a RadarPoints,
}

/// Detector weights and structure.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Vec<Conv2d>,
    pub pillar: PillarNet,
    pub rde: DenseEncoder,
    pub pe: PeEncoders,
    pub queries: QueryInit,
    pub decoder: DecoderStack,
    pub heads: Heads,
    pub bev: BevGeometry,
}

/// Token embeddings that depend only on geometry, computed once per graph.
struct SharedEmbeddings {
    radar_pe: Var,
    image_pe: Vec<(Vec<CameraCalib>, Vec<Var>)>,
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let mut widths = vec![3];
        widths.extend(&config.backbone_widths);
        widths.push(d);
        let backbone = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut store, &mut rng, &format!("backbone.{i}"), w[0], w[1], 3, 2))
            .collect();
        let bev = BevGeometry::new(&config.range, config.bev_rows, config.bev_cols)?;
        let pillar = PillarNet::new(&mut store, &mut rng, config.pillar_channels, config.bev_channels);
        let rde = DenseEncoder::new(
            &mut store,
            &mut rng,
            config.bev_rows,
            config.bev_cols,
            config.bev_channels,
            d,
            config.rde_attn_layers,
            config.rde_heads,
        )?;
        let pe = PeEncoders::new(
            &mut store,
            &mut rng,
            d,
            config.num_freqs,
            config.depth_bins.clone(),
            config.range,
        );
        let queries = QueryInit::new(&mut store, &mut rng, config.num_queries, d)?;
        let decoder = DecoderStack::new(
            &mut store,
            &mut rng,
            config.train_layers,
            config.inference_layers,
            d,
            config.heads,
            config.ffn_hidden,
        )?;
        let heads = Heads::new(&mut store, &mut rng, d, config.num_classes, config.range);
        Ok(Self {
            config,
            store,
            backbone,
            pillar,
            rde,
            pe,
            queries,
            decoder,
            heads,
            bev,
        })
    }

    fn check_input(&self, scene: &SceneInput<'_>) -> Result<()> {
        let s = scene.images.shape();
        if s.len() != 4 || s[3] != 3 || s[0] != scene.calibs.len() || s[0] == 0 {
            return Err(Error::Dimension(format!(
                "images {s:?} do not match {} calibrations",
                scene.calibs.len()
            )));
        }
        let stride = self.config.feature_stride();
        for c in scene.calibs {
            if c.image_size != [s[1], s[2]] || c.feature_stride != stride {
                return Err(Error::Config(format!(
                    "calibration {:?}/stride {} does not match images {s:?} and model stride {stride}",
                    c.image_size, c.feature_stride
                )));
            }
        }
        Ok(())
    }

    /// Image feature tokens of one camera `[h·w × D]`.
    pub fn image_features(&self, g: &mut Graph<'_>, image: Tensor) -> Result<Var> {
        let mut x = g.constant(image);
        for (i, conv) in self.backbone.iter().enumerate() {
            x = conv.forward(g, x)?;
            if i + 1 < self.backbone.len() {
                x = g.tape.relu(x);
            }
        }
        let s = g.tape.shape(x).to_vec();
        g.tape.reshape(x, &[s[0] * s[1], s[2]])
    }

    /// Dense radar features `[cells × D]` before position embedding.
    pub fn radar_features(&self, g: &mut Graph<'_>, radar: &RadarPoints) -> Result<Var> {
        let grid = self.pillar.forward(g, radar, &self.bev)?;
        let dense = self.rde.forward(g, grid)?;
        g.tape.reshape(dense, &[self.bev.num_cells(), self.config.embed_dim])
    }

    fn image_pe(&self, g: &mut Graph<'_>, shared: &mut SharedEmbeddings, calibs: &[CameraCalib]) -> Result<Vec<Var>> {
        if let Some((_, pes)) = shared.image_pe.iter().find(|(c, _)| c == calibs) {
            return Ok(pes.clone());
        }
        let pes = calibs
            .iter()
            .map(|c| self.pe.image_token_pe(g, c))
            .collect::<Result<Vec<_>>>()?;
        shared.image_pe.push((calibs.to_vec(), pes.clone()));
        Ok(pes)
    }

    /// Predictions for each scene: every layer in train mode, the last
    /// executed layer in infer mode.
    pub fn forward(&self, g: &mut Graph<'_>, scenes: &[SceneInput<'_>], mode: Mode) -> Result<Vec<Vec<Prediction>>> {
        for s in scenes {
            self.check_input(s)?;
        }
        let radar_pe = self.pe.radar_token_pe(g, &self.bev.normalized_centers())?;
        let mut shared = SharedEmbeddings {
            radar_pe,
            image_pe: Vec::new(),
        };
        let init = self.queries.state(g);
        let mut out = Vec::with_capacity(scenes.len());
        for s in scenes {
            let image_pe = self.image_pe(g, &mut shared, s.calibs)?;
            let per_cam: usize = s.images.shape()[1..].iter().product();
            let mut cams = Vec::with_capacity(s.calibs.len());
            for (i, pe) in image_pe.iter().enumerate() {
                let img = Tensor::new(
                    s.images.shape()[1..].to_vec(),
                    s.images.data()[i * per_cam..(i + 1) * per_cam].to_vec(),
                )?;
                let f = self.image_features(g, img)?;
                cams.push(g.tape.add(f, *pe)?);
            }
            let image = if cams.len() == 1 {
                cams[0]
            } else {
                g.tape.concat(&cams, 0)?
            };
            let radar = self.radar_features(g, s.radar)?;
            let radar = g.tape.add(radar, shared.radar_pe)?;
            let states = self.decoder.run(g, init, Tokens { radar, image }, &self.pe, mode)?;
            let preds = states
                .iter()
                .map(|st| self.heads.predict(g, st.features, st.refs))
                .collect::<Result<Vec<_>>>()?;
            out.push(preds);
        }
        Ok(out)
    }

    /// Inference on one scene with the pruned stack.
    pub fn detect(&self, scene: &SceneInput<'_>) -> Result<Vec<Detection>> {
        self.detect_with(scene, Mode::Infer)
    }

    /// Decoded final-layer detections for `mode`.
    pub fn detect_with(&self, scene: &SceneInput<'_>, mode: Mode) -> Result<Vec<Detection>> {
        let mut g = Graph::new(&self.store, false);
        let preds = self.forward(&mut g, std::slice::from_ref(scene), mode)?;
        let last = preds[0].last().expect("at least one layer");
        Ok(decode(g.value(last.logits), g.value(last.decoded)))
    }
}
