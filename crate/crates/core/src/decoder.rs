//! Sequential query decoder: each layer attends to radar tokens, then to
//! image tokens, then moves its reference points.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::pos_embed::PeEncoders;
use crate::tensor::{Tensor, Var};

/// Query features and normalized reference points on a tape.
#[derive(Clone, Copy, Debug)]
pub struct QueryState {
    /// `[n × D]`.
    pub features: Var,
    /// `[n × 3]`, inside `[0,1]³`.
    pub refs: Var,
    pub layer_index: usize,
}

/// Sensor tokens with their position embeddings already added.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    /// `[radar cells × D]`.
    pub radar: Var,
    /// `[all cameras' feature cells × D]`.
    pub image: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Every layer, every intermediate state.
    Train,
    /// The first `inference_layers` layers, final state only.
    Infer,
}

/// Learnable initial reference points; features start at zero.
#[derive(Clone, Debug)]
pub struct QueryInit {
    pub refs: ParamId,
    pub num_queries: usize,
    pub dim: usize,
}

impl QueryInit {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, n: usize, dim: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("at least one query is required".into()));
        }
        let refs = store.add("query.refs", crate::nn::uniform(rng, &[n, 3], 0.0, 1.0));
        Ok(Self {
            refs,
            num_queries: n,
            dim,
        })
    }

    pub fn state(&self, g: &mut Graph<'_>) -> QueryState {
        let refs = g.param(self.refs);
        // refs are trained freely; keep the decoder's input inside the box
        let refs = g.tape.clamp(refs, 0.0, 1.0);
        let features = g.constant(Tensor::zeros(&[self.num_queries, self.dim]));
        QueryState {
            features,
            refs,
            layer_index: 0,
        }
    }
}

/// One decoder layer: `f1` (self-attention, radar cross-attention, FFN),
/// `f2` (image cross-attention, FFN), and the reference offset head.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub radar_attn: MultiHeadAttention,
    pub norm_radar: LayerNorm,
    pub ffn1: Mlp,
    pub norm_ffn1: LayerNorm,
    pub image_attn: MultiHeadAttention,
    pub norm_image: LayerNorm,
    pub ffn2: Mlp,
    pub norm_ffn2: LayerNorm,
    pub offset: Linear,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        let offset = Linear::new(store, rng, &n("offset"), dim, 3);
        // start with small steps so early layers do not saturate the clamp
        for v in store.get_mut(offset.w).data_mut() {
            *v *= 0.1;
        }
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, rng, &n("self_attn"), dim, heads)?,
            norm_self: LayerNorm::new(store, &n("norm_self"), dim),
            radar_attn: MultiHeadAttention::new(store, rng, &n("radar_attn"), dim, heads)?,
            norm_radar: LayerNorm::new(store, &n("norm_radar"), dim),
            ffn1: Mlp::new(store, rng, &n("ffn1"), dim, ffn_hidden, dim),
            norm_ffn1: LayerNorm::new(store, &n("norm_ffn1"), dim),
            image_attn: MultiHeadAttention::new(store, rng, &n("image_attn"), dim, heads)?,
            norm_image: LayerNorm::new(store, &n("norm_image"), dim),
            ffn2: Mlp::new(store, rng, &n("ffn2"), dim, ffn_hidden, dim),
            norm_ffn2: LayerNorm::new(store, &n("norm_ffn2"), dim),
            offset,
        })
    }

    /// Zeroes every attention output projection and FFN output layer, which
    /// turns the feature path into the identity for zero features.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        for a in [&self.self_attn, &self.radar_attn, &self.image_attn] {
            a.out_proj.zero(store);
        }
        self.ffn1.fc2.zero(store);
        self.ffn2.fc2.zero(store);
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        state: QueryState,
        tokens: Tokens,
        enc: &PeEncoders,
    ) -> Result<QueryState> {
        let dim = self.offset.in_dim;
        for (what, t) in [
            ("query", state.features),
            ("radar token", tokens.radar),
            ("image token", tokens.image),
        ] {
            let s = g.tape.shape(t);
            if s.len() != 2 || s[1] != dim {
                return Err(Error::Config(format!(
                    "{what} embedding shape {s:?} does not match decoder width {dim}"
                )));
            }
        }
        let (pe_2d, pe_3d) = enc.query_pe(g, state.refs)?;
        let mut f = state.features;

        // f1
        let q = g.tape.add(f, pe_2d)?;
        let a = self.self_attn.forward(g, q, q, f)?;
        f = residual(g, f, a, &self.norm_self)?;
        let q = g.tape.add(f, pe_2d)?;
        let a = self.radar_attn.forward(g, q, tokens.radar, tokens.radar)?;
        f = residual(g, f, a, &self.norm_radar)?;
        let h = self.ffn1.forward(g, f)?;
        f = residual(g, f, h, &self.norm_ffn1)?;

        // f2
        let q = g.tape.add(f, pe_3d)?;
        let a = self.image_attn.forward(g, q, tokens.image, tokens.image)?;
        f = residual(g, f, a, &self.norm_image)?;
        let h = self.ffn2.forward(g, f)?;
        f = residual(g, f, h, &self.norm_ffn2)?;

        let delta = self.offset.forward(g, f)?;
        let moved = g.tape.add(state.refs, delta)?;
        let refs = g.tape.clamp(moved, 0.0, 1.0);
        Ok(QueryState {
            features: f,
            refs,
            layer_index: state.layer_index + 1,
        })
    }
}

/// Smallest pairwise distance between ground-plane points, e.g. query
/// reference points or decoded centers; small values flag queries
/// collapsing onto one region.
pub fn min_pairwise_distance(points: &[[f64; 2]]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let d = (a[0] - b[0]).hypot(a[1] - b[1]);
            best = Some(best.map_or(d, |m| m.min(d)));
        }
    }
    best
}

fn residual(g: &mut Graph<'_>, x: Var, update: Var, norm: &LayerNorm) -> Result<Var> {
    let sum = g.tape.add(x, update)?;
    norm.forward(g, sum)
}

/// Layers trained together; inference keeps a prefix of them.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub inference_layers: usize,
}

impl DecoderStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        train_layers: usize,
        inference_layers: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        if train_layers == 0 || inference_layers == 0 || inference_layers > train_layers {
            return Err(Error::Config(format!(
                "inference layers {inference_layers} must be in 1..={train_layers}"
            )));
        }
        let layers = (0..train_layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("decoder.{i}"), dim, heads, ffn_hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            inference_layers,
        })
    }

    pub fn layers_for(&self, mode: Mode) -> usize {
        match mode {
            Mode::Train => self.layers.len(),
            Mode::Infer => self.inference_layers,
        }
    }

    /// Runs the stack. Train mode returns every layer's output; infer mode
    /// returns only the last executed layer's output.
    pub fn run(
        &self,
        g: &mut Graph<'_>,
        init: QueryState,
        tokens: Tokens,
        enc: &PeEncoders,
        mode: Mode,
    ) -> Result<Vec<QueryState>> {
        let mut state = init;
        let mut out = Vec::new();
        for layer in &self.layers[..self.layers_for(mode)] {
            state = layer.forward(g, state, tokens, enc)?;
            if mode == Mode::Train {
                out.push(state);
            }
        }
        if mode == Mode::Infer {
            out.push(state);
        }
        Ok(out)
    }
}
