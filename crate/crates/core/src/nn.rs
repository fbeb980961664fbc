//! Parameters and the small set of layers the model is assembled from.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// A tape bound to a parameter store.
///
/// Parameters are copied onto the tape lazily on first use, so a truncated
/// forward pass never touches the weights it does not execute.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    /// `trainable` makes every bound parameter a gradient target.
    pub fn new(store: &'p ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Per-parameter gradients, aligned with the store; `None` for
    /// parameters the forward pass never used.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads.take(v)).map(|g| {
                    Tensor::new(self.store.values[i].shape().to_vec(), g).expect("grad shape")
                })
            })
            .collect()
    }
}

pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], -limit, limit)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform shape")
}

/// Dense layer `x · W + b`, `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    /// Dense layer without a bias term.
    pub fn new_unbiased(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim));
        Self {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.tape.linear(x, w, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.tape.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with input and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q_proj: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            // a key bias only shifts every score in a row equally
            k_proj: Linear::new_unbiased(store, rng, &format!("{name}.k"), dim, dim),
            v_proj: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            out_proj: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
        })
    }

    /// `q: [Lq×D]`, `k, v: [Lk×D]` → `[Lq×D]`.
    pub fn forward(&self, g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        let dim = self.q_proj.in_dim;
        for (what, x) in [("query", q), ("key", k), ("value", v)] {
            if g.tape.shape(x).len() != 2 || g.tape.shape(x)[1] != dim {
                return Err(Error::Config(format!(
                    "attention {what} has shape {:?}, expected width {dim}",
                    g.tape.shape(x)
                )));
            }
        }
        let qp = self.q_proj.forward(g, q)?;
        let kp = self.k_proj.forward(g, k)?;
        let vp = self.v_proj.forward(g, v)?;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    g.tape.slice(qp, 1, h * dh, dh)?,
                    g.tape.slice(kp, 1, h * dh, dh)?,
                    g.tape.slice(vp, 1, h * dh, dh)?,
                )
            };
            let scores = g.tape.matmul_bt(qh, kh)?;
            let scores = g.tape.scale(scores, scale);
            let attn = g.tape.softmax(scores, 1)?;
            outs.push(g.tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.tape.concat(&outs, 1)?
        };
        self.out_proj.forward(g, merged)
    }
}

/// Convolution over a channels-last `[H, W, C]` map.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        // He-style bound for ReLU stacks
        let limit = (6.0 / fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform(rng, &[fan_in, cout], -limit, limit),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.tape
            .conv2d(x, w, Some(b), self.kernel, self.stride, self.pad)
    }
}

/// Outcome of [`check_param_grads`].
#[derive(Clone, Debug)]
pub struct ParamCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub checked: usize,
}

/// Finite-difference check of every parameter gradient of a scalar
/// function built on a [`Graph`]; same error measure as
/// [`grad_check`](crate::tensor::grad_check).
pub fn check_param_grads<F>(store: &ParamStore, eps: f64, f: F) -> Result<ParamCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, false);
        let out = f(&mut g)?;
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(Error::Evaluation(format!("function value is {y}")));
        }
        Ok(y)
    };
    let mut g = Graph::new(store, true);
    let out = f(&mut g)?;
    let floor = crate::tensor::noise_floor(g.value(out).item());
    let mut grads = g.tape.backward(out)?;
    let analytic = g.param_grads(&mut grads);
    drop(g);

    let mut probe = store.clone();
    let mut report = ParamCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        let Some(a) = &analytic[id.0] else { continue };
        for i in 0..a.numel() {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let an = a.data()[i];
            let err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{i}]", store.name(id));
            }
        }
    }
    Ok(report)
}
