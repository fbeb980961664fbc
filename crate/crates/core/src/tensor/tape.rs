use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { a: Var },
    Transpose { a: Var },
    Slice { a: Var, axis: usize, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Upsample2x { a: Var },
    ScatterMax { a: Var, argmax: Vec<usize> },
    Log { a: Var },
    Exp { a: Var },
    Sin { a: Var },
    Cos { a: Var },
    Abs { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Sum { a: Var },
    Mean { a: Var },
    FocalLoss { logits: Var, targets: Vec<bool>, alpha: f64, gamma: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the node list is a topological
/// order of the computation and [`Tape::backward`] visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; `None` when no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, zeros when disconnected.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

/// How `b` is laid over `a` in a binary elementwise op.
fn broadcast_len(a: &[usize], b: &[usize]) -> Result<usize> {
    let blen: usize = b.iter().product();
    if a == b || b == [1] {
        return Ok(blen);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(blen);
    }
    dim_err(format!("shapes {a:?} and {b:?} are not broadcastable"))
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Sigmoid focal term and its derivative w.r.t. the logit.
pub fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let w = q.powf(gamma);
        let loss = -alpha * w * log_p;
        let grad = alpha * w * (gamma * p * log_p - q);
        (loss, grad)
    } else {
        let log_q = -softplus(x);
        let q = 1.0 - p;
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * log_q;
        let grad = (1.0 - alpha) * w * (p - gamma * q * log_q);
        (loss, grad)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf value; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul lhs")?;
        let (k2, n) = self.mat_dims(b, "matmul rhs")?;
        if k != k2 {
            return dim_err(format!("matmul inner dimensions {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b: false },
            rg,
        ))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_bt lhs")?;
        let (n, k2) = self.mat_dims(b, "matmul_bt rhs")?;
        if k != k2 {
            return dim_err(format!("matmul_bt inner dimensions {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), n, k).t(),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b: true },
            rg,
        ))
    }

    /// `x · w + b` for `x: [m×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.mat_dims(x, "linear input")?;
        let (k2, n) = self.mat_dims(w, "linear weight")?;
        if k != k2 {
            return dim_err(format!("linear: input width {k}, weight rows {k2}"));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n {
                return dim_err(format!("linear: bias len {} vs {n}", bias.len()));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), m, k),
            MatRef::new(self.value(w).data(), k, n),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let blen = broadcast_len(ta.shape(), tb.shape())?;
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % blen]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("unary shape")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp { a }, rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::sin);
        let rg = self.rg(a);
        self.push(t, Op::Sin { a }, rg)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::cos);
        let rg = self.rg(a);
        self.push(t, Op::Cos { a }, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs { a }, rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes where the input lies inside
    /// the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.unary(a, |x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp { a, lo, hi }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { a }, rg))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return dim_err(format!("concat: shape {s:?} incompatible with {base:?}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("slice axis {axis} out of range for {shape:?}"));
        }
        if len == 0 || start + len > shape[axis] {
            return dim_err(format!(
                "slice {start}..{} out of bounds for extent {}",
                start + len,
                shape[axis]
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    /// Rows `idx` of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "gather_rows")?;
        if idx.is_empty() {
            return dim_err("gather_rows with no indices");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return dim_err(format!("gather_rows index {bad} out of range {r}"));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = (
            shape[..axis].iter().product::<usize>(),
            shape[axis],
            shape[axis + 1..].iter().product::<usize>(),
        );
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, axis }, rg))
    }

    /// Normalize each row over the last axis, then `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return dim_err(format!("layer_norm: affine params must have {n} entries"));
        }
        let (src, g, b) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = vec![0.0; src.len()];
        let mut stats = Vec::with_capacity(src.len() / n.max(1));
        for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                dst[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// 2-D convolution over a channels-last map.
    ///
    /// `x: [H, W, Cin]`, `w: [k·k·Cin, Cout]` with rows ordered
    /// `(ky, kx, cin)`, optional `b: [Cout]`. Zero padding `pad` on each side.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (h, wd, cin) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return dim_err(format!("conv2d: expected [H, W, C], got {s:?}")),
        };
        let (rows, cout) = self.mat_dims(w, "conv2d weight")?;
        if rows != k * k * cin {
            return dim_err(format!(
                "conv2d: weight has {rows} rows, kernel {k}x{k}x{cin} needs {}",
                k * k * cin
            ));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return dim_err("conv2d: kernel larger than padded input or zero stride");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; ho * wo * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != cout {
                return dim_err("conv2d: bias length mismatch");
            }
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::new(&cols, ho * wo, rows),
            MatRef::new(self.value(w).data(), rows, cout),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![ho, wo, cout], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[H, W, C]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = match self.shape(a) {
            [h, w, c] => (*h, *w, *c),
            s => return dim_err(format!("upsample2x: expected [H, W, C], got {s:?}")),
        };
        let src = self.value(a).data();
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let s = ((y / 2) * w + x / 2) * c;
                let d = (y * 2 * w + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![2 * h, 2 * w, c], out)?,
            Op::Upsample2x { a },
            rg,
        ))
    }

    /// Max-pool rows of `a: [P×C]` into `num_cells` buckets.
    ///
    /// Row `p` goes to bucket `cells[p]`. Empty buckets are zero; ties keep
    /// the lowest row index.
    pub fn scatter_max(&mut self, a: Var, cells: &[usize], num_cells: usize) -> Result<Var> {
        let (p, c) = self.mat_dims(a, "scatter_max")?;
        if cells.len() != p {
            return dim_err(format!("scatter_max: {} cell ids for {p} rows", cells.len()));
        }
        if let Some(&bad) = cells.iter().find(|&&i| i >= num_cells) {
            return dim_err(format!("scatter_max: cell {bad} out of range {num_cells}"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; num_cells * c];
        let mut argmax = vec![usize::MAX; num_cells * c];
        for (row, &cell) in cells.iter().enumerate() {
            for j in 0..c {
                let v = src[row * c + j];
                let slot = cell * c + j;
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = row;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![num_cells, c], out)?,
            Op::ScatterMax { a, argmax },
            rg,
        ))
    }

    /// Summed sigmoid focal loss over all entries of `logits`.
    ///
    /// `targets` holds one flag per logit (`true` = positive class).
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &[bool],
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.numel() {
            return dim_err(format!(
                "focal_loss: {} targets for {} logits",
                targets.len(),
                t.numel()
            ));
        }
        let total = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &pos)| focal_term(x, pos, alpha, gamma).0)
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::FocalLoss {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Contract(
                "backward on a value that does not require grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                let gm = MatRef::new(g, m, n);
                let bm = if *trans_b {
                    MatRef::new(tb.data(), n, k)
                } else {
                    MatRef::new(tb.data(), k, n)
                };
                if want(*a) {
                    let da = acc(&mut grads[a.0], m * k);
                    // dA = dC · Bᵀ (or dC · B when b was transposed)
                    let rhs = if *trans_b { bm } else { bm.t() };
                    gemm(gm, rhs, da, 1.0);
                }
                if want(*b) {
                    let db = acc(&mut grads[b.0], k * n);
                    let am = MatRef::new(ta.data(), m, k);
                    if *trans_b {
                        gemm(gm.t(), am, db, 1.0);
                    } else {
                        gemm(am.t(), gm, db, 1.0);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (m, k) = (tx.shape()[0], tx.shape()[1]);
                let n = tw.shape()[1];
                let gm = MatRef::new(g, m, n);
                if want(*x) {
                    let dx = acc(&mut grads[x.0], m * k);
                    gemm(gm, MatRef::new(tw.data(), k, n).t(), dx, 1.0);
                }
                if want(*w) {
                    let dw = acc(&mut grads[w.0], k * n);
                    gemm(MatRef::new(tx.data(), m, k).t(), gm, dw, 1.0);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let db = acc(&mut grads[b.0], n);
                    for row in g.chunks_exact(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if want(*a) {
                    let da = acc(&mut grads[a.0], g.len());
                    for (d, x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if want(*b) {
                    let blen = val(*b).numel();
                    let db = acc(&mut grads[b.0], blen);
                    for (i, x) in g.iter().enumerate() {
                        db[i % blen] += sign * x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let blen = tb.len();
                if want(*a) {
                    let da = acc(&mut grads[a.0], g.len());
                    for (i, x) in g.iter().enumerate() {
                        da[i] += x * tb[i % blen];
                    }
                }
                if want(*b) {
                    let db = acc(&mut grads[b.0], blen);
                    for (i, x) in g.iter().enumerate() {
                        db[i % blen] += x * ta[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                let da = acc(&mut grads[a.0], g.len());
                for (d, x) in da.iter_mut().zip(g) {
                    *d += c * x;
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = val(v).shape()[*axis] * inner;
                    if want(v) {
                        let dv = acc(&mut grads[v.0], outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (d, x) in dv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Reshape { a } => {
                let da = acc(&mut grads[a.0], g.len());
                for (d, x) in da.iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let da = acc(&mut grads[a.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = val(*a).shape();
                let len = node.value.shape()[*axis];
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let da = acc(&mut grads[a.0], val(*a).numel());
                for o in 0..outer {
                    let base = (o * src_shape[*axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, x) in da[base..base + len * inner].iter_mut().zip(src) {
                        *d += x;
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let c = val(*a).shape()[1];
                let da = acc(&mut grads[a.0], val(*a).numel());
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g[k * c + j];
                    }
                }
            }
            Op::Relu { a } => {
                let src = val(*a).data();
                let da = acc(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if src[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let da = acc(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Softmax { a, axis } => {
                let shape = node.value.shape();
                let (outer, len, inner) = (
                    shape[..*axis].iter().product::<usize>(),
                    shape[*axis],
                    shape[axis + 1..].iter().product::<usize>(),
                );
                let y = node.value.data();
                let da = acc(&mut grads[a.0], g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let src = val(*x).data();
                let gm = val(*gamma).data();
                let n = gm.len();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = if want(*x) {
                    Some(vec![0.0; src.len()])
                } else {
                    None
                };
                let mut gh = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let row = &src[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        gh[j] = grow[j] * gm[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mg = gh.iter().sum::<f64>() / n as f64;
                        let mgx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = rstd * (gh[j] - mg - xhat[j] * mgx);
                        }
                    }
                }
                if let Some(dx) = dx {
                    let d = acc(&mut grads[x.0], src.len());
                    for (a, b) in d.iter_mut().zip(dx) {
                        *a += b;
                    }
                }
                if want(*gamma) {
                    let d = acc(&mut grads[gamma.0], n);
                    for (a, b) in d.iter_mut().zip(dgamma) {
                        *a += b;
                    }
                }
                if want(*beta) {
                    let d = acc(&mut grads[beta.0], n);
                    for (a, b) in d.iter_mut().zip(dbeta) {
                        *a += b;
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let rows = geom.k * geom.k * geom.cin;
                let npix = geom.ho * geom.wo;
                let gm = MatRef::new(g, npix, geom.cout);
                if want(*w) {
                    let dw = acc(&mut grads[w.0], rows * geom.cout);
                    gemm(MatRef::new(cols, npix, rows).t(), gm, dw, 1.0);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let db = acc(&mut grads[b.0], geom.cout);
                    for row in g.chunks_exact(geom.cout) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                }
                if want(*x) {
                    let mut dcols = vec![0.0; npix * rows];
                    gemm(
                        gm,
                        MatRef::new(val(*w).data(), rows, geom.cout).t(),
                        &mut dcols,
                        0.0,
                    );
                    let dx = acc(&mut grads[x.0], geom.h * geom.w * geom.cin);
                    col2im_add(&dcols, geom, dx);
                }
            }
            Op::Upsample2x { a } => {
                let s = val(*a).shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let da = acc(&mut grads[a.0], h * w * c);
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let d = ((y / 2) * w + x / 2) * c;
                        let src = (y * 2 * w + x) * c;
                        for j in 0..c {
                            da[d + j] += g[src + j];
                        }
                    }
                }
            }
            Op::ScatterMax { a, argmax } => {
                let c = val(*a).shape()[1];
                let da = acc(&mut grads[a.0], val(*a).numel());
                for (slot, &row) in argmax.iter().enumerate() {
                    if row != usize::MAX {
                        da[row * c + slot % c] += g[slot];
                    }
                }
            }
            Op::Log { a } => {
                let src = val(*a).data();
                let da = acc(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] / src[i];
                }
            }
            Op::Exp { a } => {
                let y = node.value.data();
                let da = acc(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * y[i];
                }
            }
            Op::Sin { a } => {
                let src = val(*a).data();
                let da = acc(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * src[i].cos();
                }
            }
            Op::Cos { a } => {
                let src = val(*a).data();
                let da = acc(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] -= g[i] * src[i].sin();
                }
            }
            Op::Abs { a } => {
                let src = val(*a).data();
                let da = acc(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if src[i] > 0.0 {
                        da[i] += g[i];
                    } else if src[i] < 0.0 {
                        da[i] -= g[i];
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                let src = val(*a).data();
                let da = acc(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if src[i] >= *lo && src[i] <= *hi {
                        da[i] += g[i];
                    }
                }
            }
            Op::Sum { a } => {
                let da = acc(&mut grads[a.0], val(*a).numel());
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean { a } => {
                let n = val(*a).numel();
                let da = acc(&mut grads[a.0], n);
                for d in da.iter_mut() {
                    *d += g[0] / n as f64;
                }
            }
            Op::FocalLoss {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let src = val(*logits).data();
                let da = acc(&mut grads[logits.0], src.len());
                for i in 0..src.len() {
                    da[i] += g[0] * focal_term(src[i], targets[i], *alpha, *gamma).1;
                }
            }
        }
    }
}

fn im2col(src: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        h,
        w,
        cin,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let rows = k * k * cin;
    let mut cols = vec![0.0; ho * wo * rows];
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut cols[(oy * wo + ox) * rows..(oy * wo + ox + 1) * rows];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * cin;
                    let d = (ky * k + kx) * cin;
                    dst[d..d + cin].copy_from_slice(&src[s..s + cin]);
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ConvGeom {
        h,
        w,
        cin,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let rows = k * k * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let src = &dcols[(oy * wo + ox) * rows..(oy * wo + ox + 1) * rows];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let d = (iy as usize * w + ix as usize) * cin;
                    let s = (ky * k + kx) * cin;
                    for c in 0..cin {
                        dx[d + c] += src[s + c];
                    }
                }
            }
        }
    }
}
