//! Minimal reverse-mode differentiation over the fixed operation set the
//! flow model needs: matmul, 3x3 same-padded conv, a small elementwise
//! family, bias-add, batch norm, row slicing/concatenation, transpose and
//! masked sums. Everything is 64-bit.
//!
//! A [`Tape`] is an append-only list of nodes in topological order; [`Var`]
//! is a copyable handle into it. Leaves are created from [`Tensor`] values
//! (typically model parameters leased into the tape for one step), ops
//! append derived nodes, and [`Tape::backward`] runs one reverse sweep.
//! Gradients accumulate additively: a tensor feeding two consumers receives
//! the sum of both contributions, and running backward twice without
//! clearing doubles every gradient.
//!
//! There is no broadcasting beyond scalar-with-tensor and bias-add, no
//! dynamic shapes within one tape, and no higher-order derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dim(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self { shape, data, requires_grad, grad: None })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], requires_grad, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Add `delta` into the grad field, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel statistics computed by a training-mode batch norm, used by
/// callers to maintain exponential-moving-average inference statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum BnLayout {
    /// Shape `[C, ...]`: per-channel statistics over all trailing positions.
    ChannelFirst { channels: usize, positions: usize },
    /// Shape `[N, F]`: per-feature statistics over the N rows.
    FeatureLast { channels: usize, positions: usize },
}

impl BnLayout {
    fn channels(&self) -> usize {
        match *self {
            BnLayout::ChannelFirst { channels, .. } | BnLayout::FeatureLast { channels, .. } => {
                channels
            }
        }
    }

    fn positions(&self) -> usize {
        match *self {
            BnLayout::ChannelFirst { positions, .. } | BnLayout::FeatureLast { positions, .. } => {
                positions
            }
        }
    }

    #[inline]
    fn index(&self, c: usize, p: usize) -> usize {
        match *self {
            BnLayout::ChannelFirst { positions, .. } => c * positions + p,
            BnLayout::FeatureLast { channels, .. } => p * channels + c,
        }
    }
}

#[derive(Debug)]
enum Rule {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Exp { a: usize },
    Log { a: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    Abs { a: usize },
    Square { a: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, bias: usize, cin: usize, cout: usize, h: usize, wd: usize },
    BiasAdd { a: usize, bias: usize, rows: usize, cols: usize },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        layout: BnLayout,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    BatchNormEval { x: usize, gamma: usize, beta: usize, layout: BnLayout, scale: Vec<f64>, xhat: Vec<f64> },
    Sum { a: usize },
    SliceRows { a: usize, r0: usize, cols: usize },
    ConcatRows { a: usize, b: usize, rows_a: usize, cols: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Crop { a: usize, src_cols: usize, rows: usize, cols: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    rule: Rule,
}

/// Recorded computation over [`Var`] handles. Single-threaded by design.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, rule: Rule) -> Var {
        self.nodes.push(Node { shape, data, grad: None, needs_grad, rule });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].shape.iter().product()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Gradient of the node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Add the tape gradient of `v` into `tensor.grad`.
    pub fn write_grad_into(&self, v: Var, tensor: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            tensor.accumulate_grad(g);
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Lease a tensor onto the tape (data is copied).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Rule::Leaf)
    }

    pub fn leaf_values(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dim(format!(
                "data length {} vs shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, requires_grad, Rule::Leaf))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.leaf_values(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], false, Rule::Leaf)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_operands(&self, a: Var, b: Var, op: &str) -> Result<(Vec<usize>, usize)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if sa == sb {
            Ok((sa.clone(), na))
        } else if nb == 1 {
            Ok((sa.clone(), na))
        } else if na == 1 {
            Ok((sb.clone(), nb))
        } else {
            Err(Error::Dim(format!("{op}: shapes {sa:?} and {sb:?} are not compatible")))
        }
    }

    #[inline]
    fn fetch(&self, v: Var, i: usize) -> f64 {
        let d = &self.nodes[v.0].data;
        if d.len() == 1 {
            d[0]
        } else {
            d[i]
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, n) = self.binary_operands(a, b, "add")?;
        let data = (0..n).map(|i| self.fetch(a, i) + self.fetch(b, i)).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, needs, Rule::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, n) = self.binary_operands(a, b, "sub")?;
        let data = (0..n).map(|i| self.fetch(a, i) - self.fetch(b, i)).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, needs, Rule::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, n) = self.binary_operands(a, b, "mul")?;
        let data = (0..n).map(|i| self.fetch(a, i) * self.fetch(b, i)).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, needs, Rule::Mul { a: a.0, b: b.0 }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, n) = self.binary_operands(a, b, "div")?;
        for i in 0..self.nodes[b.0].data.len() {
            if self.nodes[b.0].data[i] == 0.0 {
                return Err(Error::Domain("division by zero".into()));
            }
        }
        let data = (0..n).map(|i| self.fetch(a, i) / self.fetch(b, i)).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, data, needs, Rule::Div { a: a.0, b: b.0 }))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|v| v + c).collect();
        let needs = self.needs(a);
        self.push(shape, data, needs, Rule::AddScalar { a: a.0 })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|v| v * c).collect();
        let needs = self.needs(a);
        self.push(shape, data, needs, Rule::MulScalar { a: a.0, c })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|v| v.exp()).collect();
        let needs = self.needs(a);
        self.push(shape, data, needs, Rule::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].data.iter().any(|v| *v <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|v| v.ln()).collect();
        let needs = self.needs(a);
        Ok(self.push(shape, data, needs, Rule::Log { a: a.0 }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let needs = self.needs(a);
        self.push(shape, data, needs, Rule::Sigmoid { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(shape, data, needs, Rule::Relu { a: a.0 })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|v| v.abs()).collect();
        let needs = self.needs(a);
        self.push(shape, data, needs, Rule::Abs { a: a.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.nodes[a.0].data.iter().map(|v| v * v).collect();
        let needs = self.needs(a);
        self.push(shape, data, needs, Rule::Square { a: a.0 })
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dim(format!("matmul needs 2-d operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dim(format!("matmul inner dims disagree: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let aip = da[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &db[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, needs, Rule::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    /// 3x3 cross-correlation with padding 1 (spatial dims preserved) plus a
    /// per-output-channel bias. Input `[C_in, H, W]`, kernels
    /// `[C_out, C_in, 3, 3]`, bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        if sx.len() != 3 {
            return Err(Error::Dim(format!("conv2d input must be [C,H,W], got {sx:?}")));
        }
        if sw.len() != 4 || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::Dim(format!("conv2d kernels must be [Cout,Cin,3,3], got {sw:?}")));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        if sw[1] != cin {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input has {cin}, kernels expect {}",
                sw[1]
            )));
        }
        if sb != vec![cout] {
            return Err(Error::Dim(format!("conv2d bias must be [{cout}], got {sb:?}")));
        }
        let mut out = vec![0.0; cout * h * wd];
        {
            let dx = &self.nodes[x.0].data;
            let dw = &self.nodes[w.0].data;
            let db = &self.nodes[bias.0].data;
            for co in 0..cout {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = db[co];
                        for ci in 0..cin {
                            for u in 0..3usize {
                                let ii = i as isize + u as isize - 1;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                for v in 0..3usize {
                                    let jj = j as isize + v as isize - 1;
                                    if jj < 0 || jj >= wd as isize {
                                        continue;
                                    }
                                    acc += dw[((co * cin + ci) * 3 + u) * 3 + v]
                                        * dx[(ci * h + ii as usize) * wd + jj as usize];
                                }
                            }
                        }
                        out[(co * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(
            vec![cout, h, wd],
            out,
            needs,
            Rule::Conv2d { x: x.0, w: w.0, bias: bias.0, cin, cout, h, wd },
        ))
    }

    /// Add a length-F bias vector to every row of an `[N, F]` matrix.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::Dim(format!("bias_add: matrix {sa:?} with bias {sb:?}")));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += self.nodes[bias.0].data[c];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(sa, data, needs, Rule::BiasAdd { a: a.0, bias: bias.0, rows, cols }))
    }

    fn bn_layout(&self, x: Var, gamma: Var) -> Result<BnLayout> {
        let sx = &self.nodes[x.0].shape;
        let c = self.nodes[gamma.0].data.len();
        let numel: usize = sx.iter().product();
        match sx.len() {
            3 if sx[0] == c => Ok(BnLayout::ChannelFirst { channels: c, positions: numel / c }),
            2 if sx[1] == c => Ok(BnLayout::FeatureLast { channels: c, positions: sx[0] }),
            _ => Err(Error::Dim(format!(
                "batch_norm: input {sx:?} incompatible with {c} channels"
            ))),
        }
    }

    /// Training-mode batch norm: normalize per channel by the input's own
    /// statistics (biased variance), then scale and shift. Differentiable
    /// through the statistics. Returns the batch statistics so callers can
    /// maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        if eps <= 0.0 {
            return Err(Error::Domain(format!("batch_norm eps must be positive, got {eps}")));
        }
        let layout = self.bn_layout(x, gamma)?;
        let (channels, positions) = (layout.channels(), layout.positions());
        if positions == 0 {
            return Err(Error::Contract("batch_norm on an empty batch".into()));
        }
        if self.nodes[beta.0].data.len() != channels {
            return Err(Error::Dim("batch_norm: beta length differs from gamma".into()));
        }
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        let mut inv_std = vec![0.0; channels];
        let numel = positions * channels;
        let mut xhat = vec![0.0; numel];
        let mut out = vec![0.0; numel];
        {
            let dx = &self.nodes[x.0].data;
            let dg = &self.nodes[gamma.0].data;
            let db = &self.nodes[beta.0].data;
            for c in 0..channels {
                let mut s = 0.0;
                for p in 0..positions {
                    s += dx[layout.index(c, p)];
                }
                mean[c] = s / positions as f64;
                let mut v = 0.0;
                for p in 0..positions {
                    let d = dx[layout.index(c, p)] - mean[c];
                    v += d * d;
                }
                var[c] = v / positions as f64;
                inv_std[c] = 1.0 / (var[c] + eps).sqrt();
                for p in 0..positions {
                    let idx = layout.index(c, p);
                    let xh = (dx[idx] - mean[c]) * inv_std[c];
                    xhat[idx] = xh;
                    out[idx] = dg[c] * xh + db[c];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            shape,
            out,
            needs,
            Rule::BatchNormTrain { x: x.0, gamma: gamma.0, beta: beta.0, layout, inv_std, xhat },
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm: a fixed per-channel affine map using the
    /// provided running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Domain(format!("batch_norm eps must be positive, got {eps}")));
        }
        let layout = self.bn_layout(x, gamma)?;
        let (channels, positions) = (layout.channels(), layout.positions());
        if positions == 0 {
            return Err(Error::Contract("batch_norm on an empty batch".into()));
        }
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::Dim("batch_norm: running statistics length mismatch".into()));
        }
        let scale: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let numel = positions * channels;
        let mut xhat = vec![0.0; numel];
        let mut out = vec![0.0; numel];
        {
            let dx = &self.nodes[x.0].data;
            let dg = &self.nodes[gamma.0].data;
            let db = &self.nodes[beta.0].data;
            for c in 0..channels {
                for p in 0..positions {
                    let idx = layout.index(c, p);
                    let xh = (dx[idx] - running_mean[c]) * scale[c];
                    xhat[idx] = xh;
                    out[idx] = dg[c] * xh + db[c];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            shape,
            out,
            needs,
            Rule::BatchNormEval { x: x.0, gamma: gamma.0, beta: beta.0, layout, scale, xhat },
        ))
    }

    // ── Structure ────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![], vec![s], needs, Rule::Sum { a: a.0 })
    }

    /// Rows `[r0, r1)` of a 2-d matrix.
    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 2 {
            return Err(Error::Dim(format!("slice_rows needs a matrix, got {sa:?}")));
        }
        if r0 >= r1 || r1 > sa[0] {
            return Err(Error::Dim(format!("slice_rows range {r0}..{r1} out of {} rows", sa[0])));
        }
        let cols = sa[1];
        let data = self.nodes[a.0].data[r0 * cols..r1 * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.push(vec![r1 - r0, cols], data, needs, Rule::SliceRows { a: a.0, r0, cols }))
    }

    /// Stack two matrices with equal column counts, `a` on top.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dim(format!("concat_rows: {sa:?} over {sb:?}")));
        }
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![sa[0] + sb[0], sa[1]],
            data,
            needs,
            Rule::ConcatRows { a: a.0, b: b.0, rows_a: sa[0], cols: sa[1] },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 2 {
            return Err(Error::Dim(format!("transpose needs a matrix, got {sa:?}")));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = self.nodes[a.0].data[i * cols + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![cols, rows], data, needs, Rule::Transpose { a: a.0, rows, cols }))
    }

    /// Reinterpret the value under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::Dim(format!(
                "reshape to {shape:?} from {:?}",
                self.nodes[a.0].shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let needs = self.needs(a);
        Ok(self.push(shape, data, needs, Rule::Reshape { a: a.0 }))
    }

    /// Top-left `rows x cols` block of a matrix.
    pub fn crop(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 2 {
            return Err(Error::Dim(format!("crop needs a matrix, got {sa:?}")));
        }
        if rows > sa[0] || cols > sa[1] || rows == 0 || cols == 0 {
            return Err(Error::Dim(format!("crop {rows}x{cols} out of {sa:?}")));
        }
        let src_cols = sa[1];
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = self.nodes[a.0].data[i * src_cols + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            vec![rows, cols],
            data,
            needs,
            Rule::Crop { a: a.0, src_cols, rows, cols },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss.
    ///
    /// Cotangents are propagated in per-call buffers and accumulated into
    /// the persistent node gradients at the end, so repeated calls add up
    /// (two backward passes double every gradient) without re-propagating
    /// stale intermediate values. Read results with [`Tape::grad`] or
    /// [`Tape::write_grad_into`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut cot: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        cot[loss.0] = Some(vec![1.0]);

        {
            let nodes = &self.nodes;
            fn buf<'a>(
                cot: &'a mut [Option<Vec<f64>>],
                idx: usize,
                len: usize,
            ) -> &'a mut Vec<f64> {
                cot[idx].get_or_insert_with(|| vec![0.0; len])
            }
            // Scatter into a binary operand, handling the scalar-broadcast case.
            let scatter = |cot: &mut Vec<Option<Vec<f64>>>,
                           idx: usize,
                           dy: &[f64],
                           map: &dyn Fn(usize, f64) -> f64| {
                if !nodes[idx].needs_grad {
                    return;
                }
                let n = nodes[idx].data.len();
                let len = n;
                let g = cot[idx].get_or_insert_with(|| vec![0.0; len]);
                if n == dy.len() {
                    for (i, d) in dy.iter().enumerate() {
                        g[i] += map(i, *d);
                    }
                } else {
                    let mut acc = 0.0;
                    for (i, d) in dy.iter().enumerate() {
                        acc += map(i, *d);
                    }
                    g[0] += acc;
                }
            };

            for idx in (0..=loss.0).rev() {
                if !nodes[idx].needs_grad {
                    continue;
                }
                let Some(dy) = cot[idx].clone() else { continue };
                match &nodes[idx].rule {
                    Rule::Leaf => {}
                    Rule::Add { a, b } => {
                        scatter(&mut cot, *a, &dy, &|_, d| d);
                        scatter(&mut cot, *b, &dy, &|_, d| d);
                    }
                    Rule::Sub { a, b } => {
                        scatter(&mut cot, *a, &dy, &|_, d| d);
                        scatter(&mut cot, *b, &dy, &|_, d| -d);
                    }
                    Rule::Mul { a, b } => {
                        let da = &nodes[*a].data;
                        let db = &nodes[*b].data;
                        let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                        scatter(&mut cot, *a, &dy, &|i, d| d * at(db, i));
                        scatter(&mut cot, *b, &dy, &|i, d| d * at(da, i));
                    }
                    Rule::Div { a, b } => {
                        let da = &nodes[*a].data;
                        let db = &nodes[*b].data;
                        let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                        scatter(&mut cot, *a, &dy, &|i, d| d / at(db, i));
                        scatter(&mut cot, *b, &dy, &|i, d| {
                            let bv = at(db, i);
                            -d * at(da, i) / (bv * bv)
                        });
                    }
                    Rule::Exp { a } => {
                        let out = &nodes[idx].data;
                        scatter(&mut cot, *a, &dy, &|i, d| d * out[i]);
                    }
                    Rule::Log { a } => {
                        let input = &nodes[*a].data;
                        scatter(&mut cot, *a, &dy, &|i, d| d / input[i]);
                    }
                    Rule::Sigmoid { a } => {
                        let out = &nodes[idx].data;
                        scatter(&mut cot, *a, &dy, &|i, d| d * out[i] * (1.0 - out[i]));
                    }
                    Rule::Relu { a } => {
                        let input = &nodes[*a].data;
                        scatter(&mut cot, *a, &dy, &|i, d| if input[i] > 0.0 { d } else { 0.0 });
                    }
                    Rule::Abs { a } => {
                        // sign(0) = 0 convention.
                        let input = &nodes[*a].data;
                        scatter(&mut cot, *a, &dy, &|i, d| {
                            if input[i] == 0.0 {
                                0.0
                            } else {
                                d * input[i].signum()
                            }
                        });
                    }
                    Rule::Square { a } => {
                        let input = &nodes[*a].data;
                        scatter(&mut cot, *a, &dy, &|i, d| 2.0 * d * input[i]);
                    }
                    Rule::AddScalar { a } => {
                        scatter(&mut cot, *a, &dy, &|_, d| d);
                    }
                    Rule::MulScalar { a, c } => {
                        let c = *c;
                        scatter(&mut cot, *a, &dy, &|_, d| d * c);
                    }
                    Rule::Matmul { a, b, m, k, n } => {
                        let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                        if nodes[a].needs_grad {
                            let db = &nodes[b].data;
                            let g = buf(&mut cot, a, nodes[a].data.len());
                            // dA = dY . B^T
                            for i in 0..m {
                                for p in 0..k {
                                    let mut acc = 0.0;
                                    for j in 0..n {
                                        acc += dy[i * n + j] * db[p * n + j];
                                    }
                                    g[i * k + p] += acc;
                                }
                            }
                        }
                        if nodes[b].needs_grad {
                            let da = &nodes[a].data;
                            let g = buf(&mut cot, b, nodes[b].data.len());
                            // dB = A^T . dY
                            for p in 0..k {
                                for j in 0..n {
                                    let mut acc = 0.0;
                                    for i in 0..m {
                                        acc += da[i * k + p] * dy[i * n + j];
                                    }
                                    g[p * n + j] += acc;
                                }
                            }
                        }
                    }
                    Rule::Conv2d { x, w, bias, cin, cout, h, wd } => {
                        let (x, w, bias, cin, cout, h, wd) = (*x, *w, *bias, *cin, *cout, *h, *wd);
                        if nodes[bias].needs_grad {
                            let g = buf(&mut cot, bias, nodes[bias].data.len());
                            for co in 0..cout {
                                let mut acc = 0.0;
                                for p in 0..h * wd {
                                    acc += dy[co * h * wd + p];
                                }
                                g[co] += acc;
                            }
                        }
                        if nodes[w].needs_grad {
                            let dx_in = &nodes[x].data;
                            let g = buf(&mut cot, w, nodes[w].data.len());
                            for co in 0..cout {
                                for ci in 0..cin {
                                    for u in 0..3usize {
                                        for v in 0..3usize {
                                            let mut acc = 0.0;
                                            for i in 0..h {
                                                let ii = i as isize + u as isize - 1;
                                                if ii < 0 || ii >= h as isize {
                                                    continue;
                                                }
                                                for j in 0..wd {
                                                    let jj = j as isize + v as isize - 1;
                                                    if jj < 0 || jj >= wd as isize {
                                                        continue;
                                                    }
                                                    acc += dy[(co * h + i) * wd + j]
                                                        * dx_in[(ci * h + ii as usize) * wd
                                                            + jj as usize];
                                                }
                                            }
                                            g[((co * cin + ci) * 3 + u) * 3 + v] += acc;
                                        }
                                    }
                                }
                            }
                        }
                        if nodes[x].needs_grad {
                            let dw_in = &nodes[w].data;
                            let g = buf(&mut cot, x, nodes[x].data.len());
                            for co in 0..cout {
                                for i in 0..h {
                                    for j in 0..wd {
                                        let d = dy[(co * h + i) * wd + j];
                                        if d == 0.0 {
                                            continue;
                                        }
                                        for ci in 0..cin {
                                            for u in 0..3usize {
                                                let ii = i as isize + u as isize - 1;
                                                if ii < 0 || ii >= h as isize {
                                                    continue;
                                                }
                                                for v in 0..3usize {
                                                    let jj = j as isize + v as isize - 1;
                                                    if jj < 0 || jj >= wd as isize {
                                                        continue;
                                                    }
                                                    g[(ci * h + ii as usize) * wd + jj as usize] +=
                                                        d * dw_in[((co * cin + ci) * 3 + u) * 3 + v];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Rule::BiasAdd { a, bias, rows, cols } => {
                        let (a, bias, rows, cols) = (*a, *bias, *rows, *cols);
                        if nodes[a].needs_grad {
                            let g = buf(&mut cot, a, nodes[a].data.len());
                            for (i, d) in dy.iter().enumerate() {
                                g[i] += d;
                            }
                        }
                        if nodes[bias].needs_grad {
                            let g = buf(&mut cot, bias, nodes[bias].data.len());
                            for r in 0..rows {
                                for c in 0..cols {
                                    g[c] += dy[r * cols + c];
                                }
                            }
                        }
                    }
                    Rule::BatchNormTrain { x, gamma, beta, layout, inv_std, xhat } => {
                        let (x, gamma, beta) = (*x, *gamma, *beta);
                        let layout = *layout;
                        let (channels, positions) = (layout.channels(), layout.positions());
                        if nodes[beta].needs_grad {
                            let g = buf(&mut cot, beta, nodes[beta].data.len());
                            for c in 0..channels {
                                let mut acc = 0.0;
                                for p in 0..positions {
                                    acc += dy[layout.index(c, p)];
                                }
                                g[c] += acc;
                            }
                        }
                        if nodes[gamma].needs_grad {
                            let g = buf(&mut cot, gamma, nodes[gamma].data.len());
                            for c in 0..channels {
                                let mut acc = 0.0;
                                for p in 0..positions {
                                    let i2 = layout.index(c, p);
                                    acc += dy[i2] * xhat[i2];
                                }
                                g[c] += acc;
                            }
                        }
                        if nodes[x].needs_grad {
                            let m = positions as f64;
                            let gamma_data = &nodes[gamma].data;
                            let g = buf(&mut cot, x, nodes[x].data.len());
                            for c in 0..channels {
                                let mut sum_dy = 0.0;
                                let mut sum_dy_xhat = 0.0;
                                for p in 0..positions {
                                    let i2 = layout.index(c, p);
                                    sum_dy += dy[i2];
                                    sum_dy_xhat += dy[i2] * xhat[i2];
                                }
                                let k = gamma_data[c] * inv_std[c];
                                for p in 0..positions {
                                    let i2 = layout.index(c, p);
                                    g[i2] +=
                                        k * (dy[i2] - sum_dy / m - xhat[i2] * sum_dy_xhat / m);
                                }
                            }
                        }
                    }
                    Rule::BatchNormEval { x, gamma, beta, layout, scale, xhat } => {
                        let (x, gamma, beta) = (*x, *gamma, *beta);
                        let layout = *layout;
                        let (channels, positions) = (layout.channels(), layout.positions());
                        if nodes[beta].needs_grad {
                            let g = buf(&mut cot, beta, nodes[beta].data.len());
                            for c in 0..channels {
                                for p in 0..positions {
                                    g[c] += dy[layout.index(c, p)];
                                }
                            }
                        }
                        if nodes[gamma].needs_grad {
                            let g = buf(&mut cot, gamma, nodes[gamma].data.len());
                            for c in 0..channels {
                                for p in 0..positions {
                                    let i2 = layout.index(c, p);
                                    g[c] += dy[i2] * xhat[i2];
                                }
                            }
                        }
                        if nodes[x].needs_grad {
                            let gamma_data = &nodes[gamma].data;
                            let g = buf(&mut cot, x, nodes[x].data.len());
                            for c in 0..channels {
                                let k = gamma_data[c] * scale[c];
                                for p in 0..positions {
                                    let i2 = layout.index(c, p);
                                    g[i2] += dy[i2] * k;
                                }
                            }
                        }
                    }
                    Rule::Sum { a } => {
                        let a = *a;
                        if nodes[a].needs_grad {
                            let d = dy[0];
                            let g = buf(&mut cot, a, nodes[a].data.len());
                            for v in g.iter_mut() {
                                *v += d;
                            }
                        }
                    }
                    Rule::SliceRows { a, r0, cols } => {
                        let (a, r0, cols) = (*a, *r0, *cols);
                        if nodes[a].needs_grad {
                            let g = buf(&mut cot, a, nodes[a].data.len());
                            for (i, d) in dy.iter().enumerate() {
                                g[r0 * cols + i] += d;
                            }
                        }
                    }
                    Rule::ConcatRows { a, b, rows_a, cols } => {
                        let (a, b, rows_a, cols) = (*a, *b, *rows_a, *cols);
                        let split = rows_a * cols;
                        if nodes[a].needs_grad {
                            let g = buf(&mut cot, a, nodes[a].data.len());
                            for (i, d) in dy[..split].iter().enumerate() {
                                g[i] += d;
                            }
                        }
                        if nodes[b].needs_grad {
                            let g = buf(&mut cot, b, nodes[b].data.len());
                            for (i, d) in dy[split..].iter().enumerate() {
                                g[i] += d;
                            }
                        }
                    }
                    Rule::Transpose { a, rows, cols } => {
                        let (a, rows, cols) = (*a, *rows, *cols);
                        if nodes[a].needs_grad {
                            let g = buf(&mut cot, a, nodes[a].data.len());
                            for i in 0..rows {
                                for j in 0..cols {
                                    g[i * cols + j] += dy[j * rows + i];
                                }
                            }
                        }
                    }
                    Rule::Reshape { a } => {
                        let a = *a;
                        if nodes[a].needs_grad {
                            let g = buf(&mut cot, a, nodes[a].data.len());
                            for (i, d) in dy.iter().enumerate() {
                                g[i] += d;
                            }
                        }
                    }
                    Rule::Crop { a, src_cols, rows, cols } => {
                        let (a, src_cols, rows, cols) = (*a, *src_cols, *rows, *cols);
                        if nodes[a].needs_grad {
                            let g = buf(&mut cot, a, nodes[a].data.len());
                            for i in 0..rows {
                                for j in 0..cols {
                                    g[i * src_cols + j] += dy[i * cols + j];
                                }
                            }
                        }
                    }
                }
            }
        }

        for (node, c) in self.nodes.iter_mut().zip(cot) {
            if let Some(c) = c {
                let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                for (gi, ci) in g.iter_mut().zip(c) {
                    *gi += ci;
                }
            }
        }
        Ok(())
    }
}
