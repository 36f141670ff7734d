//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Image tensors use NHWC layout; matrices are `[rows, cols]`.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial geometry of a square-kernel convolution over NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar { x: Var, s: Var },
    MulConst { x: Var, c: Tensor },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    SumAll(Var),
    SumRows(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    RowNormalize { x: Var, norms: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Array2<f64> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Vec<f64>, batch_stats: bool },
    SoftCrossEntropy { logits: Var, targets: Var, probs: Array2<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter or a value under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        debug_assert_eq!(t.len(), 1);
        t.iter().copied().next().unwrap_or(f64::NAN)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("expected matrices, got {sa:?} and {sb:?}")));
        }
        let inner_b = if trans_b { sb[1] } else { sb[0] };
        if sa[1] != inner_b {
            return Err(shape_err("matmul", format!("inner dimensions differ: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let out = if trans_b { av.dot(&bv.t()) } else { av.dot(&bv) };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out.into_dyn(), Op::MatMul { a, b, trans_b }, rg))
    }

    /// `x[r, c] + bias[c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let b = self.value(bias).view().into_dimensionality::<ndarray::Ix1>().expect("rank-1");
        let out = &as2(self.value(x)) + &b;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out.into_dyn(), Op::AddBias { x, bias }, rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every entry of `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.scalar(s);
        let out = self.value(x) * sv;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::MulScalar { x, s }, rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let out = self.value(x) * &c;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst { x, c }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x) * k;
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x) + k;
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::ln);
        let rg = self.rg(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Recip(x), rg)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(ArrayD::from_elem(IxDyn(&[]), total), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[r, c] -> [r]` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(shape_err("sum_rows", format!("expected a matrix, got {:?}", self.shape(x))));
        }
        let out = self.value(x).sum_axis(Axis(1));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SumRows(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| shape_err("reshape", e.to_string()))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {s:?}", start + len)));
        }
        let out = as2(self.value(x)).slice(ndarray::s![start..start + len, ..]).to_owned();
        let rg = self.rg(&[x]);
        Ok(self.push(out.into_dyn(), Op::SliceRows { x, start }, rg))
    }

    /// Picks entries by flat (row-major) index into a rank-1 result.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("index {bad} out of {n}")));
        }
        let flat = self.value(x).as_slice().expect("standard layout");
        let out: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Array1::from(out).into_dyn(), Op::Gather { x, idx }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let cols = self.shape(first).get(1).copied().unwrap_or(0);
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(shape_err("concat_rows", format!("part shape {s:?}, expected [_, {cols}]")));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let out = ndarray::concatenate(Axis(0), &views).map_err(|e| shape_err("concat_rows", e.to_string()))?;
        let rg = self.rg(parts);
        Ok(self.push(out.into_dyn(), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(shape_err("row_normalize", format!("expected a matrix, got {:?}", self.shape(x))));
        }
        let xv = as2(self.value(x));
        let norms: Vec<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
        let mut out = xv.to_owned();
        for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
            row /= *n;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out.into_dyn(), Op::RowNormalize { x, norms }, rg))
    }

    /// 2-D convolution. `x` is `[B, H, W, C]`; `w` is `[O, k·k·C]` with
    /// columns ordered `(ky, kx, c)`; the result is `[B, Ho, Wo, O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[1] != geom.kernel * geom.kernel * xs[3] {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}, kernel {}", geom.kernel)));
        }
        if xs[1] + 2 * geom.pad < geom.kernel || xs[2] + 2 * geom.pad < geom.kernel {
            return Err(shape_err("conv2d", format!("input {xs:?} smaller than kernel {}", geom.kernel)));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} filters", self.shape(b), ws[0])));
            }
        }
        let (bsz, h, wd) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (geom.out_size(h), geom.out_size(wd));
        let cols = im2col(self.value(x).as_slice().expect("standard layout"), &xs, geom);
        let mut out = cols.dot(&as2(self.value(w)).t());
        if let Some(b) = b {
            let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().expect("rank-1");
            out += &bv;
        }
        let out = out.into_shape_with_order(IxDyn(&[bsz, ho, wo, ws[0]])).expect("conv output shape");
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// 2×2 max pooling with stride 2 (floor) over NHWC input.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(shape_err("max_pool2", format!("input {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).as_slice().expect("standard layout");
        let mut out = vec![0.0; b * ho * wo * c];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o_base = ((bi * ho + oy) * wo + ox) * c;
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if src[i] > best {
                                    best = src[i];
                                    arg = i;
                                }
                            }
                        }
                        out[o_base + ch] = best;
                        argmax[o_base + ch] = arg;
                    }
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b, ho, wo, c]), out).expect("pool shape");
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// `[B, H, W, C] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input {s:?}")));
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let v = self.value(x).view().into_shape_with_order((b, hw, c)).expect("contiguous");
        let out = v.mean_axis(Axis(1)).expect("non-empty spatial extent");
        let rg = self.rg(&[x]);
        Ok(self.push(out.into_dyn(), Op::GlobalAvgPool(x), rg))
    }

    /// Batch normalization over the last axis. With `stats = None` the batch
    /// statistics are used (training mode) and returned; otherwise the given
    /// running statistics normalize the input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<&BatchStats>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| shape_err("batch_norm", "scalar input".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", format!("input {shape:?}, gamma {:?}", self.shape(gamma))));
        }
        let rows = self.value(x).len() / c;
        let xv = self.value(x).view().into_shape_with_order((rows, c)).expect("contiguous").to_owned();
        let (mean, var, batch_stats) = match stats {
            Some(s) => (s.mean.clone(), s.var.clone(), false),
            None => {
                let mean = xv.mean_axis(Axis(0)).expect("non-empty batch").to_vec();
                let var: Vec<f64> = (0..c)
                    .map(|j| xv.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / rows as f64)
                    .collect();
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv;
        for mut row in xhat.rows_mut() {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).as_slice().expect("standard layout").to_vec();
        let bt = self.value(beta).as_slice().expect("standard layout").to_vec();
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            for j in 0..c {
                row[j] = row[j] * g[j] + bt[j];
            }
        }
        let out = out.into_shape_with_order(IxDyn(&shape)).expect("bn shape");
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, rg);
        Ok((v, batch_stats.then_some(BatchStats { mean, var })))
    }

    /// Mean over rows of `-Σ_c targets · log softmax(logits)`. Targets may be
    /// soft labels and may themselves be differentiable.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (sl, st) = (self.shape(logits).to_vec(), self.shape(targets).to_vec());
        if sl.len() != 2 || sl != st || sl[0] == 0 {
            return Err(shape_err("soft_cross_entropy", format!("logits {sl:?}, targets {st:?}")));
        }
        let z = as2(self.value(logits));
        let t = as2(self.value(targets));
        let mut probs = Array2::zeros(z.raw_dim());
        let mut total = 0.0;
        for ((zr, tr), mut pr) in z.rows().into_iter().zip(t.rows()).zip(probs.rows_mut()) {
            let m = zr.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + zr.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..zr.len() {
                let logp = zr[j] - lse;
                pr[j] = logp.exp();
                total -= tr[j] * logp;
            }
        }
        let out = ArrayD::from_elem(IxDyn(&[]), total / sl[0] as f64);
        let rg = self.rg(&[logits, targets]);
        Ok(self.push(out, Op::SoftCrossEntropy { logits, targets, probs }, rg))
    }

    /// Gradients of the scalar `root` with respect to every differentiable node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => *e += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let gv = as2(g);
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                if self.needs(*a) {
                    let da = if *trans_b { gv.dot(&bv) } else { gv.dot(&bv.t()) };
                    self.acc(grads, *a, da.into_dyn());
                }
                if self.needs(*b) {
                    let db = if *trans_b { gv.t().dot(&av) } else { av.t().dot(&gv) };
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::AddBias { x, bias } => {
                self.acc(grads, *x, g.clone());
                if self.needs(*bias) {
                    self.acc(grads, *bias, g.sum_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::MulScalar { x, s } => {
                if self.needs(*x) {
                    self.acc(grads, *x, g * self.scalar(*s));
                }
                if self.needs(*s) {
                    let ds = (g * self.value(*x)).sum();
                    let shape = self.nodes[s.0].value.raw_dim();
                    self.acc(grads, *s, ArrayD::from_elem(shape, ds));
                }
            }
            Op::MulConst { x, c } => self.acc(grads, *x, g * c),
            Op::Scale(x, k) => self.acc(grads, *x, g * *k),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Relu(x) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                self.acc(grads, *x, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Exp(x) => self.acc(grads, *x, g * &node.value),
            Op::Log(x) => self.acc(grads, *x, g / self.value(*x)),
            Op::Recip(x) => self.acc(grads, *x, -(g * &node.value.mapv(|r| r * r))),
            Op::SumAll(x) => {
                let gs = g.iter().copied().next().unwrap_or(0.0);
                let shape = self.nodes[x.0].value.raw_dim();
                self.acc(grads, *x, ArrayD::from_elem(shape, gs));
            }
            Op::SumRows(x) => {
                let s = self.shape(*x);
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().expect("rank-1");
                let d = gv.insert_axis(Axis(1)).broadcast((s[0], s[1])).expect("broadcast").to_owned();
                self.acc(grads, *x, d.into_dyn());
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                let d = g.clone().into_shape_with_order(IxDyn(&shape)).expect("reshape grad");
                self.acc(grads, *x, d);
            }
            Op::SliceRows { x, start } => {
                let s = self.shape(*x);
                let mut d = Array2::zeros((s[0], s[1]));
                let gv = as2(g);
                d.slice_mut(ndarray::s![*start..*start + gv.nrows(), ..]).assign(&gv);
                self.acc(grads, *x, d.into_dyn());
            }
            Op::Gather { x, idx } => {
                let mut d = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                {
                    let flat = d.as_slice_mut().expect("standard layout");
                    for (k, &i) in idx.iter().enumerate() {
                        flat[i] += g[[k]];
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let gv = as2(g);
                let mut off = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    if self.needs(p) {
                        self.acc(grads, p, gv.slice(ndarray::s![off..off + r, ..]).to_owned().into_dyn());
                    }
                    off += r;
                }
            }
            Op::RowNormalize { x, norms } => {
                let y = as2(&node.value);
                let gv = as2(g);
                let mut d = Array2::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = gv.row(r);
                    let proj = yr.dot(&gr);
                    let mut dr = d.row_mut(r);
                    for j in 0..yr.len() {
                        dr[j] = (gr[j] - yr[j] * proj) / norms[r];
                    }
                }
                self.acc(grads, *x, d.into_dyn());
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let os = node.value.shape();
                let rows = os[0] * os[1] * os[2];
                let g2 = g.view().into_shape_with_order((rows, os[3])).expect("conv grad");
                if self.needs(*w) {
                    self.acc(grads, *w, g2.t().dot(cols).into_dyn());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.acc(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
                if self.needs(*x) {
                    let dcols = g2.dot(&as2(self.value(*w)));
                    let xs = self.shape(*x).to_vec();
                    self.acc(grads, *x, col2im(&dcols, &xs, *geom));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                {
                    let flat = d.as_slice_mut().expect("standard layout");
                    for (gv, &a) in g.iter().zip(argmax) {
                        flat[a] += gv;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[1] * s[2];
                let gv = as2(g);
                let mut d = ndarray::Array3::zeros((s[0], hw, s[3]));
                for bi in 0..s[0] {
                    for p in 0..hw {
                        for ch in 0..s[3] {
                            d[[bi, p, ch]] = gv[[bi, ch]] / hw as f64;
                        }
                    }
                }
                let d = d.into_shape_with_order(IxDyn(&s)).expect("gap grad");
                self.acc(grads, *x, d);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let rows = xhat.nrows();
                let gv = g.view().into_shape_with_order((rows, c)).expect("bn grad");
                let gam = self.value(*gamma).as_slice().expect("standard layout");
                let dbeta = gv.sum_axis(Axis(0));
                let dgamma = (&gv * xhat).sum_axis(Axis(0));
                if self.needs(*x) {
                    let mut dx = Array2::zeros((rows, c));
                    let n = rows as f64;
                    for j in 0..c {
                        if *batch_stats {
                            let k = gam[j] * inv_std[j] / n;
                            for r in 0..rows {
                                dx[[r, j]] = k * (n * gv[[r, j]] - dbeta[j] - xhat[[r, j]] * dgamma[j]);
                            }
                        } else {
                            for r in 0..rows {
                                dx[[r, j]] = gv[[r, j]] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    let shape = self.shape(*x).to_vec();
                    self.acc(grads, *x, dx.into_shape_with_order(IxDyn(&shape)).expect("bn shape"));
                }
                if self.needs(*gamma) {
                    self.acc(grads, *gamma, dgamma.into_dyn());
                }
                if self.needs(*beta) {
                    self.acc(grads, *beta, dbeta.into_dyn());
                }
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let up = g.iter().copied().next().unwrap_or(0.0);
                let t = as2(self.value(*targets));
                let n = t.nrows() as f64;
                if self.needs(*logits) {
                    let mut d = probs.clone();
                    for (mut dr, tr) in d.rows_mut().into_iter().zip(t.rows()) {
                        let mass: f64 = tr.sum();
                        for j in 0..dr.len() {
                            dr[j] = (dr[j] * mass - tr[j]) * up / n;
                        }
                    }
                    self.acc(grads, *logits, d.into_dyn());
                }
                if self.needs(*targets) {
                    let d = probs.mapv(|p| -p.max(f64::MIN_POSITIVE).ln() * up / n);
                    self.acc(grads, *targets, d.into_dyn());
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn im2col(src: &[f64], xs: &[usize], geom: ConvGeom) -> Array2<f64> {
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, st, pad) = (geom.kernel, geom.stride, geom.pad as isize);
    let (ho, wo) = (geom.out_size(h), geom.out_size(w));
    let width = k * k * c;
    let mut cols = vec![0.0; b * ho * wo * width];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * width;
                for ky in 0..k {
                    let iy = (oy * st + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * st + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let d = row + (ky * k + kx) * c;
                        cols[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((b * ho * wo, width), cols).expect("im2col shape")
}

fn col2im(dcols: &Array2<f64>, xs: &[usize], geom: ConvGeom) -> Tensor {
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, st, pad) = (geom.kernel, geom.stride, geom.pad as isize);
    let (ho, wo) = (geom.out_size(h), geom.out_size(w));
    let width = k * k * c;
    let src = dcols.as_slice().expect("standard layout");
    let mut dx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * width;
                for ky in 0..k {
                    let iy = (oy * st + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * st + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let s = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            dx[d + ch] += src[s + ch];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(xs), dx).expect("col2im shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(build(x))/dx for every entry of x.
    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, shape);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).cloned().unwrap_or_else(|| ArrayD::zeros(x0.raw_dim()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(xp);
                let y = build(&mut g, x);
                g.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()) + 1e-7, "entry {i}: fd {fd} vs autodiff {an}");
        }
    }

    #[test]
    fn conv_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = rand_tensor(&mut rng, &[3, 3 * 3 * 2]);
        let b0 = rand_tensor(&mut rng, &[3]);
        check(&[2, 5, 4, 2], 1, move |g, x| {
            let w = g.constant(w0.clone());
            let b = g.constant(b0.clone());
            let y = g.conv2d(x, w, Some(b), ConvGeom { kernel: 3, stride: 1, pad: 1 }).unwrap();
            let y = g.max_pool2(y).unwrap();
            let y = g.global_avg_pool(y).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn conv_weight_gradient_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_tensor(&mut rng, &[2, 6, 6, 3]);
        check(&[4, 27], 2, move |g, w| {
            let x = g.constant(x0.clone());
            let y = g.conv2d(x, w, None, ConvGeom { kernel: 3, stride: 2, pad: 1 }).unwrap();
            let y = g.relu(y);
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn batch_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t0 = rand_tensor(&mut rng, &[5, 3]);
        check(&[5, 3], 6, move |g, x| {
            let gamma = g.constant(ndarray::arr1(&[1.5, 0.5, -1.0]).into_dyn());
            let beta = g.constant(ndarray::arr1(&[0.1, 0.2, 0.3]).into_dyn());
            let (y, _) = g.batch_norm(x, gamma, beta, 1e-5, None).unwrap();
            let t = g.constant(t0.clone());
            let y = g.mul(y, t).unwrap();
            let y = g.exp(y);
            g.sum(y)
        });
    }

    #[test]
    fn matrix_and_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w0 = rand_tensor(&mut rng, &[3, 4]);
        check(&[2, 4], 8, move |g, x| {
            let w = g.constant(w0.clone());
            let y = g.matmul_t(x, w).unwrap();
            let y = g.sigmoid(y);
            let n = g.row_normalize(y).unwrap();
            let s = g.matmul_t(n, n).unwrap();
            let e = g.exp(s);
            let r = g.sum_rows(e).unwrap();
            let l = g.log(r);
            let p = g.gather(s, vec![1, 2]).unwrap();
            let a = g.sum(l);
            let b = g.sum(p);
            let inv = g.recip(b);
            let a2 = g.reshape(a, &[1]).unwrap();
            let y = g.mul_scalar(a2, inv).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn soft_cross_entropy_matches_definition() {
        let mut g = Graph::new();
        let z = g.leaf(ndarray::arr2(&[[0.0, 0.0, 0.0]]).into_dyn());
        let t = g.constant(ndarray::arr2(&[[0.0, 1.0, 0.0]]).into_dyn());
        let l = g.soft_cross_entropy(z, t).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        let d = grads.get(z).unwrap();
        assert!((d[[0, 1]] + 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        assert!(g.backward(a).is_err());
    }
}
