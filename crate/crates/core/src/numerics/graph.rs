use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a recorded 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let [h, w, cin] = [input[0], input[1], input[2]];
        let [kh, kw, kcin, cout] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        if kcin != cin {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if stride == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d needs odd kernel sizes and stride >= 1, got {kh}x{kw} stride {stride}"
            )));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        // Windows may leave trailing padding unused, never real input pixels.
        if span_h < kh || span_w < kw || (span_h - kh) % stride > pad || (span_w - kw) % stride > pad
        {
            return Err(Error::Config(format!(
                "conv2d output size is not integral for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {pad}"
            )));
        }
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap of every
    /// output pixel. Column index is `(pixel, ky, kx, ci)` row-major.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = (oy * self.wo + ox) * patch;
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let col = row + (ky * self.kw + kx) * self.cin;
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        for ci in 0..self.cin {
                            f(col + ci, src + ci);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    AddBias { a: Var, b: Var, cols: usize },
    Mul { a: Var, b: Var },
    MulBcast { a: Var, v: Var, cols: usize },
    Scale { a: Var, s: T },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, k: Var, bias: Var, geom: ConvGeom, col: Vec<T> },
    Upsample2x { a: Var, h: usize, w: usize, c: usize },
    AvgPool2x2 { a: Var, w: usize, c: usize },
    ConcatLast { parts: Vec<(Var, usize)>, rows: usize },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    SliceCols { a: Var, start: usize, end: usize, cols: usize },
    SliceRows { a: Var, offset: usize },
    GatherRows { table: Var, ids: Vec<usize>, cols: usize },
    MeanRows { a: Var, rows: usize, cols: usize },
    SumAll { a: Var },
    BceLogits { a: Var, target: Vec<T> },
    BceProbs { a: Var, target: Vec<T>, eps: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::MulBcast { .. } => "mul_bcast",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x { .. } => "upsample2x",
            Op::AvgPool2x2 { .. } => "avgpool2x2",
            Op::ConcatLast { .. } => "concat_last",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Reshape { .. } => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::MeanRows { .. } => "mean_rows",
            Op::SumAll { .. } => "sum_all",
            Op::BceLogits { .. } => "bce_logits",
            Op::BceProbs { .. } => "bce_probs",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::MatMulNt { a, b, .. }
            | Op::Add { a, b }
            | Op::AddBias { a, b, .. }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::MulBcast { a, v, .. } => vec![*a, *v],
            Op::Transpose { a, .. }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Sigmoid { a }
            | Op::Softmax { a, .. }
            | Op::Upsample2x { a, .. }
            | Op::AvgPool2x2 { a, .. }
            | Op::Reshape { a }
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::MeanRows { a, .. }
            | Op::SumAll { a }
            | Op::BceLogits { a, .. }
            | Op::BceProbs { a, .. } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, k, bias, .. } => vec![*x, *k, *bias],
            Op::ConcatLast { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::ConcatRows { parts } => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Gradient tape. Every forward primitive evaluates eagerly and records the
/// activations its backward pass needs; nodes are appended in topological
/// order so reverse iteration is a valid backward schedule.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// First node holding a NaN or infinity, described by index and op kind.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| format!("node #{i} ({}, shape {:?})", n.op.name(), n.value.shape()))
    }

    /// Activation pattern of every ReLU on the tape (`true` where the input
    /// is positive). Two evaluations with equal patterns lie on the same
    /// smooth piece of the network function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => Some(a),
                _ => None,
            })
            .flat_map(|a| self.data(a).iter().map(|&x| x > T::zero()))
            .collect()
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn rank3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(Error::invalid(op, format!("expected an H×W×C map, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul_nt", a)?;
        let (n, k2) = self.rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), false, self.data(b), true, &mut out, false);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rank2("transpose", a)?;
        let x = self.data(a);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        Ok(self.push(Tensor::new(&[cols, rows], out)?, Op::Transpose { a, rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add { a, b }))
    }

    /// Adds `b` (one value per trailing-axis column) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(b).numel() != cols {
            return Err(Error::shape("add_bias", self.shape(a), self.shape(b)));
        }
        let bias = self.data(b);
        let out = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias { a, b, cols }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul { a, b }))
    }

    /// Multiplies every trailing-axis row of `a` elementwise by `v`.
    pub fn mul_bcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(v).numel() != cols {
            return Err(Error::shape("mul_bcast", self.shape(a), self.shape(v)));
        }
        let gate = self.data(v);
        let out = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(gate).map(|(&x, &y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::MulBcast { a, v, cols }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale { a, s }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Relu { a }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sigmoid { a }))
    }

    /// Softmax over the trailing axis. `mask`, when given, has one entry per
    /// element of `a`; masked entries get exactly zero probability. A row with
    /// no unmasked entry is an input error.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let cols = self.value(a).cols();
        let x = self.data(a);
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(Error::invalid(
                    "softmax",
                    format!("mask has {} entries for {} values", m.len(), x.len()),
                ));
            }
        }
        let mut out = vec![T::zero(); x.len()];
        for (r, (row, dst)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Input(format!("softmax row {r} has every position masked")));
            }
            let mut sum = T::zero();
            for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if keep(j) {
                    *d = (v - max).exp();
                    sum += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a, cols }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let n = T::lit(cols as f64);
        let (g, b) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / cols;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..cols {
                let h = (row[j] - mean) * s;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gamma, beta, cols, xhat, rstd }))
    }

    /// Cross-correlation of an `[H, W, Cin]` map with a `[kh, kw, Cin, Cout]`
    /// kernel plus a per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad)?;
        if self.value(bias).numel() != geom.cout {
            return Err(Error::shape("conv2d", self.shape(k), self.shape(bias)));
        }
        let pixels = geom.ho * geom.wo;
        let mut col = vec![T::zero(); pixels * geom.patch()];
        let src = self.data(x);
        geom.for_each_tap(|c, s| col[c] = src[s]);
        let b = self.data(bias);
        let mut out: Vec<T> = (0..pixels).flat_map(|_| b.iter().copied()).collect();
        T::gemm(pixels, geom.patch(), geom.cout, &col, false, self.data(k), false, &mut out, true);
        Ok(self.push(
            Tensor::new(&[geom.ho, geom.wo, geom.cout], out)?,
            Op::Conv2d { x, k, bias, geom, col },
        ))
    }

    /// Nearest-neighbour 2× upsampling of an `[H, W, C]` map.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = self.rank3("upsample2x", a)?;
        let src = self.data(a);
        let mut out = vec![T::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let s = ((y / 2) * w + x / 2) * c;
                let d = (y * 2 * w + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        Ok(self.push(Tensor::new(&[2 * h, 2 * w, c], out)?, Op::Upsample2x { a, h, w, c }))
    }

    /// Mean over non-overlapping 2×2 windows with stride 2.
    pub fn avgpool2x2(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = self.rank3("avgpool2x2", a)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("avgpool2x2", format!("spatial size {h}x{w} is not even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(a);
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); ho * wo * c];
        for y in 0..ho {
            for x in 0..wo {
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                    let s = at(2 * y, 2 * x)
                        + at(2 * y, 2 * x + 1)
                        + at(2 * y + 1, 2 * x)
                        + at(2 * y + 1, 2 * x + 1);
                    out[(y * wo + x) * c + ch] = s * quarter;
                }
            }
        }
        Ok(self.push(Tensor::new(&[ho, wo, c], out)?, Op::AvgPool2x2 { a, w, c }))
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_last", "no inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
        }
        let rows = self.value(first).rows();
        let widths: Vec<(Var, usize)> = parts.iter().map(|&p| (p, self.value(p).cols())).collect();
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatLast { parts: widths, rows }))
    }

    /// Concatenation of matrices along the leading (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, cols) = self.rank2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rank2("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
        }
        let out: Vec<T> = parts.iter().flat_map(|&p| self.data(p).iter().copied()).collect();
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.rank2("slice_cols", a)?;
        if start >= end || end > cols {
            return Err(Error::invalid("slice_cols", format!("range {start}..{end} of {cols} columns")));
        }
        let out = self.data(a).chunks(cols).flat_map(|r| r[start..end].iter().copied()).collect();
        Ok(self.push(Tensor::new(&[rows, end - start], out)?, Op::SliceCols { a, start, end, cols }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.rank2("slice_rows", a)?;
        if start >= end || end > rows {
            return Err(Error::invalid("slice_rows", format!("range {start}..{end} of {rows} rows")));
        }
        let out = self.data(a)[start * cols..end * cols].to_vec();
        Ok(self.push(Tensor::new(&[end - start, cols], out)?, Op::SliceRows { a, offset: start * cols }))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rank2("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("id {bad} out of range for table with {rows} rows")));
        }
        let t = self.data(table);
        let out = ids.iter().flat_map(|&i| t[i * cols..(i + 1) * cols].iter().copied()).collect();
        Ok(self.push(
            Tensor::new(&[ids.len(), cols], out)?,
            Op::GatherRows { table, ids: ids.to_vec(), cols },
        ))
    }

    /// Mean over rows of a matrix, giving `[1, C]`. Rows are summed in order
    /// and the total divided by the row count.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rank2("mean_rows", a)?;
        let mut acc = vec![T::zero(); cols];
        for row in self.data(a).chunks(cols) {
            for (s, &v) in acc.iter_mut().zip(row) {
                *s += v;
            }
        }
        let n = T::lit(rows as f64);
        let out = acc.into_iter().map(|s| s / n).collect();
        Ok(self.push(Tensor::new(&[1, cols], out)?, Op::MeanRows { a, rows, cols }))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }))
    }

    /// Mean binary cross-entropy of `sigmoid(a)` against `target`, computed
    /// as `max(x,0) - x·z + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, a: Var, target: &[T]) -> Result<Var> {
        let x = self.data(a);
        if x.len() != target.len() {
            return Err(Error::shape("bce_with_logits", self.shape(a), &[target.len()]));
        }
        let n = T::lit(x.len() as f64);
        let total: T = x.iter().zip(target).map(|(&x, &z)| bce_logit_term(x, z)).sum();
        Ok(self.push(Tensor::scalar(total / n), Op::BceLogits { a, target: target.to_vec() }))
    }

    /// Mean binary cross-entropy of probabilities `a` (clamped into
    /// `[eps, 1-eps]`) against `target`.
    pub fn bce_with_probs(&mut self, a: Var, target: &[T], eps: f64) -> Result<Var> {
        let p = self.data(a);
        if p.len() != target.len() {
            return Err(Error::shape("bce_with_probs", self.shape(a), &[target.len()]));
        }
        let eps = T::lit(eps);
        let n = T::lit(p.len() as f64);
        let total: T = p
            .iter()
            .zip(target)
            .map(|(&p, &z)| {
                let p = p.max(eps).min(T::one() - eps);
                -(z * p.ln() + (T::one() - z) * (T::one() - p).ln())
            })
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::BceProbs { a, target: target.to_vec(), eps }))
    }

    /// Reverse sweep from the scalar `loss`. A graph can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                grads[i] = Some(gy);
                continue;
            }
            if node.op.inputs().iter().any(|v| v.0 >= i) {
                return Err(Error::Internal(format!("cyclic tape at node #{i}")));
            }
            backprop(nodes, &mut grads, &node.op, &node.value, &gy);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn bce_logit_term<T: Scalar>(x: T, z: T) -> T {
    x.max(T::zero()) - x * z + (-x.abs()).exp().ln_1p()
}

fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]))
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    op: &Op<T>,
    y: &Tensor<T>,
    gy: &[T],
) {
    let val = |v: Var| nodes[v.0].value.data();
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                T::gemm(*m, *n, *k, gy, false, val(*b), true, ga, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                T::gemm(*k, *m, *n, val(*a), true, gy, false, gb, true);
            }
        }
        Op::MatMulNt { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                T::gemm(*m, *n, *k, gy, false, val(*b), false, ga, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                T::gemm(*n, *m, *k, gy, true, val(*a), false, gb, true);
            }
        }
        Op::Transpose { a, rows, cols } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        ga[r * cols + c] += gy[c * rows + r];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(g) = slot(nodes, grads, v) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
        }
        Op::AddBias { a, b, cols } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for row in gy.chunks(*cols) {
                    gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                }
            }
        }
        Op::Mul { a, b } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, &d), &o) in ga.iter_mut().zip(gy).zip(val(*b)) {
                    *g += d * o;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((g, &d), &o) in gb.iter_mut().zip(gy).zip(val(*a)) {
                    *g += d * o;
                }
            }
        }
        Op::MulBcast { a, v, cols } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let gate = val(*v);
                for (grow, drow) in ga.chunks_mut(*cols).zip(gy.chunks(*cols)) {
                    for ((g, &d), &s) in grow.iter_mut().zip(drow).zip(gate) {
                        *g += d * s;
                    }
                }
            }
            if let Some(gv) = slot(nodes, grads, *v) {
                for (drow, xrow) in gy.chunks(*cols).zip(val(*a).chunks(*cols)) {
                    for ((g, &d), &x) in gv.iter_mut().zip(drow).zip(xrow) {
                        *g += d * x;
                    }
                }
            }
        }
        Op::Scale { a, s } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *s);
            }
        }
        Op::Relu { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, &d), &x) in ga.iter_mut().zip(gy).zip(val(*a)) {
                    if x > T::zero() {
                        *g += d;
                    }
                }
            }
        }
        Op::Sigmoid { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((g, &d), &s) in ga.iter_mut().zip(gy).zip(y.data()) {
                    *g += d * s * (T::one() - s);
                }
            }
        }
        Op::Softmax { a, cols } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((grow, drow), yrow) in
                    ga.chunks_mut(*cols).zip(gy.chunks(*cols)).zip(y.data().chunks(*cols))
                {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                    for ((g, &d), &p) in grow.iter_mut().zip(drow).zip(yrow) {
                        *g += p * (d - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, cols, xhat, rstd } => {
            let c = *cols;
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (drow, hrow) in gy.chunks(c).zip(xhat.chunks(c)) {
                    for ((g, &d), &h) in gg.iter_mut().zip(drow).zip(hrow) {
                        *g += d * h;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for drow in gy.chunks(c) {
                    gb.iter_mut().zip(drow).for_each(|(g, &d)| *g += d);
                }
            }
            let gamma_v = val(*gamma);
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = T::lit(c as f64);
                for (r, ((grow, drow), hrow)) in
                    gx.chunks_mut(c).zip(gy.chunks(c)).zip(xhat.chunks(c)).enumerate()
                {
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for j in 0..c {
                        let dh = drow[j] * gamma_v[j];
                        sum_d += dh;
                        sum_dh += dh * hrow[j];
                    }
                    let s = rstd[r] / n;
                    for j in 0..c {
                        let dh = drow[j] * gamma_v[j];
                        grow[j] += s * (n * dh - sum_d - hrow[j] * sum_dh);
                    }
                }
            }
        }
        Op::Conv2d { x, k, bias, geom, col } => {
            let pixels = geom.ho * geom.wo;
            let patch = geom.patch();
            if let Some(gk) = slot(nodes, grads, *k) {
                T::gemm(patch, pixels, geom.cout, col, true, gy, false, gk, true);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in gy.chunks(geom.cout) {
                    gb.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                }
            }
            if nodes[x.0].needs_grad {
                let mut dcol = vec![T::zero(); pixels * patch];
                T::gemm(pixels, geom.cout, patch, gy, false, val(*k), true, &mut dcol, false);
                if let Some(gx) = slot(nodes, grads, *x) {
                    geom.for_each_tap(|c, s| gx[s] += dcol[c]);
                }
            }
        }
        Op::Upsample2x { a, h, w, c } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let (h, w, c) = (*h, *w, *c);
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        let s = ((yy / 2) * w + xx / 2) * c;
                        let d = (yy * 2 * w + xx) * c;
                        for ch in 0..c {
                            ga[s + ch] += gy[d + ch];
                        }
                    }
                }
            }
        }
        Op::AvgPool2x2 { a, w, c } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let (w, c) = (*w, *c);
                let wo = w / 2;
                let quarter = T::lit(0.25);
                for (i, &d) in gy.iter().enumerate() {
                    let ch = i % c;
                    let px = i / c;
                    let (oy, ox) = (px / wo, px % wo);
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        ga[((2 * oy + dy) * w + 2 * ox + dx) * c + ch] += d * quarter;
                    }
                }
            }
        }
        Op::ConcatLast { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, w) in parts {
                if let Some(gp) = slot(nodes, grads, p) {
                    for r in 0..*rows {
                        let src = &gy[r * total + offset..r * total + offset + w];
                        gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                if let Some(gp) = slot(nodes, grads, p) {
                    gp.iter_mut().zip(&gy[offset..offset + len]).for_each(|(g, &d)| *g += d);
                }
                offset += len;
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            }
        }
        Op::SliceCols { a, start, end, cols } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let w = end - start;
                for (grow, drow) in ga.chunks_mut(*cols).zip(gy.chunks(w)) {
                    grow[*start..*end].iter_mut().zip(drow).for_each(|(g, &d)| *g += d);
                }
            }
        }
        Op::SliceRows { a, offset } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga[*offset..*offset + gy.len()].iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            }
        }
        Op::GatherRows { table, ids, cols } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let src = &gy[r * cols..(r + 1) * cols];
                    gt[id * cols..(id + 1) * cols].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                }
            }
        }
        Op::MeanRows { a, rows, cols } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let n = T::lit(*rows as f64);
                for grow in ga.chunks_mut(*cols) {
                    grow.iter_mut().zip(gy).for_each(|(g, &d)| *g += d / n);
                }
            }
        }
        Op::SumAll { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|g| *g += gy[0]);
            }
        }
        Op::BceLogits { a, target } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let scale = gy[0] / T::lit(target.len() as f64);
                for ((g, &x), &z) in ga.iter_mut().zip(val(*a)).zip(target) {
                    *g += (sigmoid(x) - z) * scale;
                }
            }
        }
        Op::BceProbs { a, target, eps } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let scale = gy[0] / T::lit(target.len() as f64);
                for ((g, &p), &z) in ga.iter_mut().zip(val(*a)).zip(target) {
                    if p <= *eps || p >= T::one() - *eps {
                        continue;
                    }
                    *g += (-z / p + (T::one() - z) / (T::one() - p)) * scale;
                }
            }
        }
    }
}
