//! Reverse-mode differentiation over a recorded sequence of primitives.
//!
//! A [`Tape`] is an append-only list of nodes. Every primitive reads nodes that
//! already exist, so the list is always in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use aat::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![3.0]), true);
//! let y = tape.mul(x, x).unwrap();
//! let s = tape.sum(y).unwrap();
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.get(x).data(), &[6.0]);
//! ```
//!
//! Subgradient conventions: `relu'(0) = 0`, and max-style reductions route the
//! gradient to the first maximal element in scan order.

use std::borrow::Cow;

use super::gemm::{gemm, Mat};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, pad: usize },
    MaxPool2 { input: Var, argmax: Vec<usize>, gap: f64 },
    Relu(Var),
    AddBias(Var, Var),
    Sigmoid(Var),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Max { input: Var, index: usize, gap: f64 },
    RowMax { input: Var, argmax: Vec<usize>, gap: f64 },
    Gather { input: Var, index: Vec<usize> },
    ConcatCols { left: Var, right: Var, left_cols: usize, right_cols: usize },
    RowSumSq(Var),
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation record. Borrowed leaves (see [`Tape::leaf_ref`]) let model
/// parameters participate without being copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

/// Binary cross-entropy of a logit against a target in [0, 1], in log-sum-exp form.
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

fn im2col(
    src: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = oy as isize + i as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = ox as isize + j as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    (ho, wo): (usize, usize),
    dst: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = oy as isize + i as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = ox as isize + j as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

fn conv_geom(x: &[usize], k: &[usize], pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || k.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected 4-D input and weight, got {x:?} and {k:?}"),
        ));
    }
    if x[1] != k[1] {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels but weight expects {}", x[1], k[1]),
        ));
    }
    let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
        ));
    }
    Ok(ConvGeom {
        n: x[0],
        c_in: x[1],
        h,
        w,
        c_out: k[0],
        kh,
        kw,
        ho: h + 2 * pad - kh + 1,
        wo: w + 2 * pad - kw + 1,
    })
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, format!("expected a 2-D tensor, got {shape:?}"))),
    }
}

/// Rows and columns of a per-sample logit block: `[n, k]`, or `[n]` as `[n, 1]`.
fn column_block(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((n, 1)),
        [n, k] => Ok((n, k)),
        _ => Err(Error::shape(op, format!("expected [n] or [n, k], got {shape:?}"))),
    }
}

impl<'a> Tape<'a> {
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
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that borrows its value for the lifetime of the tape.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance from a non-differentiable switch among nodes that
    /// require gradients: `|input|` for relu, the gap between the winner and
    /// the runner-up for max-style reductions. Infinite when there is none.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad)
            .map(|n| match &n.op {
                Op::Relu(x) => self.value(*x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
                Op::MaxPool2 { gap, .. } | Op::Max { gap, .. } | Op::RowMax { gap, .. } => *gap,
                _ => f64::INFINITY,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a).shape())?;
        let (k2, n) = matrix_dims("matmul", self.value(b).shape())?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            Mat::row_major(self.value(a).data(), m, k),
            Mat::row_major(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Stride-1 2-D convolution of `[n, c_in, h, w]` with `[c_out, c_in, kh, kw]`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, pad: usize) -> Result<Var> {
        let g = conv_geom(self.value(input).shape(), self.value(weight).shape(), pad)?;
        let hw = g.ho * g.wo;
        let ckk = g.ckk();
        let mut out = vec![0.0; g.n * g.c_out * hw];
        let mut cols = vec![0.0; ckk * hw];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        for s in 0..g.n {
            let src = &x[s * g.c_in * g.h * g.w..(s + 1) * g.c_in * g.h * g.w];
            im2col(src, (g.c_in, g.h, g.w), (g.kh, g.kw), pad, (g.ho, g.wo), &mut cols);
            gemm(
                1.0,
                Mat::row_major(wt, g.c_out, ckk),
                Mat::row_major(&cols, ckk, hw),
                0.0,
                &mut out[s * g.c_out * hw..(s + 1) * g.c_out * hw],
            );
        }
        let rg = self.rg(&[input, weight]);
        let value = Tensor::new(vec![g.n, g.c_out, g.ho, g.wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, pad }, rg))
    }

    /// 2×2 max-pool with stride 2 over `[n, c, h, w]`, `h` and `w` even.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::shape(
                "max_pool2",
                format!("expected a 4-D input, got {shape:?}"),
            ));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2",
                format!("spatial dimensions {h}x{w} must be even"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let mut gap = f64::INFINITY;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if idx != best {
                            gap = gap.min(x[best] - x[idx]);
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[input]);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax, gap }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sigmoid(x), rg))
    }

    /// Adds `bias[c]` to every entry whose dimension-1 index is `c`
    /// (row bias for `[n, c]`, channel bias for `[n, c, h, w]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let b = self.value(bias);
        if shape.len() < 2 || b.shape() != [shape[1]] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not fit input {shape:?}", b.shape()),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let bd = b.data().to_vec();
        let mut value = self.value(x).clone();
        for (chunk_idx, chunk) in value.data_mut().chunks_mut(inner).enumerate() {
            let add = bd[chunk_idx % shape[1]];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Per-row softmax cross-entropy of `[n, k]` logits: returns `[n]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = matrix_dims("softmax_cross_entropy", self.value(logits).shape())?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows of {k} classes", labels.len()),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            out.push(lse - row[labels[r]]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::vector(out),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Per-sample binary cross-entropy from logits (`[n]` or `[n, 1]`): returns `[n]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (n, k) = column_block("bce_with_logits", self.value(logits).shape())?;
        if k != 1 || targets.len() != n {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} targets for logits of shape {:?}", targets.len(), self.value(logits).shape()),
            ));
        }
        let out = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| bce_with_logit(z, t))
            .collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::vector(out),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Scale(x, c), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|e| e + c);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::AddScalar(x), rg))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", self.value(x).shape(), c.shape()),
            ));
        }
        let v = self.value(x).zip_map(c, |a, b| a * b)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MulConst(x, c.data().to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "mean of an empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Global maximum; gradient flows to the first maximal entry.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("max", "max of an empty tensor"));
        }
        let mut index = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if v > t.data()[index] {
                index = i;
            }
        }
        let m = t.data()[index];
        let gap = t
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != index)
            .map(|(_, &v)| m - v)
            .fold(f64::INFINITY, f64::min);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Max { input: x, index, gap }, rg))
    }

    /// Per-row maximum of `[n, k]`, optionally skipping column `exclude[r]` in row `r`.
    pub fn row_max(&mut self, x: Var, exclude: Option<&[usize]>) -> Result<Var> {
        let (n, k) = matrix_dims("row_max", self.value(x).shape())?;
        if let Some(ex) = exclude {
            if ex.len() != n || k < 2 || ex.iter().any(|&e| e >= k) {
                return Err(Error::shape(
                    "row_max",
                    format!("exclusion list of {} entries for [{n}, {k}]", ex.len()),
                ));
            }
        } else if k == 0 {
            return Err(Error::shape("row_max", "zero columns"));
        }
        let z = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        let mut gap = f64::INFINITY;
        for r in 0..n {
            let skip = exclude.map(|e| e[r]);
            let mut best: Option<usize> = None;
            for j in 0..k {
                if Some(j) == skip {
                    continue;
                }
                if best.map_or(true, |b| z[r * k + j] > z[r * k + b]) {
                    best = Some(j);
                }
            }
            let b = best.expect("at least one column");
            for j in (0..k).filter(|&j| j != b && Some(j) != skip) {
                gap = gap.min(z[r * k + b] - z[r * k + j]);
            }
            out.push(z[r * k + b]);
            argmax.push(r * k + b);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::RowMax { input: x, argmax, gap }, rg))
    }

    /// Picks `x[r, index[r]]` from `[n, k]`: returns `[n]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, k) = matrix_dims("gather", self.value(x).shape())?;
        if index.len() != n || index.iter().any(|&i| i >= k) {
            return Err(Error::shape(
                "gather",
                format!("{} indices for [{n}, {k}]", index.len()),
            ));
        }
        let z = self.value(x).data();
        let flat: Vec<usize> = index.iter().enumerate().map(|(r, &i)| r * k + i).collect();
        let out = flat.iter().map(|&f| z[f]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Gather { input: x, index: flat }, rg))
    }

    /// Column-wise concatenation; `[n]` operands count as `[n, 1]`.
    pub fn concat_cols(&mut self, left: Var, right: Var) -> Result<Var> {
        let (n, p) = column_block("concat_cols", self.value(left).shape())?;
        let (n2, q) = column_block("concat_cols", self.value(right).shape())?;
        if n != n2 {
            return Err(Error::shape("concat_cols", format!("{n} rows vs {n2} rows")));
        }
        let (a, b) = (self.value(left).data(), self.value(right).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&a[r * p..(r + 1) * p]);
            out.extend_from_slice(&b[r * q..(r + 1) * q]);
        }
        let rg = self.rg(&[left, right]);
        let value = Tensor::new(vec![n, p + q], out)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                left,
                right,
                left_cols: p,
                right_cols: q,
            },
            rg,
        ))
    }

    /// Squared L2 norm of each leading-dimension entry: returns `[n]`.
    pub fn row_sum_sq(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().is_empty() {
            return Err(Error::shape("row_sum_sq", "scalar input"));
        }
        let out = (0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v * v).sum())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::RowSumSq(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Propagates d(output)/d(node) to every node that requires a gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::NonScalar(out.shape().to_vec()));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<'_>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        // Accumulates into the gradient slot of `v` if it requires one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims("matmul", self.value(*a).shape())?;
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |da| {
                    gemm(1.0, Mat::row_major(gd, m, n), Mat::row_major(bv, k, n).t(), 1.0, da)
                });
                acc(*b, &mut |db| {
                    gemm(1.0, Mat::row_major(av, m, k).t(), Mat::row_major(gd, m, n), 1.0, db)
                });
            }
            Op::Conv2d { input, weight, pad } => {
                let geo = conv_geom(self.value(*input).shape(), self.value(*weight).shape(), *pad)?;
                let hw = geo.ho * geo.wo;
                let ckk = geo.ckk();
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let plane = geo.c_in * geo.h * geo.w;
                let mut cols = vec![0.0; ckk * hw];
                acc(*weight, &mut |dw| {
                    for s in 0..geo.n {
                        im2col(
                            &x[s * plane..(s + 1) * plane],
                            (geo.c_in, geo.h, geo.w),
                            (geo.kh, geo.kw),
                            *pad,
                            (geo.ho, geo.wo),
                            &mut cols,
                        );
                        gemm(
                            1.0,
                            Mat::row_major(&gd[s * geo.c_out * hw..(s + 1) * geo.c_out * hw], geo.c_out, hw),
                            Mat::row_major(&cols, ckk, hw).t(),
                            1.0,
                            dw,
                        );
                    }
                });
                acc(*input, &mut |dx| {
                    for s in 0..geo.n {
                        gemm(
                            1.0,
                            Mat::row_major(wt, geo.c_out, ckk).t(),
                            Mat::row_major(&gd[s * geo.c_out * hw..(s + 1) * geo.c_out * hw], geo.c_out, hw),
                            0.0,
                            &mut cols,
                        );
                        col2im_add(
                            &cols,
                            (geo.c_in, geo.h, geo.w),
                            (geo.kh, geo.kw),
                            *pad,
                            (geo.ho, geo.wo),
                            &mut dx[s * plane..(s + 1) * plane],
                        );
                    }
                });
            }
            Op::MaxPool2 { input, argmax, .. } => acc(*input, &mut |dx| {
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
            }),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > 0.0 {
                            dx[i] += gd[i];
                        }
                    }
                })
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                })
            }
            Op::AddBias(x, b) => {
                let shape = self.value(*x).shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                acc(*x, &mut |dx| dx.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                acc(*b, &mut |db| {
                    for (chunk_idx, chunk) in gd.chunks(inner).enumerate() {
                        db[chunk_idx % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let k = probs.len() / labels.len().max(1);
                acc(*logits, &mut |dz| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dz[r * k + j] += gd[r] * (probs[r * k + j] - onehot);
                        }
                    }
                })
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits).data();
                acc(*logits, &mut |dz| {
                    for i in 0..dz.len() {
                        dz[i] += gd[i] * (sigmoid(z[i]) - targets[i]);
                    }
                })
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += c * g)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(gd).for_each(|(d, g)| *d += g))
            }
            Op::MulConst(x, c) => acc(*x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * c[i];
                }
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += gd[0])),
            Op::Mean(x) => acc(*x, &mut |d| {
                let s = gd[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s)
            }),
            Op::Max { input, index, .. } => acc(*input, &mut |d| d[*index] += gd[0]),
            Op::RowMax { input, argmax: index, .. } | Op::Gather { input, index } => {
                acc(*input, &mut |d| {
                    for (r, &f) in index.iter().enumerate() {
                        d[f] += gd[r];
                    }
                })
            }
            Op::ConcatCols {
                left,
                right,
                left_cols: p,
                right_cols: q,
            } => {
                let w = p + q;
                acc(*left, &mut |d| {
                    for r in 0..d.len() / p {
                        for j in 0..*p {
                            d[r * p + j] += gd[r * w + j];
                        }
                    }
                });
                acc(*right, &mut |d| {
                    for r in 0..d.len() / q {
                        for j in 0..*q {
                            d[r * q + j] += gd[r * w + p + j];
                        }
                    }
                });
            }
            Op::RowSumSq(x) => {
                let xv = self.value(*x);
                let w = xv.row_len();
                let xd = xv.data();
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * xd[i] * gd[i / w];
                    }
                })
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: f64) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![x]), true);
        let y = f(&mut tape, v).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap().get(v).data()[0]
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[
            vec![1.0, -2.0, 3.5],
            vec![0.0, 4.0, -1.0],
            vec![7.0, 8.0, 9.0],
        ])
        .unwrap();
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::identity(3), false);
        let av = tape.leaf(a.clone(), false);
        let p = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(p), &a);
    }

    #[test]
    fn conv_then_pool_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 28, 28]), false);
        let w = tape.leaf(Tensor::zeros(&[32, 1, 5, 5]), false);
        let c = tape.conv2d(x, w, 2).unwrap();
        let p = tape.max_pool2(c).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 32, 14, 14]);
    }

    #[test]
    fn analytic_derivatives() {
        assert_eq!(scalar_grad(|t, x| t.mul(x, x), 3.0), 6.0);
        assert_eq!(scalar_grad(|t, x| t.sigmoid(x), 0.0), 0.25);
        let g = scalar_grad(|t, x| t.bce_with_logits(x, &[1.0]), 0.0);
        assert_eq!(g, -0.5);
        assert_eq!(scalar_grad(|t, x| t.relu(x), 0.0), 0.0);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        assert!(bce_with_logit(800.0, 0.0).is_finite());
        assert!((bce_with_logit(800.0, 0.0) - 800.0).abs() < 1e-9);
        assert!(bce_with_logit(-800.0, 0.0) < 1e-300);
        assert!((bce_with_logit(40.0, 1.0) - (-40f64).exp()).abs() < 1e-25);
    }

    #[test]
    fn shape_errors_name_primitive() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::Shape { op, detail } => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3] x [2, 3]"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let w = tape.leaf(Tensor::zeros(&[4, 2, 3, 3]), false);
        let x = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]), false);
        assert!(matches!(tape.conv2d(x, w, 1), Err(Error::Shape { op: "conv2d", .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalar(_))));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let unused = tape.leaf(Tensor::vector(vec![5.0, 6.0, 7.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.get(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn max_pool_routes_ties_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap(), true);
        let p = tape.max_pool2(x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn row_max_excluding_label() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![5.0, 2.0, 7.0], vec![5.0, 2.0, 7.0]]).unwrap(), true);
        let m = tape.row_max(x, Some(&[2, 0])).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 7.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
