//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough context to
//! replay the chain rule. [`Graph::backward`] walks the tape in reverse and
//! only visits nodes that depend on a tracked leaf.

use std::sync::Arc;

use super::tensor::{axis_split, gemm_nn, gemm_nt, gemm_tn, sigmoid};
use super::{OpCounter, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial geometry of an `im2col` lowering over an `H × W × C` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source offset in the input map for output pixel `o` and patch column `p`.
    fn source(&self, o: usize, p: usize) -> Option<usize> {
        let ow = self.out_width();
        let (oy, ox) = (o / ow, o % ow);
        let c = p % self.channels;
        let kx = (p / self.channels) % self.kernel;
        let ky = p / (self.channels * self.kernel);
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize * self.width + x as usize) * self.channels + c)
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Gather { x: Var, index: Arc<Vec<Option<usize>>> },
    Assemble { parts: Vec<(Var, Arc<Vec<Option<usize>>>)> },
    Sum(Var),
    Mean(Var),
    Sinusoidal { x: Var, freqs: Vec<T> },
    Im2Col { x: Var, geom: ConvGeom },
    Upsample2 { x: Var, height: usize, width: usize, channels: usize },
    FocalLoss { logits: Var, dlogits: Vec<T> },
    MaskedL1 { pred: Var, dpred: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

/// Computation tape over tensors of scalar `T`.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    counter: OpCounter,
    scope: &'static str,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), counter: OpCounter::new(), scope: "other" }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub fn counter_mut(&mut self) -> &mut OpCounter {
        &mut self.counter
    }

    /// Sets the label that subsequent products are counted under and returns
    /// the previous one.
    pub fn set_scope(&mut self, label: &'static str) -> &'static str {
        std::mem::replace(&mut self.scope, label)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Tracked leaf (a parameter or an input whose gradient is wanted).
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        value.check_finite("param")?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        value.check_finite("constant")?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        self.counter.record(self.scope, (m * k * n) as u64);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        self.counter.record(self.scope, (m * k * n) as u64);
        self.push("matmul_nt", Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(row).len() != n {
            return Err(shape_err("add_row", format!("row of {} onto [{m}, {n}]", self.value(row).len())));
        }
        let r = self.value(row).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, &x)| x + r[i % n]).collect();
        self.push("add_row", Tensor::new(&[m, n], data)?, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    /// `a + constant` with the constant untracked.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        same_shape("add_const", self.value(a), c)?;
        let data = self.value(a).data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        self.push("add_const", Tensor::new(c.shape(), data)?, Op::AddConst(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::abs);
        self.push("abs", v, Op::Abs(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).softmax(axis)?;
        self.push("softmax", v, Op::Softmax { x: a, axis }, &[a])
    }

    /// Row softmax of an `[m, n]` matrix where only entries with
    /// `allowed[i * n + j]` take part. Disallowed entries come out exactly
    /// zero, as if their score were −∞; a fully disallowed row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if allowed.len() != m * n {
            return Err(shape_err("masked_softmax", format!("mask of {} for [{m}, {n}]", allowed.len())));
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = i * n..(i + 1) * n;
            let mx = row
                .clone()
                .filter(|&j| allowed[j])
                .map(|j| x[j])
                .fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for j in row.clone().filter(|&j| allowed[j]) {
                let e = (x[j] - mx).exp();
                out[j] = e;
                total += e;
            }
            for j in row {
                out[j] /= total;
            }
        }
        self.push("masked_softmax", Tensor::new(&[m, n], out)?, Op::MaskedSoftmax { x: a }, &[a])
    }

    /// Layer normalization over the last axis of `[m, n]` with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", format!("gain/bias width vs {n}")));
        }
        let eps = T::of(1e-5);
        let nn = T::of(n as f64);
        let x = self.value(a).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x: a, gain, bias, xhat, inv_std };
        self.push("layer_norm", Tensor::new(&[m, n], out)?, op, &[a, gain, bias])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        self.push("concat", v, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice(axis, start, end)?;
        self.push("slice", v, Op::Slice { x: a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    /// Builds `[index.len(), c]` from rows of `[n, c]`; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let (n, c) = self.value(a).dims2()?;
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", format!("row {bad} of {n}")));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); index.len() * c];
        for (r, i) in index.iter().enumerate() {
            if let Some(i) = i {
                out[r * c..(r + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let v = Tensor::new(&[index.len(), c], out)?;
        self.push("gather_rows", v, Op::Gather { x: a, index }, &[a])
    }

    /// Inverse of [`Graph::gather_rows`] over several parts: row `r` of part
    /// `p` lands at output row `targets[r]`; `None` rows are dropped.
    pub fn assemble_rows(&mut self, parts: Vec<(Var, Arc<Vec<Option<usize>>>)>, rows: usize) -> Result<Var> {
        let c = match parts.first() {
            Some((v, _)) => self.value(*v).dims2()?.1,
            None => return Err(shape_err("assemble_rows", "no parts")),
        };
        let mut out = vec![T::zero(); rows * c];
        let mut seen = vec![false; rows];
        for (v, targets) in &parts {
            let (pr, pc) = self.value(*v).dims2()?;
            if pc != c || pr != targets.len() {
                return Err(shape_err("assemble_rows", format!("part [{pr}, {pc}] with {} targets", targets.len())));
            }
            let src = self.value(*v).data();
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    if t >= rows || seen[t] {
                        return Err(shape_err("assemble_rows", format!("target row {t} invalid or repeated")));
                    }
                    seen[t] = true;
                    out[t * c..(t + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
                }
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        self.push("assemble_rows", Tensor::new(&[rows, c], out)?, Op::Assemble { parts }, &inputs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Interleaved sin/cos encoding of each scalar in `a` (any shape with
    /// `n` elements) into an `[n, dim]` matrix.
    pub fn sinusoidal(&mut self, a: Var, dim: usize, temperature: f64) -> Result<Var> {
        let freqs = super::sinusoid_freqs::<T>(dim, temperature)?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len() * dim];
        for (i, &v) in x.iter().enumerate() {
            for (k, &f) in freqs.iter().enumerate() {
                out[i * dim + 2 * k] = (v * f).sin();
                out[i * dim + 2 * k + 1] = (v * f).cos();
            }
        }
        let t = Tensor::new(&[x.len(), dim], out)?;
        self.push("sinusoidal", t, Op::Sinusoidal { x: a, freqs }, &[a])
    }

    /// Lowers an `[H, W, C]` map (any shape with `H·W·C` elements) into
    /// `[H_o·W_o, k·k·C]` patches, zero padded.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Result<Var> {
        let n = geom.height * geom.width * geom.channels;
        if self.value(a).len() != n {
            return Err(shape_err("im2col", format!("{:?} vs {geom:?}", self.shape(a))));
        }
        let (rows, cols) = (geom.out_height() * geom.out_width(), geom.patch_len());
        let src = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for o in 0..rows {
            for p in 0..cols {
                if let Some(s) = geom.source(o, p) {
                    out[o * cols + p] = src[s];
                }
            }
        }
        self.push("im2col", Tensor::new(&[rows, cols], out)?, Op::Im2Col { x: a, geom }, &[a])
    }

    /// Nearest-neighbour ×2 upsampling of a row-major `[H·W, C]` map.
    pub fn upsample2(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let (hw, channels) = self.value(a).dims2()?;
        if hw != height * width {
            return Err(shape_err("upsample2", format!("{hw} rows vs {height}x{width}")));
        }
        let src = self.value(a).data();
        let (h2, w2) = (2 * height, 2 * width);
        let mut out = vec![T::zero(); h2 * w2 * channels];
        for y in 0..h2 {
            for x in 0..w2 {
                let s = ((y / 2) * width + x / 2) * channels;
                let d = (y * w2 + x) * channels;
                out[d..d + channels].copy_from_slice(&src[s..s + channels]);
            }
        }
        let t = Tensor::new(&[h2 * w2, channels], out)?;
        self.push("upsample2", t, Op::Upsample2 { x: a, height, width, channels }, &[a])
    }

    /// Penalty-reduced focal loss on heatmap logits against a soft target in
    /// `[0, 1]`. Cells whose target is exactly 1 are positives. The sum is
    /// normalized by `max(1, positives)`.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor<T>, alpha: f64, beta: f64) -> Result<Var> {
        same_shape("focal_loss", self.value(logits), target)?;
        let (loss, dlogits) = focal_terms(self.value(logits).data(), target.data(), T::of(alpha), T::of(beta));
        self.push("focal_loss", Tensor::scalar(loss), Op::FocalLoss { logits, dlogits }, &[logits])
    }

    /// Mean absolute error over the rows of `[n, c]` selected by `mask`
    /// (length `n`), averaged over selected rows and channels. An empty
    /// mask gives zero.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        same_shape("masked_l1", self.value(pred), target)?;
        let (n, c) = self.value(pred).dims2()?;
        if mask.len() != n {
            return Err(shape_err("masked_l1", format!("mask of {} for {n} rows", mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count() * c;
        let p = self.value(pred).data();
        let mut dpred = vec![T::zero(); n * c];
        let mut total = T::zero();
        if count > 0 {
            let inv = T::one() / T::of(count as f64);
            for i in (0..n).filter(|&i| mask[i]) {
                for j in i * c..(i + 1) * c {
                    let d = p[j] - target.data()[j];
                    total += d.abs();
                    dpred[j] = if d > T::zero() {
                        inv
                    } else if d < T::zero() {
                        -inv
                    } else {
                        T::zero()
                    };
                }
            }
            total *= inv;
        }
        self.push("masked_l1", Tensor::scalar(total), Op::MaskedL1 { pred, dpred }, &[pred])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).shape()[1];
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], m * k, |ga| gemm_nt(m, n, k, g, self.value(*b).data(), ga, true));
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], k * n, |gb| gemm_tn(k, m, n, self.value(*a).data(), g, gb, true));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).shape()[0];
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], m * k, |ga| gemm_nn(m, n, k, g, self.value(*b).data(), ga, true));
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], n * k, |gb| gemm_tn(n, m, k, g, self.value(*a).data(), gb, true));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        gb.iter_mut().zip(g).for_each(|(x, &d)| *x += sign * d)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * vb[i];
                        }
                    });
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * va[i];
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                let n = self.value(*row).len();
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                }
                if self.tracked(*row) {
                    accumulate(&mut grads[row.0], n, |gr| {
                        for (i, &d) in g.iter().enumerate() {
                            gr[i % n] += d;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *c));
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            ga[i] += g[i];
                        } else if x[i] < T::zero() {
                            ga[i] -= g[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis).expect("validated axis");
                let y = out.data();
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len).map(|a| g[base + a * inner] * y[base + a * inner]).sum();
                            for a in 0..len {
                                let j = base + a * inner;
                                gx[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let (m, n) = out.dims2().expect("rank 2");
                let y = out.data();
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for i in 0..m {
                        let row = i * n..(i + 1) * n;
                        let dot: T = row.clone().map(|j| g[j] * y[j]).sum();
                        for j in row {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (m, n) = out.dims2().expect("rank 2");
                let gv = self.value(*gain).data();
                if self.tracked(*gain) {
                    accumulate(&mut grads[gain.0], n, |gg| {
                        for (i, &d) in g.iter().enumerate() {
                            gg[i % n] += d * xhat[i];
                        }
                    });
                }
                if self.tracked(*bias) {
                    accumulate(&mut grads[bias.0], n, |gb| {
                        for (i, &d) in g.iter().enumerate() {
                            gb[i % n] += d;
                        }
                    });
                }
                if self.tracked(*x) {
                    let nn = T::of(n as f64);
                    accumulate(&mut grads[x.0], m * n, |gx| {
                        for i in 0..m {
                            let r = i * n..(i + 1) * n;
                            let dh: Vec<T> = r.clone().map(|j| g[j] * gv[j - i * n]).collect();
                            let mean_dh = dh.iter().copied().sum::<T>() / nn;
                            let mean_dh_h = r.clone().map(|j| dh[j - i * n] * xhat[j]).sum::<T>() / nn;
                            for j in r {
                                gx[j] += inv_std[i] * (dh[j - i * n] - mean_dh - xhat[j] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).shape()[*axis] * inner;
                    if self.tracked(*p) {
                        accumulate(&mut grads[p.0], outer * chunk, |gp| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + chunk];
                                gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(x, &d)| *x += d);
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.value(*x).shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = in_shape[*axis];
                let width = out.shape()[*axis] * inner;
                accumulate(&mut grads[x.0], outer * len * inner, |gx| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        gx[dst..dst + width].iter_mut().zip(&g[o * width..(o + 1) * width]).for_each(|(a, &d)| *a += d);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = out.dims2().expect("rank 2");
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                let (n, c) = self.value(*x).dims2().expect("rank 2");
                accumulate(&mut grads[x.0], n * c, |gx| {
                    for (r, i) in index.iter().enumerate() {
                        if let Some(i) = i {
                            gx[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(a, &d)| *a += d);
                        }
                    }
                });
            }
            Op::Assemble { parts } => {
                let c = out.shape()[1];
                for (v, targets) in parts {
                    if !self.tracked(*v) {
                        continue;
                    }
                    accumulate(&mut grads[v.0], targets.len() * c, |gv| {
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = t {
                                gv[r * c..(r + 1) * c].iter_mut().zip(&g[t * c..(t + 1) * c]).for_each(|(a, &d)| *a += d);
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                accumulate(&mut grads[a.0], len, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let d = g[0] / T::of(len as f64);
                accumulate(&mut grads[a.0], len, |ga| ga.iter_mut().for_each(|x| *x += d));
            }
            Op::Sinusoidal { x, freqs } => {
                let xv = self.value(*x).data();
                let dim = 2 * freqs.len();
                accumulate(&mut grads[x.0], xv.len(), |gx| {
                    for (i, &v) in xv.iter().enumerate() {
                        let mut acc = T::zero();
                        for (k, &f) in freqs.iter().enumerate() {
                            let (s, c) = (v * f).sin_cos();
                            acc += g[i * dim + 2 * k] * c * f - g[i * dim + 2 * k + 1] * s * f;
                        }
                        gx[i] += acc;
                    }
                });
            }
            Op::Im2Col { x, geom } => {
                let (rows, cols) = (geom.out_height() * geom.out_width(), geom.patch_len());
                let len = self.value(*x).len();
                accumulate(&mut grads[x.0], len, |gx| {
                    for o in 0..rows {
                        for p in 0..cols {
                            if let Some(s) = geom.source(o, p) {
                                gx[s] += g[o * cols + p];
                            }
                        }
                    }
                });
            }
            Op::Upsample2 { x, height, width, channels } => {
                let (h2, w2, c) = (2 * height, 2 * width, *channels);
                accumulate(&mut grads[x.0], height * width * c, |gx| {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let s = ((y / 2) * width + xx / 2) * c;
                            let d = (y * w2 + xx) * c;
                            gx[s..s + c].iter_mut().zip(&g[d..d + c]).for_each(|(a, &v)| *a += v);
                        }
                    }
                });
            }
            Op::FocalLoss { logits, dlogits } => {
                accumulate(&mut grads[logits.0], dlogits.len(), |gl| {
                    gl.iter_mut().zip(dlogits).for_each(|(a, &d)| *a += g[0] * d)
                });
            }
            Op::MaskedL1 { pred, dpred } => {
                accumulate(&mut grads[pred.0], dpred.len(), |gp| {
                    gp.iter_mut().zip(dpred).for_each(|(a, &d)| *a += g[0] * d)
                });
            }
        }
    }
}

/// Probability clamp used by the focal loss, as in center-based heads.
pub const FOCAL_EPS: f64 = 1e-4;

fn focal_terms<T: Real>(logits: &[T], target: &[T], alpha: T, beta: T) -> (T, Vec<T>) {
    let eps = T::of(FOCAL_EPS);
    let one = T::one();
    let n_pos = target.iter().filter(|&&t| t == one).count().max(1);
    let norm = T::of(n_pos as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for i in 0..logits.len() {
        let raw = sigmoid(logits[i]);
        let clamped = raw < eps || raw > one - eps;
        let p = raw.max(eps).min(one - eps);
        let (loss, dldp) = if target[i] == one {
            let q = one - p;
            (-q.powf(alpha) * p.ln(), alpha * q.powf(alpha - one) * p.ln() - q.powf(alpha) / p)
        } else {
            let w = (one - target[i]).powf(beta);
            let lq = (one - p).ln();
            (
                -w * p.powf(alpha) * lq,
                -w * (alpha * p.powf(alpha - one) * lq - p.powf(alpha) / (one - p)),
            )
        };
        total += loss;
        if !clamped {
            grad[i] = dldp * raw * (one - raw) / norm;
        }
    }
    (total / norm, grad)
}
