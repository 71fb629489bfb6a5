//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted and `backward` is a single reverse sweep. A
//! fresh graph is built for every optimization step.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batchnorm, used by the caller
/// to update running estimates. `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    GapSpatial(Var),
    AvgPoolChannels(Var),
    Upsample(Var),
    Softmax(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `(n, h, w, c)` view of a rank-3 or rank-4 channels-last tensor.
fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::dim(op, format!("expected [h,w,c] or [n,h,w,c], got {shape:?}"))),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index it reads from `input`.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += strides[d];
            if counter[d] < out[d] {
                break;
            }
            src -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`. Leaves that
    /// require gradients but did not participate report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor { shape: node.value.shape().to_vec(), data: g.clone() })
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = value.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(op_name, format!("non-finite output value {bad}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"))),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Cross-correlation of a channels-last input (`[h,w,ci]` or `[n,h,w,ci]`)
    /// with a `[kh,kw,ci,co]` kernel. No bias; add one with [`Graph::add`].
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n, h, w, ci) = spatial_dims("conv2d", &in_shape)?;
        let (kh, kw, co) = match *self.shape(kernel) {
            [kh, kw, kci, co] if kci == ci => (kh, kw, co),
            ref ks => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {ks:?} incompatible with input {in_shape:?}"),
                ))
            }
        };
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let (x, k) = (self.value(input).data(), self.value(kernel).data());
        let mut out = vec![0.0; n * ho * wo * co];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((b * ho + oy) * wo + ox) * co;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ibase = ((b * h + iy as usize) * w + ix as usize) * ci;
                            for c in 0..ci {
                                let xv = x[ibase + c];
                                let kbase = ((ky * kw + kx) * ci + c) * co;
                                for (o, &kv) in out[obase..obase + co].iter_mut().zip(&k[kbase..kbase + co]) {
                                    *o += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = if in_shape.len() == 3 { vec![ho, wo, co] } else { vec![n, ho, wo, co] };
        let value = Tensor::new(shape, out)?;
        self.push("conv2d", value, Op::Conv2d { input, kernel, stride, padding }, &[input, kernel])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::dim(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (ma, mb) = (broadcast_map(&out_shape, &sa), broadcast_map(&out_shape, &sb));
            ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        Ok((Tensor::new(out_shape.clone(), data)?, out_shape))
    }

    /// Broadcasting addition (numpy rules, trailing axes aligned).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", value, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push("log", value, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(a), &[a])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", value, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Sum over the last axis: `[.., m] -> [..]` (a vector reduces to `[1]`).
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = *t.shape().last().unwrap();
        let data: Vec<f64> = t.data().chunks(m).map(|c| c.iter().sum()).collect();
        let shape = if t.rank() == 1 { vec![1] } else { t.shape()[..t.rank() - 1].to_vec() };
        let value = Tensor::new(shape, data)?;
        self.push("sum_last", value, Op::SumLast(a), &[a])
    }

    /// Squared Euclidean norm of each row along the last axis.
    pub fn l2_norm_sq(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum_last(sq)
    }

    /// Inner product along the last axis.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.sum_last(prod)
    }

    /// Mean over all spatial positions: `[n,h,w,c] -> [n,c]` (`[h,w,c] -> [c]`).
    pub fn global_avg_pool_spatial(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (n, h, w, c) = spatial_dims("global_avg_pool_spatial", &shape)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; n * c];
        let inv = 1.0 / (h * w) as f64;
        for b in 0..n {
            for p in 0..h * w {
                let base = (b * h * w + p) * c;
                for j in 0..c {
                    out[b * c + j] += x[base + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = if shape.len() == 3 { vec![c] } else { vec![n, c] };
        let value = Tensor::new(shape, out)?;
        self.push("global_avg_pool_spatial", value, Op::GapSpatial(a), &[a])
    }

    /// Per-pixel mean over channels: `[.., h, w, c] -> [.., h, w, 1]`.
    pub fn avg_pool_channels(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        spatial_dims("avg_pool_channels", &shape)?;
        let c = *shape.last().unwrap();
        let data: Vec<f64> = self.value(a).data().chunks(c).map(|p| p.iter().sum::<f64>() / c as f64).collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = 1;
        let value = Tensor::new(out_shape, data)?;
        self.push("avg_pool_channels", value, Op::AvgPoolChannels(a), &[a])
    }

    /// Nearest-neighbour resize of the spatial axes to exactly
    /// `target_h × target_w`; source row for output row `y` is
    /// `floor(y * h / target_h)`.
    pub fn upsample_nearest(&mut self, a: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (n, h, w, c) = spatial_dims("upsample_nearest", &shape)?;
        if target_h == 0 || target_w == 0 {
            return Err(Error::dim("upsample_nearest", "zero target extent"));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * target_h * target_w * c);
        for b in 0..n {
            for y in 0..target_h {
                let sy = y * h / target_h;
                for xo in 0..target_w {
                    let sx = xo * w / target_w;
                    let base = ((b * h + sy) * w + sx) * c;
                    out.extend_from_slice(&x[base..base + c]);
                }
            }
        }
        let out_shape = if shape.len() == 3 { vec![target_h, target_w, c] } else { vec![n, target_h, target_w, c] };
        let value = Tensor::new(out_shape, out)?;
        self.push("upsample_nearest", value, Op::Upsample(a), &[a])
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(Error::numeric("softmax", "non-finite logits"));
        }
        let m = *t.shape().last().unwrap();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// `out[i] = x[i, index[i]]` for a `[n, m]` matrix.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (n, m) = match *self.shape(a) {
            [n, m] => (n, m),
            ref s => return Err(Error::dim("gather", format!("expected a matrix, got {s:?}"))),
        };
        if index.len() != n {
            return Err(Error::dim("gather", format!("{} indices for {n} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= m) {
            return Err(Error::dim("gather", format!("index {bad} out of range for {m} columns")));
        }
        let x = self.value(a).data();
        let data = index.iter().enumerate().map(|(i, &j)| x[i * m + j]).collect();
        let value = Tensor::new(vec![n], data)?;
        self.push("gather", value, Op::Gather(a, index.to_vec()), &[a])
    }

    /// Rows of the leading axis, in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = t.shape()[0];
        if rows.is_empty() {
            return Err(Error::dim("select_rows", "empty row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("select_rows", format!("row {bad} out of range for {n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * t.numel() / n);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        self.push("select_rows", value, Op::SelectRows(a, rows.to_vec()), &[a])
    }

    /// Training-mode batchnorm: every element along the last axis is a
    /// feature, normalized with the biased batch statistics over all other
    /// axes, then scaled and shifted.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        let f = *shape.last().unwrap();
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::dim(
                "batchnorm",
                format!("scale {:?} / shift {:?} do not match {f} features", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let count = xv.len() / f;
        let mut mean = vec![0.0; f];
        for row in xv.chunks(f) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; f];
        for row in xv.chunks(f) {
            for j in 0..f {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(f) {
            for j in 0..f {
                let nrm = (row[j] - mean[j]) * inv_std[j];
                xhat.push(nrm);
                out.push(nrm * g[j] + b[j]);
            }
        }
        let unbiased = if count > 1 {
            var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
        } else {
            var
        };
        let stats = BatchStats { mean, var: unbiased };
        let value = Tensor::new(shape, out)?;
        let v = self.push("batchnorm", value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Eval-mode batchnorm with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let mean = self.constant(running_mean.clone());
        let inv = self.constant(running_var.map(|v| 1.0 / (v + eps).sqrt()));
        let centered = self.sub(x, mean)?;
        let normed = self.mul(centered, inv)?;
        let scaled = self.mul(normed, gamma)?;
        self.add(scaled, beta)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element node. Clears gradients of any
    /// previous sweep first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", format!("loss must be a scalar, got {:?}", self.shape(loss))));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[idx].take() else { continue };
            self.propagate(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && self.grads[idx].is_none() {
                self.grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contribution: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        let g = self.grads[target.0].get_or_insert_with(|| vec![0.0; n]);
        contribution(g);
    }

    fn accumulate_broadcast(&mut self, target: Var, out_shape: &[usize], local: Vec<f64>) {
        let in_shape = self.shape(target).to_vec();
        if in_shape == out_shape {
            self.accumulate(target, |g| g.iter_mut().zip(&local).for_each(|(g, l)| *g += l));
        } else {
            let map = broadcast_map(out_shape, &in_shape);
            self.accumulate(target, |g| {
                for (&i, l) in map.iter().zip(&local) {
                    g[i] += l;
                }
            });
        }
    }

    fn propagate(&mut self, idx: usize, dy: &[f64]) {
        let out_shape = self.nodes[idx].value.shape().to_vec();
        // Temporarily take the op so input values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| dy[i * n + j] * bv[p * n + j]).sum();
                        }
                    }
                    self.accumulate(*a, |g| g.iter_mut().zip(&da).for_each(|(g, d)| *g += d));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += x * dy[i * n + j];
                            }
                        }
                    }
                    self.accumulate(*b, |g| g.iter_mut().zip(&db).for_each(|(g, d)| *g += d));
                }
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let (input, kernel, stride, padding) = (*input, *kernel, *stride, *padding);
                let (n, h, w, ci) = spatial_dims("conv2d", self.shape(input)).expect("validated in forward");
                let ks = self.shape(kernel).to_vec();
                let (kh, kw, co) = (ks[0], ks[1], ks[3]);
                let ho = (h + 2 * padding - kh) / stride + 1;
                let wo = (w + 2 * padding - kw) / stride + 1;
                let x = self.value(input).data();
                let k = self.value(kernel).data();
                let mut dx = vec![0.0; x.len()];
                let mut dk = vec![0.0; k.len()];
                for b in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let obase = ((b * ho + oy) * wo + ox) * co;
                            let g = &dy[obase..obase + co];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let ibase = ((b * h + iy as usize) * w + ix as usize) * ci;
                                    for c in 0..ci {
                                        let kbase = ((ky * kw + kx) * ci + c) * co;
                                        let kr = &k[kbase..kbase + co];
                                        let xv = x[ibase + c];
                                        let mut acc = 0.0;
                                        for o in 0..co {
                                            acc += g[o] * kr[o];
                                            dk[kbase + o] += xv * g[o];
                                        }
                                        dx[ibase + c] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(input, |g| g.iter_mut().zip(&dx).for_each(|(g, d)| *g += d));
                self.accumulate(kernel, |g| g.iter_mut().zip(&dk).for_each(|(g, d)| *g += d));
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(*a, &out_shape, dy.to_vec());
                self.accumulate_broadcast(*b, &out_shape, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(*a, &out_shape, dy.to_vec());
                self.accumulate_broadcast(*b, &out_shape, dy.iter().map(|d| -d).collect());
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(op, Op::Div(..));
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let ma = broadcast_map(&out_shape, &sa);
                let mb = broadcast_map(&out_shape, &sb);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (mut la, mut lb) = (Vec::with_capacity(dy.len()), Vec::with_capacity(dy.len()));
                for (i, d) in dy.iter().enumerate() {
                    let (x, y) = (av[ma[i]], bv[mb[i]]);
                    if is_div {
                        la.push(d / y);
                        lb.push(-d * x / (y * y));
                    } else {
                        la.push(d * y);
                        lb.push(d * x);
                    }
                }
                self.accumulate_broadcast(*a, &out_shape, la);
                self.accumulate_broadcast(*b, &out_shape, lb);
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.accumulate(*a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * f));
            }
            Op::Relu(a) => {
                let local: Vec<f64> =
                    self.value(*a).data().iter().zip(dy).map(|(&x, d)| if x > 0.0 { *d } else { 0.0 }).collect();
                self.accumulate_broadcast(*a, &out_shape, local);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let local: Vec<f64> = y.iter().zip(dy).map(|(s, d)| d * s * (1.0 - s)).collect();
                self.accumulate_broadcast(*a, &out_shape, local);
            }
            Op::Exp(a) => {
                let y = self.nodes[idx].value.data();
                let local: Vec<f64> = y.iter().zip(dy).map(|(e, d)| d * e).collect();
                self.accumulate_broadcast(*a, &out_shape, local);
            }
            Op::Log(a) => {
                let local: Vec<f64> = self.value(*a).data().iter().zip(dy).map(|(x, d)| d / x).collect();
                self.accumulate_broadcast(*a, &out_shape, local);
            }
            Op::Sqrt(a) => {
                let y = self.nodes[idx].value.data();
                let local: Vec<f64> = y.iter().zip(dy).map(|(s, d)| d * 0.5 / s).collect();
                self.accumulate_broadcast(*a, &out_shape, local);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let local: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, d)| if x >= lo && x <= hi { *d } else { 0.0 })
                    .collect();
                self.accumulate_broadcast(*a, &out_shape, local);
            }
            Op::Reshape(a) => {
                self.accumulate(*a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sum(a) => {
                let d = dy[0];
                self.accumulate(*a, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Mean(a) => {
                let d = dy[0] / self.value(*a).numel() as f64;
                self.accumulate(*a, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::SumLast(a) => {
                let m = *self.shape(*a).last().unwrap();
                self.accumulate(*a, |g| {
                    for (chunk, d) in g.chunks_mut(m).zip(dy) {
                        chunk.iter_mut().for_each(|g| *g += d);
                    }
                });
            }
            Op::GapSpatial(a) => {
                let (n, h, w, c) = spatial_dims("global_avg_pool_spatial", self.shape(*a)).unwrap();
                let inv = 1.0 / (h * w) as f64;
                self.accumulate(*a, |g| {
                    for b in 0..n {
                        for p in 0..h * w {
                            let base = (b * h * w + p) * c;
                            for j in 0..c {
                                g[base + j] += dy[b * c + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::AvgPoolChannels(a) => {
                let c = *self.shape(*a).last().unwrap();
                let inv = 1.0 / c as f64;
                self.accumulate(*a, |g| {
                    for (chunk, d) in g.chunks_mut(c).zip(dy) {
                        chunk.iter_mut().for_each(|g| *g += d * inv);
                    }
                });
            }
            Op::Upsample(a) => {
                let (n, h, w, c) = spatial_dims("upsample_nearest", self.shape(*a)).unwrap();
                let (_, th, tw, _) = spatial_dims("upsample_nearest", &out_shape).unwrap();
                self.accumulate(*a, |g| {
                    for b in 0..n {
                        for y in 0..th {
                            let sy = y * h / th;
                            for xo in 0..tw {
                                let sx = xo * w / tw;
                                let src = ((b * h + sy) * w + sx) * c;
                                let dst = ((b * th + y) * tw + xo) * c;
                                for j in 0..c {
                                    g[src + j] += dy[dst + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.nodes[idx].value.data();
                let m = *out_shape.last().unwrap();
                let mut local = Vec::with_capacity(y.len());
                for (yr, dr) in y.chunks(m).zip(dy.chunks(m)) {
                    let dotp: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    local.extend(yr.iter().zip(dr).map(|(s, d)| s * (d - dotp)));
                }
                self.accumulate(*a, |g| g.iter_mut().zip(&local).for_each(|(g, l)| *g += l));
            }
            Op::Gather(a, index) => {
                let m = self.shape(*a)[1];
                self.accumulate(*a, |g| {
                    for (i, (&j, d)) in index.iter().zip(dy).enumerate() {
                        g[i * m + j] += d;
                    }
                });
            }
            Op::SelectRows(a, rows) => {
                let stride = self.value(*a).numel() / self.shape(*a)[0];
                self.accumulate(*a, |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..stride {
                            g[r * stride + j] += dy[k * stride + j];
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let f = inv_std.len();
                let count = (xhat.len() / f) as f64;
                let gv = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for (xr, dr) in xhat.chunks(f).zip(dy.chunks(f)) {
                    for j in 0..f {
                        dgamma[j] += dr[j] * xr[j];
                        dbeta[j] += dr[j];
                    }
                }
                if self.requires_grad(*x) {
                    // dx = inv_std/N * (N*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)), dxhat = dy*gamma
                    let mut dx = Vec::with_capacity(xhat.len());
                    for (xr, dr) in xhat.chunks(f).zip(dy.chunks(f)) {
                        for j in 0..f {
                            let sum_dxhat = dbeta[j] * gv[j];
                            let sum_dxhat_xhat = dgamma[j] * gv[j];
                            dx.push(
                                inv_std[j] / count
                                    * (count * dr[j] * gv[j] - sum_dxhat - xr[j] * sum_dxhat_xhat),
                            );
                        }
                    }
                    self.accumulate(*x, |g| g.iter_mut().zip(&dx).for_each(|(g, d)| *g += d));
                }
                self.accumulate(*gamma, |g| g.iter_mut().zip(&dgamma).for_each(|(g, d)| *g += d));
                self.accumulate(*beta, |g| g.iter_mut().zip(&dbeta).for_each(|(g, d)| *g += d));
            }
        }
        self.nodes[idx].op = op;
    }
}
