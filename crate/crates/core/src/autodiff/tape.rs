use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which elements share normalization statistics in [`Tape::group_norm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Statistics over every channel of the group and every time step.
    Sequence,
    /// Statistics over the channels of the group, separately per time step.
    /// Outputs at time `t` depend only on inputs at time `t`.
    #[default]
    Frame,
}

#[derive(Clone, Copy, Debug)]
enum NormLayout {
    Group { channels: usize, len: usize, groups: usize, scope: NormScope },
    Last { rows: usize, dim: usize },
}

impl NormLayout {
    fn num_sets(&self) -> usize {
        match *self {
            NormLayout::Group { groups, scope: NormScope::Sequence, .. } => groups,
            NormLayout::Group { groups, len, scope: NormScope::Frame, .. } => groups * len,
            NormLayout::Last { rows, .. } => rows,
        }
    }

    fn set_len(&self) -> usize {
        match *self {
            NormLayout::Group { channels, groups, len, scope: NormScope::Sequence } => channels / groups * len,
            NormLayout::Group { channels, groups, scope: NormScope::Frame, .. } => channels / groups,
            NormLayout::Last { dim, .. } => dim,
        }
    }

    #[inline]
    fn index(&self, set: usize, m: usize) -> usize {
        match *self {
            NormLayout::Group { channels, groups, len, scope: NormScope::Sequence } => {
                set * (channels / groups) * len + m
            }
            NormLayout::Group { channels, groups, len, scope: NormScope::Frame } => {
                let (g, t) = (set / len, set % len);
                (g * (channels / groups) + m) * len + t
            }
            NormLayout::Last { dim, .. } => set * dim + m,
        }
    }

    #[inline]
    fn channel(&self, idx: usize) -> usize {
        match *self {
            NormLayout::Group { len, .. } => idx / len,
            NormLayout::Last { dim, .. } => idx % dim,
        }
    }
}

enum Op {
    Leaf,
    StraightThrough { source: Var },
    Conv1d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    LogSigmoid { x: Var },
    Softmax { x: Var },
    Scale { x: Var, factor: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
    Norm { x: Var, gain: Var, bias: Var, layout: NormLayout, xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    GatherRows { table: Var, indices: Vec<usize> },
    PairDot { a: Var, b: Var, pairs: Vec<(usize, usize)> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recording of a forward computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. A tape supports exactly one [`Tape::backward`] call.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Numerically stable `log(1 / (1 + exp(-x)))`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax over a slice, max-subtracted.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Scaled dot-product attention weights, laid out `[heads, T, T]`.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> Result<Vec<f64>> {
    let (t, d) = q.dims2()?;
    if k.shape() != q.shape() {
        return Err(Error::shape("attention", format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        for i in 0..t {
            let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(row);
        }
    }
    Ok(probs)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced at node {}", self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Gradient of the loss with respect to `v`, available after [`Tape::backward`].
    /// `None` if `v` is not on a differentiable path to the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    /// Forward identity that contributes no gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    /// Forward value of `quantized`; backward routes the incoming gradient
    /// unchanged to `source` and nothing to `quantized`.
    pub fn straight_through(&mut self, quantized: Var, source: Var) -> Result<Var> {
        same_shape("straight_through", self.value(quantized), self.value(source))?;
        let value = self.value(quantized).clone();
        let rg = self.rg(source);
        Ok(self.push(value, Op::StraightThrough { source }, rg))
    }

    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, left_pad: usize) -> Result<Var> {
        let (cin, t) = self.value(input).dims2()?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(Error::shape("conv1d", format!("weight {ws:?} vs input channels {cin}")));
        }
        let (cout, k) = (ws[0], ws[2]);
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape("conv1d", format!("bias {:?} vs {cout} channels", self.value(bias).shape())));
        }
        if stride == 0 || k == 0 {
            return Err(Error::InvalidArgument("conv1d needs kernel >= 1 and stride >= 1".into()));
        }
        if t + left_pad < k {
            return Err(Error::shape("conv1d", format!("length {t} + pad {left_pad} shorter than kernel {k}")));
        }
        let tout = (t + left_pad - k) / stride + 1;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; cout * tout];
        for o in 0..cout {
            let orow = &mut out[o * tout..(o + 1) * tout];
            orow.fill(b[o]);
            for c in 0..cin {
                let xrow = &x[c * t..(c + 1) * t];
                for j in 0..k {
                    let wv = w[(o * cin + c) * k + j];
                    let t0 = if left_pad > j { (left_pad - j).div_ceil(stride) } else { 0 };
                    for (ti, ov) in orow.iter_mut().enumerate().skip(t0) {
                        *ov += wv * xrow[ti * stride + j - left_pad];
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(vec![cout, tout], out)?;
        Ok(self.push(value, Op::Conv1d { input, weight, bias, stride, pad: left_pad }, rg))
    }

    /// Affine map on the last axis: `y = x W^T + b` with `W: [d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (dout, din) = self.value(w).dims2()?;
        if *xs.last().unwrap() != din || self.value(b).shape() != [dout] {
            return Err(Error::shape("linear", format!("x {xs:?}, W [{dout}, {din}], b {:?}", self.value(b).shape())));
        }
        let n = self.value(x).numel() / din;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let xr = &xd[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &wd[o * din..(o + 1) * din];
                out[r * dout + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Inverted dropout. Identity (no node) when not training or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let src = self.value(x);
        let mask: Vec<f64> =
            (0..src.numel()).map(|_| if rng.random::<f64>() >= rate { 1.0 / keep } else { 0.0 }).collect();
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| log_sigmoid(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LogSigmoid { x }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().unwrap();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let s = src.data().iter().sum::<f64>() / src.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Group normalization of a `[C, T]` tensor followed by a per-channel affine map.
    pub fn group_norm(
        &mut self,
        x: Var,
        num_groups: usize,
        gain: Var,
        bias: Var,
        eps: f64,
        scope: NormScope,
    ) -> Result<Var> {
        let (c, t) = self.value(x).dims2()?;
        if num_groups == 0 || c % num_groups != 0 {
            return Err(Error::shape("group_norm", format!("{c} channels not divisible by {num_groups} groups")));
        }
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(Error::shape("group_norm", format!("affine parameters must have shape [{c}]")));
        }
        let layout = NormLayout::Group { channels: c, len: t, groups: num_groups, scope };
        self.normalize(x, gain, bias, eps, layout)
    }

    /// Normalization over the last axis of a `[N, D]` tensor with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, dim) = self.value(x).dims2()?;
        if self.value(gain).shape() != [dim] || self.value(bias).shape() != [dim] {
            return Err(Error::shape("layer_norm", format!("affine parameters must have shape [{dim}]")));
        }
        self.normalize(x, gain, bias, eps, NormLayout::Last { rows, dim })
    }

    fn normalize(&mut self, x: Var, gain: Var, bias: Var, eps: f64, layout: NormLayout) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("normalization eps must be positive, got {eps}")));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let (sets, n) = (layout.num_sets(), layout.set_len());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; sets];
        let mut out = vec![0.0; xd.len()];
        for s in 0..sets {
            let mean = (0..n).map(|m| xd[layout.index(s, m)]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|m| {
                    let dv = xd[layout.index(s, m)] - mean;
                    dv * dv
                })
                .sum::<f64>()
                / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[s] = inv;
            for m in 0..n {
                let i = layout.index(s, m);
                let h = (xd[i] - mean) * inv;
                xhat[i] = h;
                let ch = layout.channel(i);
                out[i] = h * gd[ch] + bd[ch];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::Norm { x, gain, bias, layout, xhat, inv_std }, rg))
    }

    /// Columns `[start, end)` of a `[N, D]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start >= end || end > d {
            return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {d} columns")));
        }
        let w = end - start;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&xd[r * d + start..r * d + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, w], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Rows `[start, end)` of a `[N, D]` tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start >= end || end > n {
            return Err(Error::shape("slice_rows", format!("[{start}, {end}) of {n} rows")));
        }
        let out = self.value(x).data()[start * d..end * d].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![end - start, d], out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Empty("concat_cols with no parts".into()))?;
        let (n, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pd) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::shape("concat_cols", format!("row counts {n} vs {pn}")));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Rows of a `[R, D]` table selected by index; gradient scatters back.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, d) = self.value(table).dims2()?;
        if indices.is_empty() {
            return Err(Error::Empty("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {r} rows")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        let value = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows { table, indices: indices.to_vec() }, rg))
    }

    /// `out[p] = a[i_p] · b[j_p]` for row pairs of two `[*, D]` tensors.
    pub fn pair_dot(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (na, d) = self.value(a).dims2()?;
        let (nb, d2) = self.value(b).dims2()?;
        if d != d2 {
            return Err(Error::shape("pair_dot", format!("row widths {d} vs {d2}")));
        }
        if pairs.is_empty() {
            return Err(Error::Empty("pair_dot with no pairs".into()));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= na || j >= nb) {
            return Err(Error::shape("pair_dot", format!("pair ({i}, {j}) out of ({na}, {nb}) rows")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = pairs
            .iter()
            .map(|&(i, j)| ad[i * d..(i + 1) * d].iter().zip(&bd[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![pairs.len()], out)?;
        Ok(self.push(value, Op::PairDot { a, b, pairs: pairs.to_vec() }, rg))
    }

    /// Multi-head scaled dot-product self-attention over `[T, D]` inputs,
    /// bidirectional (no mask). Heads occupy contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        same_shape("attention", self.value(q), self.value(v))?;
        let probs = attention_probs(self.value(q), self.value(k), heads)?;
        let (t, d) = self.value(q).dims2()?;
        let dh = d / heads;
        let vd = self.value(v).data();
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let value = Tensor::new(vec![t, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `[N, V]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{n} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
            return Err(Error::shape("cross_entropy", format!("target {bad} out of {v} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &c) in probs.chunks_mut(v).zip(targets) {
            softmax_in_place(row);
            loss -= row[c].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Accumulates `d loss / d node` into every node on a differentiable path.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(go) = grads[idx].take() else { continue };
            backprop(&self.nodes, &mut grads, node, &go);
            grads[idx] = Some(go);
        }
        self.grads = grads;
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, go: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::StraightThrough { source } => {
            if let Some(g) = acc(nodes, grads, *source) {
                g.iter_mut().zip(go).for_each(|(a, b)| *a += b);
            }
        }
        Op::Conv1d { input, weight, bias, stride, pad } => {
            let (cin, t) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
            let ws = nodes[weight.0].value.shape();
            let (cout, k) = (ws[0], ws[2]);
            let tout = node.value.shape()[1];
            let (x, w) = (val(*input), val(*weight));
            let t0 = |j: usize| if *pad > j { (*pad - j).div_ceil(*stride) } else { 0 };
            if let Some(gb) = acc(nodes, grads, *bias) {
                for o in 0..cout {
                    gb[o] += go[o * tout..(o + 1) * tout].iter().sum::<f64>();
                }
            }
            if let Some(gw) = acc(nodes, grads, *weight) {
                for o in 0..cout {
                    let grow = &go[o * tout..(o + 1) * tout];
                    for c in 0..cin {
                        let xrow = &x[c * t..(c + 1) * t];
                        for j in 0..k {
                            let mut s = 0.0;
                            for (ti, &g) in grow.iter().enumerate().skip(t0(j)) {
                                s += g * xrow[ti * stride + j - pad];
                            }
                            gw[(o * cin + c) * k + j] += s;
                        }
                    }
                }
            }
            if let Some(gx) = acc(nodes, grads, *input) {
                for o in 0..cout {
                    let grow = &go[o * tout..(o + 1) * tout];
                    for c in 0..cin {
                        let gxrow = &mut gx[c * t..(c + 1) * t];
                        for j in 0..k {
                            let wv = w[(o * cin + c) * k + j];
                            for (ti, &g) in grow.iter().enumerate().skip(t0(j)) {
                                gxrow[ti * stride + j - pad] += wv * g;
                            }
                        }
                    }
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (dout, din) = (nodes[w.0].value.shape()[0], nodes[w.0].value.shape()[1]);
            let n = go.len() / dout;
            let (xd, wd) = (val(*x), val(*w));
            if let Some(gb) = acc(nodes, grads, *b) {
                for r in 0..n {
                    for o in 0..dout {
                        gb[o] += go[r * dout + o];
                    }
                }
            }
            if let Some(gw) = acc(nodes, grads, *w) {
                for r in 0..n {
                    let xr = &xd[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let g = go[r * dout + o];
                        if g == 0.0 {
                            continue;
                        }
                        for (a, &xv) in gw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                            *a += g * xv;
                        }
                    }
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..n {
                    let gxr = &mut gx[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let g = go[r * dout + o];
                        if g == 0.0 {
                            continue;
                        }
                        for (a, &wv) in gxr.iter_mut().zip(&wd[o * din..(o + 1) * din]) {
                            *a += g * wv;
                        }
                    }
                }
            }
        }
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            let (ad, bd) = (val(*a), val(*b));
            if let Some(ga) = acc(nodes, grads, *a) {
                // dA = dY B^T
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] += go[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                // dB = A^T dY
                for i in 0..m {
                    let grow = &go[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, &g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * g;
                        }
                    }
                }
            }
        }
        Op::Transpose { x } => {
            let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += go[j * r + i];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(go).for_each(|(a, b)| *a += b);
            }
        }
        Op::Relu { x } => {
            let xd = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((a, &g), &xv) in gx.iter_mut().zip(go).zip(xd) {
                    if xv > 0.0 {
                        *a += g;
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((a, &g), &m) in gx.iter_mut().zip(go).zip(mask) {
                    *a += g * m;
                }
            }
        }
        Op::LogSigmoid { x } => {
            let xd = val(*x);
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((a, &g), &xv) in gx.iter_mut().zip(go).zip(xd) {
                    *a += g * sigmoid(-xv);
                }
            }
        }
        Op::Softmax { x } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((gxr, gr), yr) in gx.chunks_mut(d).zip(go.chunks(d)).zip(y.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((a, &g), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                        *a += yv * (g - dot);
                    }
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(go).for_each(|(a, b)| *a += b * factor);
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(g) = acc(nodes, grads, v) {
                    g.iter_mut().zip(go).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(g) = acc(nodes, grads, *a) {
                g.iter_mut().zip(go).for_each(|(x, y)| *x += y);
            }
            if let Some(g) = acc(nodes, grads, *b) {
                g.iter_mut().zip(go).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(g) = acc(nodes, grads, *a) {
                for ((x, &gv), &bv) in g.iter_mut().zip(go).zip(&bd) {
                    *x += gv * bv;
                }
            }
            if let Some(g) = acc(nodes, grads, *b) {
                for ((x, &gv), &av) in g.iter_mut().zip(go).zip(&ad) {
                    *x += gv * av;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += go[0]);
            }
        }
        Op::Mean { x } => {
            let n = nodes[x.0].value.numel() as f64;
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += go[0] / n);
            }
        }
        Op::Norm { x, gain, bias, layout, xhat, inv_std } => {
            let gd = val(*gain);
            if let Some(gb) = acc(nodes, grads, *bias) {
                for (i, &g) in go.iter().enumerate() {
                    gb[layout.channel(i)] += g;
                }
            }
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (i, &g) in go.iter().enumerate() {
                    gg[layout.channel(i)] += g * xhat[i];
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let n = layout.set_len();
                let nf = n as f64;
                for (s, &inv) in inv_std.iter().enumerate() {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for m in 0..n {
                        let i = layout.index(s, m);
                        let gh = go[i] * gd[layout.channel(i)];
                        sum_g += gh;
                        sum_gx += gh * xhat[i];
                    }
                    for m in 0..n {
                        let i = layout.index(s, m);
                        let gh = go[i] * gd[layout.channel(i)];
                        gx[i] += inv / nf * (nf * gh - sum_g - xhat[i] * sum_gx);
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let d = nodes[x.0].value.shape()[1];
            let w = node.value.shape()[1];
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, grow) in go.chunks(w).enumerate() {
                    for (a, &g) in gx[r * d + start..r * d + start + w].iter_mut().zip(grow) {
                        *a += g;
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let d = nodes[x.0].value.shape()[1];
            if let Some(gx) = acc(nodes, grads, *x) {
                for (a, &g) in gx[start * d..start * d + go.len()].iter_mut().zip(go) {
                    *a += g;
                }
            }
        }
        Op::ConcatCols { parts } => {
            let total = node.value.shape()[1];
            let mut off = 0;
            for &p in parts {
                let w = nodes[p.0].value.shape()[1];
                if let Some(gp) = acc(nodes, grads, p) {
                    for (r, grow) in gp.chunks_mut(w).enumerate() {
                        for (a, &g) in grow.iter_mut().zip(&go[r * total + off..r * total + off + w]) {
                            *a += g;
                        }
                    }
                }
                off += w;
            }
        }
        Op::GatherRows { table, indices } => {
            let d = nodes[table.0].value.shape()[1];
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &i) in indices.iter().enumerate() {
                    for (a, &g) in gt[i * d..(i + 1) * d].iter_mut().zip(&go[r * d..(r + 1) * d]) {
                        *a += g;
                    }
                }
            }
        }
        Op::PairDot { a, b, pairs } => {
            let d = nodes[a.0].value.shape()[1];
            let (ad, bd) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(ga) = acc(nodes, grads, *a) {
                for (&(i, j), &g) in pairs.iter().zip(go) {
                    for (x, &y) in ga[i * d..(i + 1) * d].iter_mut().zip(&bd[j * d..(j + 1) * d]) {
                        *x += g * y;
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (&(i, j), &g) in pairs.iter().zip(go) {
                    for (x, &y) in gb[j * d..(j + 1) * d].iter_mut().zip(&ad[i * d..(i + 1) * d]) {
                        *x += g * y;
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (t, d) = (node.value.shape()[0], node.value.shape()[1]);
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (val(*q), val(*k), val(*v));
            let mut gq = vec![0.0; t * d];
            let mut gk = vec![0.0; t * d];
            let mut gv = vec![0.0; t * d];
            let mut ds = vec![0.0; t];
            for h in 0..*heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..t {
                    let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                    let goi = &go[i * d + cols.start..i * d + cols.end];
                    // dP_ij = dO_i · v_j ; dV_j += P_ij dO_i
                    let mut dot = 0.0;
                    for j in 0..t {
                        let vj = &vd[j * d + cols.start..j * d + cols.end];
                        let dp: f64 = goi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += dp * prow[j];
                        for (a, &g) in gv[j * d + cols.start..j * d + cols.end].iter_mut().zip(goi) {
                            *a += prow[j] * g;
                        }
                    }
                    for j in 0..t {
                        let s = prow[j] * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        for c in cols.clone() {
                            gq[i * d + c] += s * kd[j * d + c];
                            gk[j * d + c] += s * qd[i * d + c];
                        }
                    }
                }
            }
            for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                if let Some(dst) = acc(nodes, grads, var) {
                    dst.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let n = targets.len();
            let v = probs.len() / n;
            if let Some(gl) = acc(nodes, grads, *logits) {
                let s = go[0] / n as f64;
                for (r, &c) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == c { 1.0 } else { 0.0 };
                        gl[r * v + j] += s * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
    }
}
