//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value. [`Graph::grad`] walks
//! the tape backwards, expressing each vector-Jacobian product with the same
//! recorded operations, so a gradient computed with `create_graph = true` is
//! itself differentiable. The convolution, linear, bias and leaky-ReLU rules
//! are closed under this; `sqrt` and the homography warp only support one
//! level of differentiation.

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError};
use crate::lie::{self, FrameMap, Homography, WarpParams};
use crate::warp;
use nalgebra::Matrix3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sqrt(Var),
    SumAll(Var),
    ExpandScalar(Var),
    SumPerSample(Var),
    ExpandPerSample(Var),
    Reshape(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BiasAdd(Var, Var),
    ChannelSum(Var),
    ChannelBroadcast(Var),
    Conv(Var, Var, ConvGeom),
    ConvInputGrad(Var, Var, ConvGeom),
    ConvWeightGrad(Var, Var, ConvGeom),
    MaskMul(Var, Var, f32),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    PadChannels(Var, usize),
    AvgPool2(Var),
    AvgPool2T(Var),
    RepeatChannels(Var),
    SumChannelsKeep(Var),
    Warp { img: Var, params: Var, frame: FrameMap, order: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | BiasAdd(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Conv(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) | MaskMul(a, b, _) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Sqrt(a) | SumAll(a) | ExpandScalar(a) | SumPerSample(a)
            | ExpandPerSample(a) | Reshape(a) | ChannelSum(a) | ChannelBroadcast(a) | SliceChannels(a, _)
            | PadChannels(a, _) | AvgPool2(a) | AvgPool2T(a) | RepeatChannels(a) | SumChannelsKeep(a) => vec![*a],
            Concat(v) => v.clone(),
            Warp { img, params, .. } => vec![*img, *params],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(msg: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch(msg.into())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.recording && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.input(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn zeros_like(&mut self, v: Var) -> Var {
        let shape = self.shape(v).to_vec();
        self.constant(Tensor::zeros(&shape))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0).sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum() as f32;
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f32)
    }

    fn expand_scalar(&mut self, s: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(s);
        if t.numel() != 1 {
            return Err(mismatch("expand of a non-scalar"));
        }
        let v = Tensor::full(shape, t.item());
        Ok(self.push(v, Op::ExpandScalar(s)))
    }

    /// `(N, ...)` → `(N)`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.batch();
        let per = t.numel() / n;
        let data = t
            .data()
            .chunks(per)
            .map(|c| c.iter().map(|v| *v as f64).sum::<f64>() as f32)
            .collect();
        let v = Tensor::new(&[n], data).unwrap();
        self.push(v, Op::SumPerSample(a))
    }

    fn expand_per_sample(&mut self, s: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(s);
        if t.shape() != [shape[0]] {
            return Err(mismatch(format!("per-sample expand of {:?} to {shape:?}", t.shape())));
        }
        let per: usize = shape[1..].iter().product();
        let data = t.data().iter().flat_map(|v| std::iter::repeat_n(*v, per)).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::ExpandPerSample(s)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `op(a) · op(b)` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch("matmul needs rank-2 operands"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(mismatch(format!("matmul {sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" })));
        }
        let mut out = vec![0f32; m * n];
        kernels::sgemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (shape `(N, C, ...)`).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.channels();
        if tb.shape() != [c] {
            return Err(mismatch(format!("bias {:?} for input {:?}", tb.shape(), tx.shape())));
        }
        let inner = tx.inner();
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bv = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let v = Tensor::new(tx.shape(), data)?;
        Ok(self.push(v, Op::BiasAdd(x, b)))
    }

    /// `(N, C, ...)` → `(C)`.
    pub fn channel_sum(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.channels();
        let inner = tx.inner();
        let mut acc = vec![0f64; c];
        for (i, chunk) in tx.data().chunks(inner).enumerate() {
            acc[i % c] += chunk.iter().map(|v| *v as f64).sum::<f64>();
        }
        let v = Tensor::new(&[c], acc.into_iter().map(|v| v as f32).collect()).unwrap();
        self.push(v, Op::ChannelSum(x))
    }

    fn channel_broadcast(&mut self, b: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let zeros = Tensor::zeros(shape);
        let tb = self.value(b);
        if tb.shape() != [zeros.channels()] {
            return Err(mismatch("channel broadcast"));
        }
        let (c, inner) = (zeros.channels(), zeros.inner());
        let mut data = zeros.into_data();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            chunk.fill(tb.data()[i % c]);
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::ChannelBroadcast(b)))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize) -> Result<ConvGeom, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(mismatch(format!("conv input {sx:?} weight {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(mismatch(format!("conv expects {} input channels, got {}", sw[1], sx[1])));
        }
        Ok(ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], stride))
    }

    /// Convolution with square kernels and "ceil" zero padding, so each
    /// output extent is `ceil(extent / stride)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, TensorError> {
        let g = self.conv_geom(x, w, stride)?;
        let out = kernels::conv_forward(self.value(x).data(), self.value(w).data(), &g);
        let v = Tensor::new(&g.output_shape(), out)?;
        Ok(self.push(v, Op::Conv(x, w, g)))
    }

    fn conv_input_grad(&mut self, gy: Var, w: Var, g: ConvGeom) -> Result<Var, TensorError> {
        if self.shape(gy) != g.output_shape() || self.shape(w) != g.weight_shape() {
            return Err(mismatch("conv input-gradient operands"));
        }
        let out = kernels::conv_input_grad(self.value(gy).data(), self.value(w).data(), &g);
        let v = Tensor::new(&g.input_shape(), out)?;
        Ok(self.push(v, Op::ConvInputGrad(gy, w, g)))
    }

    fn conv_weight_grad(&mut self, x: Var, gy: Var, g: ConvGeom) -> Result<Var, TensorError> {
        if self.shape(gy) != g.output_shape() || self.shape(x) != g.input_shape() {
            return Err(mismatch("conv weight-gradient operands"));
        }
        let out = kernels::conv_weight_grad(self.value(x).data(), self.value(gy).data(), &g);
        let v = Tensor::new(&g.weight_shape(), out)?;
        Ok(self.push(v, Op::ConvWeightGrad(x, gy, g)))
    }

    /// `a ⊙ s(reference)` with `s = 1` where the reference is positive and
    /// `slope` elsewhere. Leaky ReLU is `mask_mul(x, x, slope)`.
    fn mask_mul(&mut self, a: Var, reference: Var, slope: f32) -> Result<Var, TensorError> {
        let v = self.zip(a, reference, "mask", |x, r| if r > 0.0 { x } else { x * slope })?;
        Ok(self.push(v, Op::MaskMul(a, reference, slope)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.mask_mul(x, x, slope).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// Concatenates `(N, C_i, ...)` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(mismatch(format!("concat {first:?} with {s:?}")));
            }
            total += s[1];
        }
        let (n, inner) = (first[0], first[2..].iter().product::<usize>());
        let mut data = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let per = t.channels() * inner;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (n, c, inner) = (t.batch(), t.channels(), t.inner());
        if start + len > c {
            return Err(mismatch("channel slice out of range"));
        }
        let mut data = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            data.extend_from_slice(&t.data()[(b * c + start) * inner..(b * c + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[1] = len;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::SliceChannels(x, start)))
    }

    fn pad_channels(&mut self, x: Var, start: usize, total: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (n, c, inner) = (t.batch(), t.channels(), t.inner());
        let mut shape = t.shape().to_vec();
        shape[1] = total;
        let mut data = vec![0f32; n * total * inner];
        for b in 0..n {
            data[(b * total + start) * inner..(b * total + start + c) * inner]
                .copy_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
        }
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::PadChannels(x, start)))
    }

    /// 2×2 average pooling of `(N, C, H, W)`; odd trailing rows or columns
    /// average over the pixels that exist.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.shape().len() != 4 {
            return Err(mismatch("avg_pool2 needs NCHW"));
        }
        let [n, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0f32; n * c * oh * ow];
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let (mut s, mut cnt) = (0f32, 0f32);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (2 * y + dy, 2 * xx + dx);
                            if iy < h && ix < w {
                                s += src[iy * w + ix];
                                cnt += 1.0;
                            }
                        }
                    }
                    dst[y * ow + xx] = s / cnt;
                }
            }
        }
        let v = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool2(x)))
    }

    /// Exact adjoint of [`Graph::avg_pool2`] onto an `(N, C, H, W)` grid.
    fn avg_pool2_t(&mut self, g: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(g);
        let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        if t.shape() != [n, c, oh, ow] {
            return Err(mismatch("avg_pool2 adjoint"));
        }
        let mut out = vec![0f32; n * c * h * w];
        for p in 0..n * c {
            let src = &t.data()[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for iy in 0..h {
                let cy = if iy / 2 * 2 + 1 < h { 2.0 } else { 1.0 };
                for ix in 0..w {
                    let cx = if ix / 2 * 2 + 1 < w { 2.0 } else { 1.0 };
                    dst[iy * w + ix] = src[(iy / 2) * ow + ix / 2] / (cy * cx);
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::AvgPool2T(g)))
    }

    /// `(N, 1, ...)` → `(N, channels, ...)`.
    pub fn repeat_channels(&mut self, x: Var, channels: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.channels() != 1 || t.shape().len() < 2 {
            return Err(mismatch("repeat_channels needs a single channel"));
        }
        let inner = t.inner();
        let mut data = Vec::with_capacity(t.numel() * channels);
        for chunk in t.data().chunks(inner) {
            for _ in 0..channels {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[1] = channels;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::RepeatChannels(x)))
    }

    fn sum_channels_keep(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, inner) = (t.batch(), t.channels(), t.inner());
        let mut out = vec![0f32; n * inner];
        for b in 0..n {
            for ch in 0..c {
                let src = &t.data()[(b * c + ch) * inner..][..inner];
                for (o, s) in out[b * inner..(b + 1) * inner].iter_mut().zip(src) {
                    *o += *s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[1] = 1;
        let v = Tensor::new(&shape, out).unwrap();
        self.push(v, Op::SumChannelsKeep(x))
    }

    /// `fg ⊙ mask + bg ⊙ (1 - mask)` with an `(N, 1, H, W)` mask.
    pub fn composite(&mut self, fg: Var, mask: Var, bg: Var) -> Result<Var, TensorError> {
        let c = self.value(fg).channels();
        let m = self.repeat_channels(mask, c)?;
        let a = self.mul(fg, m)?;
        let inv = self.one_minus(m);
        let b = self.mul(bg, inv)?;
        self.add(a, b)
    }

    /// Warps each `(C, H, W)` sample of `img` by the sl(3) parameters in the
    /// matching row of `params` (shape `(N, 8)`) with inverse bilinear
    /// mapping in the pixel frame of `frame`.
    pub fn warp(&mut self, img: Var, params: Var, frame: FrameMap, order: usize) -> Result<Var, TensorError> {
        let (ti, tp) = (self.value(img), self.value(params));
        let s = ti.shape();
        if s.len() != 4 || tp.shape() != [s[0], 8] || s[2] != frame.height || s[3] != frame.width {
            return Err(mismatch(format!("warp of {s:?} by {:?}", tp.shape())));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let per = c * h * w;
        let mut out = Vec::with_capacity(n * per);
        for b in 0..n {
            let p = params_row(tp, b);
            let src = &ti.data()[b * per..(b + 1) * per];
            if p == WarpParams::ZERO {
                out.extend_from_slice(src);
                continue;
            }
            let hs = warp::source_map(&p, &frame, order);
            let warped = warp::warp_planes(src, c, h, w, &hs).map_err(|e| TensorError::Warp(e.to_string()))?;
            out.extend_from_slice(&warped);
        }
        let v = Tensor::new(s, out)?;
        Ok(self.push(v, Op::Warp { img, params, frame, order }))
    }

    /// Gradients of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the returned gradients are recorded so that they
    /// can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>, TensorError> {
        if self.value(output).numel() != 1 {
            return Err(mismatch(format!("gradient of non-scalar {:?}", self.shape(output))));
        }
        let last = output.0;
        let mut ancestor = vec![false; last + 1];
        ancestor[last] = true;
        for i in (0..=last).rev() {
            if ancestor[i] {
                for inp in self.nodes[i].op.inputs() {
                    ancestor[inp.0] = true;
                }
            }
        }
        let mut reach = vec![false; last + 1];
        for t in wrt {
            if t.0 > last || !ancestor[t.0] {
                return Err(TensorError::NotInGraph(t.0));
            }
            reach[t.0] = true;
        }
        for i in 0..=last {
            if !reach[i] && self.nodes[i].op.inputs().iter().any(|v| reach[v.0]) {
                reach[i] = true;
            }
        }
        for i in 0..=last {
            reach[i] &= ancestor[i];
        }

        let prev = self.recording;
        self.recording = create_graph;
        let result = self.run_backward(output, &reach);
        self.recording = prev;
        let grads = result?;
        let mut out = Vec::with_capacity(wrt.len());
        for t in wrt {
            match grads[t.0] {
                Some(g) => out.push(g),
                None => {
                    let z = self.zeros_like(*t);
                    out.push(z);
                }
            }
        }
        Ok(out)
    }

    fn run_backward(&mut self, output: Var, reach: &[bool]) -> Result<Vec<Option<Var>>, TensorError> {
        let last = output.0;
        let mut grads: Vec<Option<Var>> = vec![None; last + 1];
        let seed = Tensor::full(self.shape(output), 1.0);
        grads[last] = Some(self.constant(seed));
        for i in (0..=last).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let contributions = self.vjp(Var(i), &op, g, reach)?;
            for (input, contrib) in contributions {
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of one node for each reachable input.
    fn vjp(&mut self, node: Var, op: &Op, g: Var, reach: &[bool]) -> Result<Vec<(Var, Var)>, TensorError> {
        let want = |v: &Var| reach[v.0];
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    out.push((*a, g));
                }
                if want(b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((*a, g));
                }
                if want(b) {
                    let n = self.scale(g, -1.0);
                    out.push((*b, n));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let d = self.mul(g, *b)?;
                    out.push((*a, d));
                }
                if want(b) {
                    let d = self.mul(g, *a)?;
                    out.push((*b, d));
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    let d = self.scale(g, *c);
                    out.push((*a, d));
                }
            }
            Op::AddScalar(a) => {
                if want(a) {
                    out.push((*a, g));
                }
            }
            Op::Sqrt(a) => {
                if want(a) {
                    let dy = self.map(node, |y| if y > 0.0 { 0.5 / y } else { 0.0 });
                    let c = self.constant(dy);
                    let d = self.mul(g, c)?;
                    out.push((*a, d));
                }
            }
            Op::SumAll(a) => {
                if want(a) {
                    let shape = self.shape(*a).to_vec();
                    let d = self.expand_scalar(g, &shape)?;
                    out.push((*a, d));
                }
            }
            Op::ExpandScalar(a) => {
                if want(a) {
                    let s = self.sum_all(g);
                    let shape = self.shape(*a).to_vec();
                    let d = self.reshape(s, &shape)?;
                    out.push((*a, d));
                }
            }
            Op::SumPerSample(a) => {
                if want(a) {
                    let shape = self.shape(*a).to_vec();
                    let d = self.expand_per_sample(g, &shape)?;
                    out.push((*a, d));
                }
            }
            Op::ExpandPerSample(a) => {
                if want(a) {
                    let d = self.sum_per_sample(g);
                    out.push((*a, d));
                }
            }
            Op::Reshape(a) => {
                if want(a) {
                    let shape = self.shape(*a).to_vec();
                    let d = self.reshape(g, &shape)?;
                    out.push((*a, d));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if want(&a) {
                    let d = if ta {
                        self.matmul(b, g, tb, true)?
                    } else {
                        self.matmul(g, b, false, !tb)?
                    };
                    out.push((a, d));
                }
                if want(&b) {
                    let d = if tb {
                        self.matmul(g, a, true, ta)?
                    } else {
                        self.matmul(a, g, !ta, false)?
                    };
                    out.push((b, d));
                }
            }
            Op::BiasAdd(x, b) => {
                if want(x) {
                    out.push((*x, g));
                }
                if want(b) {
                    let d = self.channel_sum(g);
                    out.push((*b, d));
                }
            }
            Op::ChannelSum(x) => {
                if want(x) {
                    let shape = self.shape(*x).to_vec();
                    let d = self.channel_broadcast(g, &shape)?;
                    out.push((*x, d));
                }
            }
            Op::ChannelBroadcast(b) => {
                if want(b) {
                    let d = self.channel_sum(g);
                    out.push((*b, d));
                }
            }
            Op::Conv(x, w, geom) => {
                if want(x) {
                    let d = self.conv_input_grad(g, *w, *geom)?;
                    out.push((*x, d));
                }
                if want(w) {
                    let d = self.conv_weight_grad(*x, g, *geom)?;
                    out.push((*w, d));
                }
            }
            Op::ConvInputGrad(gy, w, geom) => {
                // node = Wᵀ ⋆ gy; linear in both operands.
                if want(gy) {
                    let d = self.conv_with_geom(g, *w, *geom)?;
                    out.push((*gy, d));
                }
                if want(w) {
                    let d = self.conv_weight_grad(g, *gy, *geom)?;
                    out.push((*w, d));
                }
            }
            Op::ConvWeightGrad(x, gy, geom) => {
                if want(x) {
                    let d = self.conv_input_grad(*gy, g, *geom)?;
                    out.push((*x, d));
                }
                if want(gy) {
                    let d = self.conv_with_geom(*x, g, *geom)?;
                    out.push((*gy, d));
                }
            }
            Op::MaskMul(a, r, slope) => {
                if want(a) {
                    let d = self.mask_mul(g, *r, *slope)?;
                    out.push((*a, d));
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if want(p) {
                        let d = self.slice_channels(g, start, c)?;
                        out.push((*p, d));
                    }
                    start += c;
                }
            }
            Op::SliceChannels(x, start) => {
                if want(x) {
                    let total = self.shape(*x)[1];
                    let d = self.pad_channels(g, *start, total)?;
                    out.push((*x, d));
                }
            }
            Op::PadChannels(x, start) => {
                if want(x) {
                    let len = self.shape(*x)[1];
                    let d = self.slice_channels(g, *start, len)?;
                    out.push((*x, d));
                }
            }
            Op::AvgPool2(x) => {
                if want(x) {
                    let shape = self.shape(*x).to_vec();
                    let d = self.avg_pool2_t(g, &shape)?;
                    out.push((*x, d));
                }
            }
            Op::AvgPool2T(x) => {
                if want(x) {
                    let d = self.avg_pool2(g)?;
                    out.push((*x, d));
                }
            }
            Op::RepeatChannels(x) => {
                if want(x) {
                    let d = self.sum_channels_keep(g);
                    out.push((*x, d));
                }
            }
            Op::SumChannelsKeep(x) => {
                if want(x) {
                    let c = self.shape(*x)[1];
                    let d = self.repeat_channels(g, c)?;
                    out.push((*x, d));
                }
            }
            Op::Warp { img, params, frame, order } => {
                if self.recording && self.requires_grad(g) {
                    return Err(TensorError::SecondOrderUnsupported("warp"));
                }
                let (dimg, dparams) = self.warp_vjp(*img, *params, g, *frame, *order, want(img))?;
                if let Some(d) = dimg {
                    let v = self.constant(d);
                    out.push((*img, v));
                }
                if want(params) {
                    let v = self.constant(dparams);
                    out.push((*params, v));
                }
            }
        }
        Ok(out)
    }

    fn conv_with_geom(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        let g = self.conv_geom(x, w, geom.stride)?;
        if g != geom {
            return Err(mismatch("conv geometry changed between passes"));
        }
        self.conv2d(x, w, geom.stride)
    }

    fn warp_vjp(
        &self,
        img: Var,
        params: Var,
        g: Var,
        frame: FrameMap,
        order: usize,
        want_img: bool,
    ) -> Result<(Option<Tensor>, Tensor), TensorError> {
        let (ti, tp, tg) = (self.value(img), self.value(params), self.value(g));
        let s = ti.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let per = c * h * w;
        let mut dimg = want_img.then(|| vec![0f32; ti.numel()]);
        let mut dparams = vec![0f32; n * 8];
        let to_pix = frame.canonical_to_pixel();
        let to_can = frame.pixel_to_canonical();
        for b in 0..n {
            let p = params_row(tp, b);
            let src = &ti.data()[b * per..(b + 1) * per];
            let up = &tg.data()[b * per..(b + 1) * per];
            let neg = lie::invert(&p);
            let (hc, jac) = lie::exp_sl3_with_jacobian(&neg, order);
            let hs = Homography(to_pix * hc.0 * to_can);
            let (ds, dh) = warp::warp_planes_vjp(src, c, h, w, &hs, up, want_img)
                .map_err(|e| TensorError::Warp(e.to_string()))?;
            if let (Some(acc), Some(ds)) = (dimg.as_mut(), ds) {
                acc[b * per..(b + 1) * per].copy_from_slice(&ds);
            }
            for (j, jj) in jac.iter().enumerate() {
                // d source / d p_j = -T · J_j(-p) · T⁻¹
                let dm: Matrix3<f64> = -(to_pix * jj * to_can);
                dparams[b * 8 + j] = dh.component_mul(&dm).sum() as f32;
            }
        }
        let dimg = match dimg {
            Some(d) => Some(Tensor::new(s, d)?),
            None => None,
        };
        Ok((dimg, Tensor::new(&[n, 8], dparams)?))
    }
}

fn params_row(t: &Tensor, b: usize) -> WarpParams {
    let row = &t.data()[b * 8..(b + 1) * 8];
    WarpParams(std::array::from_fn(|i| row[i] as f64))
}
