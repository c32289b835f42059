//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the tape is acyclic and reverse index order is a valid
//! topological order for [`Graph::backward`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::fft::{self, ComplexTensor};
use crate::tensor::Tensor;
use crate::{cost_volume, head, math, ops};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    BroadcastScalar(Var),
    MulChannel(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var, usize),
    Concat(Box<[Var]>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    SumAxis(Var, usize),
    Sum(Var),
    Rfft2(Var),
    Irfft2(Var),
    SpectralMask(Var, Var),
    GwcVolume { l: Var, r: Var, groups: usize },
    IndexExpectation(Var),
    ConvexUpsample { coarse: Var, weights: Var, factor: usize },
    SmoothL1 { pred: Var, target: Box<Tensor>, valid: Box<[bool]> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], one per trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Hook that lets a test fixture corrupt one backward rule.
pub type BackwardFault = fn(&'static str, &mut Tensor);

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose backward pass routes every gradient contribution through
    /// `fault` together with the name of the op that produced it.
    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push_unchecked(t, Op::Leaf, trainable)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            bail!(NonFinite, "{} produced a non-finite value", op_name(&op));
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{}: shape mismatch {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        self.push(v, Op::Div(a, b), &[a, b])
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// `1 - a`, computed exactly as one rounded subtraction per element.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, Op::Affine(a, -1.0), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = ops::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(math::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// Tile a one-element tensor to `shape`.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            bail!(Dimension, "broadcast_scalar needs one element, got {:?}", self.shape(a));
        }
        let v = Tensor::full(shape, self.value(a).item());
        self.push(v, Op::BroadcastScalar(a), &[a])
    }

    /// `x: [B, C, ..]` times `m: [B, 1, ..]`, broadcast over channels.
    pub fn mul_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xs, ms) = (self.shape(x), self.shape(m));
        if xs.len() < 2 || ms.len() != xs.len() || ms[1] != 1 || ms[0] != xs[0] || ms[2..] != xs[2..] {
            bail!(Dimension, "mul_channel: cannot broadcast {:?} over {:?}", ms, xs);
        }
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let (xv, mv) = (self.value(x), self.value(m));
        let mut out = Vec::with_capacity(xv.len());
        for bi in 0..b {
            let mrow = &mv.data()[bi * inner..(bi + 1) * inner];
            for ci in 0..c {
                let xrow = &xv.data()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                out.extend(xrow.iter().zip(mrow).map(|(a, s)| a * s));
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        self.push(v, Op::MulChannel(x, m), &[x, m])
    }

    /// `x: [B, C, ..]` plus `bias: [C]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(bias) != [xs[1]] {
            bail!(Dimension, "bias {:?} does not match channels of {:?}", self.shape(bias), xs);
        }
        let (b, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let mut v = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for bi in 0..b {
            for (ci, bc) in bv.iter().enumerate() {
                let s = (bi * c + ci) * inner;
                v.data_mut()[s..s + inner].iter_mut().for_each(|e| *e += bc);
            }
        }
        self.push(v, Op::AddChannelBias(x, bias), &[x, bias])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(w), stride, pad)?;
        self.push(v, Op::Conv2d { x, w, stride, pad }, &[x, w])
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = ops::conv_transpose2d(self.value(x), self.value(w), stride, pad)?;
        self.push(v, Op::ConvTranspose2d { x, w, stride, pad }, &[x, w])
    }

    /// Batched `op(a) @ op(b)`; see [`ops::matmul`].
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b), ta, tb)?;
        self.push(v, Op::Matmul { a, b, ta, tb }, &[a, b])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(a), axis)?;
        self.push(v, Op::Softmax(a, axis), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ops::concat(&tensors, axis)?;
        self.push(v, Op::Concat(parts.into(), axis), parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::slice_axis(self.value(x), axis, start, len)?;
        self.push(v, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::sum_axis(self.value(x), axis)?;
        self.push(v, Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Half spectrum of the two trailing axes, stored as `[.., H, W/2+1, 2]`.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let v = fft::rfft2(self.value(x))?.into_interleaved();
        self.push(v, Op::Rfft2(x), &[x])
    }

    /// Inverse of [`Graph::rfft2`] producing width `out_width`.
    pub fn irfft2(&mut self, f: Var, out_width: usize) -> Result<Var> {
        let spec = ComplexTensor::from_interleaved(self.value(f).clone())?;
        let v = fft::irfft2(&spec, out_width)?;
        self.push(v, Op::Irfft2(f), &[f])
    }

    /// Interleaved spectrum `[.., H, Wh, 2]` scaled by a real `[H, Wh]` mask.
    pub fn spectral_mask(&mut self, spec: Var, mask: Var) -> Result<Var> {
        let (ss, ms) = (self.shape(spec), self.shape(mask));
        let r = ss.len();
        if r < 3 || ss[r - 1] != 2 || ms != &ss[r - 3..r - 1] {
            bail!(Dimension, "mask {:?} does not match spectrum {:?}", ms, ss);
        }
        let plane = ms[0] * ms[1];
        let m = self.value(mask).data().to_vec();
        let mut v = self.value(spec).clone();
        for (i, pair) in v.data_mut().chunks_exact_mut(2).enumerate() {
            let s = m[i % plane];
            pair[0] *= s;
            pair[1] *= s;
        }
        self.push(v, Op::SpectralMask(spec, mask), &[spec, mask])
    }

    /// Grouped correlation volume `[B, G, D, H, W]`; see [`cost_volume`].
    pub fn gwc_volume(&mut self, l: Var, r: Var, max_disp: usize, groups: usize) -> Result<Var> {
        let v = cost_volume::gwc_forward(self.value(l), self.value(r), max_disp, groups)?;
        self.push(v, Op::GwcVolume { l, r, groups }, &[l, r])
    }

    /// `sum_d d * p[:, d, ..]` over axis 1.
    pub fn index_expectation(&mut self, p: Var) -> Result<Var> {
        let v = head::expectation_forward(self.value(p))?;
        self.push(v, Op::IndexExpectation(p), &[p])
    }

    /// Learned convex upsampling; see [`head::convex_upsample`].
    pub fn convex_upsample(&mut self, coarse: Var, weights: Var, factor: usize) -> Result<Var> {
        let v = head::convex_upsample(self.value(coarse), self.value(weights), factor)?;
        self.push(v, Op::ConvexUpsample { coarse, weights, factor }, &[coarse, weights])
    }

    /// Mean smooth-L1 of `pred - target` over `valid` entries.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, valid: &[bool]) -> Result<Var> {
        let v = head::smooth_l1_value(self.value(pred), target, valid)?;
        let op = Op::SmoothL1 {
            pred,
            target: Box::new(target.clone()),
            valid: valid.into(),
        };
        self.push(Tensor::scalar(v), op, &[pred])
    }

    /// Accumulate d(loss)/d(leaf) for every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: vec![None; self.nodes.len()] });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        // keep only leaf gradients
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, mut g: Tensor, op: &'static str) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if let Some(f) = self.fault {
            f(op, &mut g);
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape from {}", op);
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let name = op_name(&node.op);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone(), name);
                self.accumulate(grads, *b, g.clone(), name);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone(), name);
                self.accumulate(grads, *b, g.scale(-1.0), name);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?, name);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?, name);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y)?, name);
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = g.zip_map(y, |x, q| -x * q)?.zip_map(bv, |x, d| x / d)?;
                    self.accumulate(grads, *b, t, name);
                }
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, g.scale(*s), name),
            Op::Sigmoid(a) => {
                let t = g.zip_map(y, |x, s| x * s * (1.0 - s))?;
                self.accumulate(grads, *a, t, name);
            }
            Op::LeakyRelu(a, slope) => {
                let t = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { slope * x })?;
                self.accumulate(grads, *a, t, name);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |x, e| x * e)?, name),
            Op::BroadcastScalar(a) => {
                let t = Tensor::new(self.shape(*a), vec![g.sum()])?;
                self.accumulate(grads, *a, t, name);
            }
            Op::MulChannel(x, m) => {
                let xs = self.shape(*x);
                let (b, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let (xv, mv) = (self.value(*x), self.value(*m));
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for bi in 0..b {
                        let mrow = &mv.data()[bi * inner..(bi + 1) * inner];
                        for ci in 0..c {
                            let s = (bi * c + ci) * inner;
                            gx.data_mut()[s..s + inner]
                                .iter_mut()
                                .zip(mrow)
                                .for_each(|(e, f)| *e *= f);
                        }
                    }
                    self.accumulate(grads, *x, gx, name);
                }
                if self.needs(*m) {
                    let mut gm = Tensor::zeros(mv.shape());
                    for bi in 0..b {
                        for ci in 0..c {
                            let s = (bi * c + ci) * inner;
                            let dst = &mut gm.data_mut()[bi * inner..(bi + 1) * inner];
                            for ((d, gg), xx) in dst
                                .iter_mut()
                                .zip(&g.data()[s..s + inner])
                                .zip(&xv.data()[s..s + inner])
                            {
                                *d += gg * xx;
                            }
                        }
                    }
                    self.accumulate(grads, *m, gm, name);
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.accumulate(grads, *x, g.clone(), name);
                if self.needs(*bias) {
                    let xs = self.shape(*x);
                    let (b, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for bi in 0..b {
                        for (ci, acc) in gb.iter_mut().enumerate() {
                            let s = (bi * c + ci) * inner;
                            *acc += g.data()[s..s + inner].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[c], gb)?, name);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (gx, gw) =
                    ops::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad)?;
                self.accumulate(grads, *x, gx, name);
                self.accumulate(grads, *w, gw, name);
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let (gx, gw) = ops::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                )?;
                self.accumulate(grads, *x, gx, name);
                self.accumulate(grads, *w, gw, name);
            }
            Op::Matmul { a, b, ta, tb } => {
                let (ga, gb) = ops::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    *ta,
                    *tb,
                    g,
                    self.needs(*a),
                    self.needs(*b),
                )?;
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga, name);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb, name);
                }
            }
            Op::Softmax(a, axis) => {
                self.accumulate(grads, *a, ops::softmax_backward(y, g, *axis), name);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts.iter() {
                    let len = self.shape(*p)[*axis];
                    if self.needs(*p) {
                        self.accumulate(grads, *p, ops::slice_axis(g, *axis, start, len)?, name);
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = ops::axis_split(xs, *axis);
                let len = g.shape()[*axis];
                let mut gx = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx, name);
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, t, name);
            }
            Op::SumAxis(x, axis) => {
                let xs = self.shape(*x);
                let (outer, len, inner) = ops::axis_split(xs, *axis);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx)?, name);
            }
            Op::Sum(x) => {
                let t = Tensor::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, t, name);
            }
            Op::Rfft2(x) => {
                let w = *self.shape(*x).last().unwrap();
                let gs = ComplexTensor::from_interleaved(g.clone())?;
                self.accumulate(grads, *x, fft::rfft2_adjoint(&gs, w)?, name);
            }
            Op::Irfft2(f) => {
                let t = fft::irfft2_adjoint(g)?.into_interleaved();
                self.accumulate(grads, *f, t, name);
            }
            Op::SpectralMask(spec, mask) => {
                let ms = self.shape(*mask);
                let plane = ms[0] * ms[1];
                let m = self.value(*mask).data();
                if self.needs(*spec) {
                    let mut gs = g.clone();
                    for (i, pair) in gs.data_mut().chunks_exact_mut(2).enumerate() {
                        pair[0] *= m[i % plane];
                        pair[1] *= m[i % plane];
                    }
                    self.accumulate(grads, *spec, gs, name);
                }
                if self.needs(*mask) {
                    let mut gm = vec![0.0; plane];
                    let sv = self.value(*spec).data();
                    for (i, (gp, sp)) in g.data().chunks_exact(2).zip(sv.chunks_exact(2)).enumerate() {
                        gm[i % plane] += gp[0] * sp[0] + gp[1] * sp[1];
                    }
                    self.accumulate(grads, *mask, Tensor::new(ms, gm)?, name);
                }
            }
            Op::GwcVolume { l, r, groups } => {
                let (gl, gr) =
                    cost_volume::gwc_backward(self.value(*l), self.value(*r), g, *groups);
                self.accumulate(grads, *l, gl, name);
                self.accumulate(grads, *r, gr, name);
            }
            Op::IndexExpectation(p) => {
                let t = head::expectation_backward(self.shape(*p), g);
                self.accumulate(grads, *p, t, name);
            }
            Op::ConvexUpsample { coarse, weights, factor } => {
                let (gc, gw) = head::convex_upsample_backward(
                    self.value(*coarse),
                    self.value(*weights),
                    g,
                    *factor,
                );
                self.accumulate(grads, *coarse, gc, name);
                self.accumulate(grads, *weights, gw, name);
            }
            Op::SmoothL1 { pred, target, valid } => {
                let t = head::smooth_l1_grad(self.value(*pred), target, valid, g.item());
                self.accumulate(grads, *pred, t, name);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Affine(..) => "affine",
        Op::Sigmoid(..) => "sigmoid",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Exp(..) => "exp",
        Op::BroadcastScalar(..) => "broadcast_scalar",
        Op::MulChannel(..) => "mul_channel",
        Op::AddChannelBias(..) => "add_channel_bias",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::Matmul { .. } => "matmul",
        Op::Softmax(..) => "softmax",
        Op::Concat(..) => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(..) => "reshape",
        Op::SumAxis(..) => "sum_axis",
        Op::Sum(..) => "sum",
        Op::Rfft2(..) => "rfft2",
        Op::Irfft2(..) => "irfft2",
        Op::SpectralMask(..) => "spectral_mask",
        Op::GwcVolume { .. } => "gwc_volume",
        Op::IndexExpectation(..) => "index_expectation",
        Op::ConvexUpsample { .. } => "convex_upsample",
        Op::SmoothL1 { .. } => "smooth_l1",
    }
}
