//! Forward kernels shared by the tape and by plain (non-recording) callers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;
use crate::tensor::{gemm, Tensor};

/// Extents of a stride/pad window sweep over an `h x w` image.
pub fn conv_out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        bail!(Contract, "stride must be >= 1");
    }
    if len + 2 * pad < k {
        bail!(
            Dimension,
            "kernel {} larger than padded input {}",
            k,
            len + 2 * pad
        );
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold `[c, h, w]` into `[c*kh*kw, ho*wo]`.
pub(crate) fn im2col(src: &[f64], win: &Window, cols: &mut [f64]) {
    let n = win.cols();
    for c in 0..win.c {
        let plane = &src[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = ((c * win.kh + ky) * win.kw + kx) * n;
                let dst = &mut cols[row..row + n];
                for oy in 0..win.ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    let line = &mut dst[oy * win.wo..(oy + 1) * win.wo];
                    if iy < 0 || iy >= win.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * win.w..(iy as usize + 1) * win.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        *v = if ix < 0 || ix >= win.w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto `[c, h, w]`.
pub(crate) fn col2im(cols: &[f64], win: &Window, dst: &mut [f64]) {
    let n = win.cols();
    for c in 0..win.c {
        let plane = &mut dst[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = ((c * win.kh + ky) * win.kw + kx) * n;
                let src = &cols[row..row + n];
                for oy in 0..win.ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= win.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * win.w..(iy as usize + 1) * win.w];
                    for ox in 0..win.wo {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < win.w as isize {
                            drow[ix as usize] += src[oy * win.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        bail!(
            Dimension,
            "{} must have rank {}, got shape {:?}",
            what,
            rank,
            t.shape()
        );
    }
    Ok(())
}

pub(crate) fn conv2d_window(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Window> {
    expect_rank(x, 4, "conv input")?;
    expect_rank(w, 4, "conv weight")?;
    if w.dim(1) != x.dim(1) {
        bail!(
            Dimension,
            "conv weight expects {} input channels, input has {}",
            w.dim(1),
            x.dim(1)
        );
    }
    let (h, wd) = (x.dim(2), x.dim(3));
    let (kh, kw) = (w.dim(2), w.dim(3));
    Ok(Window {
        c: x.dim(1),
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        ho: conv_out_extent(h, kh, stride, pad)?,
        wo: conv_out_extent(wd, kw, stride, pad)?,
    })
}

/// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let win = conv2d_window(x, w, stride, pad)?;
    let (b, cout) = (x.dim(0), w.dim(0));
    let (k, n) = (win.rows(), win.cols());
    let mut out = vec![0.0; b * cout * n];
    let mut cols = vec![0.0; k * n];
    let plane = win.c * win.h * win.w;
    for bi in 0..b {
        im2col(&x.data()[bi * plane..(bi + 1) * plane], &win, &mut cols);
        gemm(
            cout,
            k,
            n,
            1.0,
            w.data(),
            false,
            &cols,
            false,
            0.0,
            &mut out[bi * cout * n..(bi + 1) * cout * n],
        );
    }
    Tensor::new(&[b, cout, win.ho, win.wo], out)
}

/// Returns `(grad_x, grad_w)` of [`conv2d`].
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let win = conv2d_window(x, w, stride, pad)?;
    let (b, cout) = (x.dim(0), w.dim(0));
    let (k, n) = (win.rows(), win.cols());
    let plane = win.c * win.h * win.w;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut cols = vec![0.0; k * n];
    for bi in 0..b {
        let go = &gout.data()[bi * cout * n..(bi + 1) * cout * n];
        im2col(&x.data()[bi * plane..(bi + 1) * plane], &win, &mut cols);
        gemm(cout, n, k, 1.0, go, false, &cols, true, 1.0, &mut gw);
        gemm(k, cout, n, 1.0, w.data(), true, go, false, 0.0, &mut cols);
        col2im(&cols, &win, &mut gx[bi * plane..(bi + 1) * plane]);
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(w.shape(), gw)?))
}

// Geometry of a transposed convolution: the window sweeps the *output*.
pub(crate) fn conv_t_window(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Window> {
    expect_rank(x, 4, "transposed conv input")?;
    expect_rank(w, 4, "transposed conv weight")?;
    if w.dim(0) != x.dim(1) {
        bail!(
            Dimension,
            "transposed conv weight expects {} input channels, input has {}",
            w.dim(0),
            x.dim(1)
        );
    }
    if stride == 0 {
        bail!(Contract, "stride must be >= 1");
    }
    let (kh, kw) = (w.dim(2), w.dim(3));
    let full_h = (x.dim(2) - 1) * stride + kh;
    let full_w = (x.dim(3) - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        bail!(Dimension, "padding {} consumes the whole output", pad);
    }
    Ok(Window {
        c: w.dim(1),
        h: full_h - 2 * pad,
        w: full_w - 2 * pad,
        kh,
        kw,
        stride,
        pad,
        ho: x.dim(2),
        wo: x.dim(3),
    })
}

/// Transposed convolution: `x: [B, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`,
/// output extent `(H - 1) * stride - 2 * pad + kh`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let win = conv_t_window(x, w, stride, pad)?;
    let (b, cin) = (x.dim(0), x.dim(1));
    let (k, n) = (win.rows(), win.cols());
    let oplane = win.c * win.h * win.w;
    let mut out = vec![0.0; b * oplane];
    let mut cols = vec![0.0; k * n];
    for bi in 0..b {
        let xb = &x.data()[bi * cin * n..(bi + 1) * cin * n];
        gemm(k, cin, n, 1.0, w.data(), true, xb, false, 0.0, &mut cols);
        col2im(&cols, &win, &mut out[bi * oplane..(bi + 1) * oplane]);
    }
    Tensor::new(&[b, win.c, win.h, win.w], out)
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let win = conv_t_window(x, w, stride, pad)?;
    let (b, cin) = (x.dim(0), x.dim(1));
    let (k, n) = (win.rows(), win.cols());
    let oplane = win.c * win.h * win.w;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut cols = vec![0.0; k * n];
    for bi in 0..b {
        im2col(&gout.data()[bi * oplane..(bi + 1) * oplane], &win, &mut cols);
        let xb = &x.data()[bi * cin * n..(bi + 1) * cin * n];
        gemm(
            cin,
            k,
            n,
            1.0,
            w.data(),
            false,
            &cols,
            false,
            0.0,
            &mut gx[bi * cin * n..(bi + 1) * cin * n],
        );
        gemm(cin, n, k, 1.0, xb, false, &cols, true, 1.0, &mut gw);
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(w.shape(), gw)?))
}

/// Operand layout of a (possibly batched, possibly transposed) matrix product.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<MatmulDims> {
    let split = |t: &Tensor| -> Result<(Option<usize>, usize, usize)> {
        match *t.shape() {
            [r, c] => Ok((None, r, c)),
            [bt, r, c] => Ok((Some(bt), r, c)),
            _ => bail!(Dimension, "matmul operand must be rank 2 or 3, got {:?}", t.shape()),
        }
    };
    let (ba, ra, ca) = split(a)?;
    let (bb, rb, cb) = split(b)?;
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
    if k != k2 {
        bail!(
            Dimension,
            "matmul inner extents differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }
    let batch = match (ba, bb) {
        (Some(x), Some(y)) if x != y => bail!(Dimension, "matmul batch mismatch {} vs {}", x, y),
        (Some(x), _) | (_, Some(x)) => x,
        (None, None) => 1,
    };
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        a_batched: ba.is_some(),
        b_batched: bb.is_some(),
    })
}

/// `op(a) @ op(b)`; a rank-2 operand is shared across the batch of the other.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let d = matmul_dims(a, b, ta, tb)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let asl = if d.a_batched { &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k] } else { a.data() };
        let bsl = if d.b_batched { &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n] } else { b.data() };
        gemm(
            d.m,
            d.k,
            d.n,
            1.0,
            asl,
            ta,
            bsl,
            tb,
            0.0,
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
        );
    }
    let shape: Vec<usize> = if d.a_batched || d.b_batched {
        vec![d.batch, d.m, d.n]
    } else {
        vec![d.m, d.n]
    };
    Tensor::new(&shape, out)
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
    gout: &Tensor,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let d = matmul_dims(a, b, ta, tb)?;
    let mut ga = if need_a { Some(vec![0.0; a.len()]) } else { None };
    let mut gb = if need_b { Some(vec![0.0; b.len()]) } else { None };
    let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
    for bi in 0..d.batch {
        let go = &gout.data()[bi * mn..(bi + 1) * mn];
        let asl = if d.a_batched { &a.data()[bi * mk..(bi + 1) * mk] } else { a.data() };
        let bsl = if d.b_batched { &b.data()[bi * kn..(bi + 1) * kn] } else { b.data() };
        if let Some(ga) = ga.as_mut() {
            let dst = if d.a_batched { &mut ga[bi * mk..(bi + 1) * mk] } else { &mut ga[..] };
            if ta {
                gemm(d.k, d.n, d.m, 1.0, bsl, tb, go, true, 1.0, dst);
            } else {
                gemm(d.m, d.n, d.k, 1.0, go, false, bsl, !tb, 1.0, dst);
            }
        }
        if let Some(gb) = gb.as_mut() {
            let dst = if d.b_batched { &mut gb[bi * kn..(bi + 1) * kn] } else { &mut gb[..] };
            if tb {
                gemm(d.n, d.m, d.k, 1.0, go, true, asl, ta, 1.0, dst);
            } else {
                gemm(d.k, d.m, d.n, 1.0, asl, !ta, go, false, 1.0, dst);
            }
        }
    }
    Ok((
        ga.map(|v| Tensor::new(a.shape(), v)).transpose()?,
        gb.map(|v| Tensor::new(b.shape(), v)).transpose()?,
    ))
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, max-shifted.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        bail!(Dimension, "softmax axis {} out of range for {:?}", axis, x.shape());
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(out[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..len {
                let e = math::exp(out[base + j * inner] - mx);
                out[base + j * inner] = e;
                s += e;
            }
            let inv = 1.0 / s;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for j in 0..len {
                dot += yd[base + j * inner] * gd[base + j * inner];
            }
            for j in 0..len {
                let p = base + j * inner;
                out[p] = yd[p] * (gd[p] - dot);
            }
        }
    }
    Tensor::new(y.shape(), out).expect("shape preserved")
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = match parts.first() {
        Some(t) => *t,
        None => bail!(Contract, "concat of zero tensors"),
    };
    if axis >= first.rank() {
        bail!(Dimension, "concat axis {} out of range", axis);
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            bail!(
                Dimension,
                "concat shape mismatch {:?} vs {:?} on axis {}",
                p.shape(),
                first.shape(),
                axis
            );
        }
        total += p.dim(axis);
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.dim(axis) * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

pub fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.dim(axis) {
        bail!(
            Dimension,
            "slice [{}, {}) out of range on axis {} of {:?}",
            start,
            start + len,
            axis,
            x.shape()
        );
    }
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Sum over one axis, removing it.
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        bail!(Dimension, "axis {} out of range for {:?}", axis, x.shape());
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(&shape, out)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(math::sigmoid)
}
