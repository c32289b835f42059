//! Disparity regression, full-resolution recovery and the training loss.
//!
//! Coarse disparity lives in quarter-resolution units; the factor that maps it
//! back to full-resolution pixels is applied only by the convex upsampler.

use alloc::vec;
use alloc::vec::Vec;

use crate::cost_volume::CostVolume;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::init::{fan_in_uniform, leaky_gain, Rng};
use crate::math;
use crate::params::param_set;
use crate::tensor::Tensor;

/// Upsampling factor between the volume and the input image.
pub const UPSAMPLE: usize = 4;
/// Hidden width of the guide convolution.
pub const GUIDE_CHANNELS: usize = 16;

/// Dense disparity with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    /// `[H, W]` disparities in pixels of this map's resolution.
    pub values: Tensor,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(values: Tensor, valid: Vec<bool>) -> Result<Self> {
        if values.rank() != 2 || valid.len() != values.len() {
            bail!(
                Dimension,
                "disparity map needs [H, W] values and a matching mask, got {:?} / {}",
                values.shape(),
                valid.len()
            );
        }
        for (v, ok) in values.data().iter().zip(&valid) {
            if *ok && !(v.is_finite() && *v >= 0.0) {
                bail!(Contract, "valid disparity {} must be finite and >= 0", v);
            }
        }
        Ok(Self { values, valid })
    }

    /// All pixels valid.
    pub fn dense(values: Tensor) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![true; n])
    }

    pub fn height(&self) -> usize {
        self.values.dim(0)
    }

    pub fn width(&self) -> usize {
        self.values.dim(1)
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Nearest-neighbour subsample at `(4i, 4j)`, disparities divided by 4.
    pub fn downsample_quarter(&self) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        if h % UPSAMPLE != 0 || w % UPSAMPLE != 0 {
            bail!(Dimension, "{}x{} map is not divisible by {}", h, w, UPSAMPLE);
        }
        let (h4, w4) = (h / UPSAMPLE, w / UPSAMPLE);
        let mut vals = Vec::with_capacity(h4 * w4);
        let mut valid = Vec::with_capacity(h4 * w4);
        for i in 0..h4 {
            for j in 0..w4 {
                let src = (i * UPSAMPLE) * w + j * UPSAMPLE;
                valid.push(self.valid[src]);
                vals.push(self.values.data()[src] / UPSAMPLE as f64);
            }
        }
        Self::new(Tensor::new(&[h4, w4], vals)?, valid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda0: f64,
    pub lambda1: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.3,
            lambda1: 1.0,
        }
    }
}

param_set! {
    /// Guide network predicting nine convex-combination logits per
    /// full-resolution pixel from the left image.
    pub struct HeadParams / HeadVars {
        guide1_w,
        guide1_b,
        guide2_w,
        guide2_b,
    }
}

impl HeadParams {
    pub fn init(rng: &mut Rng) -> Self {
        let c = GUIDE_CHANNELS;
        Self {
            guide1_w: fan_in_uniform(&[c, 3, 3, 3], 27, leaky_gain(0.1), rng),
            guide1_b: Tensor::zeros(&[c]),
            guide2_w: fan_in_uniform(&[9, c, 3, 3], 9 * c, 1.0, rng),
            guide2_b: Tensor::zeros(&[9]),
        }
    }

    /// Parameters producing uniform 1/9 weights everywhere.
    pub fn uniform() -> Self {
        let c = GUIDE_CHANNELS;
        Self {
            guide1_w: Tensor::zeros(&[c, 3, 3, 3]),
            guide1_b: Tensor::zeros(&[c]),
            guide2_w: Tensor::zeros(&[9, c, 3, 3]),
            guide2_b: Tensor::zeros(&[9]),
        }
    }
}

// ---- kernels used by the tape ----

pub(crate) fn expectation_forward(p: &Tensor) -> Result<Tensor> {
    if p.rank() < 2 {
        bail!(Dimension, "expectation needs [B, D, ..], got {:?}", p.shape());
    }
    let (b, d) = (p.dim(0), p.dim(1));
    let inner: usize = p.shape()[2..].iter().product();
    let mut out = vec![0.0; b * inner];
    for bi in 0..b {
        let dst = &mut out[bi * inner..(bi + 1) * inner];
        for k in 0..d {
            let src = &p.data()[(bi * d + k) * inner..(bi * d + k + 1) * inner];
            let kf = k as f64;
            dst.iter_mut().zip(src).for_each(|(o, v)| *o += kf * v);
        }
    }
    let mut shape = p.shape().to_vec();
    shape.remove(1);
    Tensor::new(&shape, out)
}

pub(crate) fn expectation_backward(p_shape: &[usize], g: &Tensor) -> Tensor {
    let (b, d) = (p_shape[0], p_shape[1]);
    let inner: usize = p_shape[2..].iter().product();
    let mut out = Vec::with_capacity(b * d * inner);
    for bi in 0..b {
        for k in 0..d {
            let kf = k as f64;
            out.extend(g.data()[bi * inner..(bi + 1) * inner].iter().map(|v| kf * v));
        }
    }
    Tensor::new(p_shape, out).expect("shape preserved")
}

#[inline]
fn neighbour(i: usize, delta: isize, n: usize) -> usize {
    (i as isize + delta).clamp(0, n as isize - 1) as usize
}

/// Each output pixel is `factor *` a convex combination of the 3x3 coarse
/// neighbourhood (edge-clamped) around its parent coarse pixel.
///
/// `coarse: [B, h, w]`, `weights: [B, 9, h*factor, w*factor]`, output
/// `[B, h*factor, w*factor]`. Weight index `j` addresses offset
/// `(j / 3 - 1, j % 3 - 1)`.
pub fn convex_upsample(coarse: &Tensor, weights: &Tensor, factor: usize) -> Result<Tensor> {
    if coarse.rank() != 3
        || weights.rank() != 4
        || weights.dim(0) != coarse.dim(0)
        || weights.dim(1) != 9
        || weights.dim(2) != coarse.dim(1) * factor
        || weights.dim(3) != coarse.dim(2) * factor
    {
        bail!(
            Dimension,
            "convex upsample: coarse {:?} incompatible with weights {:?} at factor {}",
            coarse.shape(),
            weights.shape(),
            factor
        );
    }
    let (b, h, w) = (coarse.dim(0), coarse.dim(1), coarse.dim(2));
    let (hf, wf) = (h * factor, w * factor);
    let plane = hf * wf;
    let mut out = vec![0.0; b * plane];
    let f = factor as f64;
    for bi in 0..b {
        let c = &coarse.data()[bi * h * w..(bi + 1) * h * w];
        let wt = &weights.data()[bi * 9 * plane..(bi + 1) * 9 * plane];
        for y in 0..hf {
            for x in 0..wf {
                let (cy, cx) = (y / factor, x / factor);
                let mut acc = 0.0;
                for j in 0..9 {
                    let ny = neighbour(cy, j as isize / 3 - 1, h);
                    let nx = neighbour(cx, j as isize % 3 - 1, w);
                    acc += wt[j * plane + y * wf + x] * c[ny * w + nx];
                }
                out[bi * plane + y * wf + x] = f * acc;
            }
        }
    }
    Tensor::new(&[b, hf, wf], out)
}

pub(crate) fn convex_upsample_backward(
    coarse: &Tensor,
    weights: &Tensor,
    g: &Tensor,
    factor: usize,
) -> (Tensor, Tensor) {
    let (b, h, w) = (coarse.dim(0), coarse.dim(1), coarse.dim(2));
    let (hf, wf) = (h * factor, w * factor);
    let plane = hf * wf;
    let f = factor as f64;
    let mut gc = Tensor::zeros(coarse.shape());
    let mut gw = Tensor::zeros(weights.shape());
    for bi in 0..b {
        let c = &coarse.data()[bi * h * w..(bi + 1) * h * w];
        let wt = &weights.data()[bi * 9 * plane..(bi + 1) * 9 * plane];
        for y in 0..hf {
            for x in 0..wf {
                let go = f * g.data()[bi * plane + y * wf + x];
                let (cy, cx) = (y / factor, x / factor);
                for j in 0..9 {
                    let ny = neighbour(cy, j as isize / 3 - 1, h);
                    let nx = neighbour(cx, j as isize % 3 - 1, w);
                    let wi = bi * 9 * plane + j * plane + y * wf + x;
                    gw.data_mut()[wi] = go * c[ny * w + nx];
                    gc.data_mut()[bi * h * w + ny * w + nx] += go * wt[j * plane + y * wf + x];
                }
            }
        }
    }
    (gc, gw)
}

#[inline]
fn huber(x: f64) -> f64 {
    let a = math::abs(x);
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub(crate) fn smooth_l1_value(pred: &Tensor, target: &Tensor, valid: &[bool]) -> Result<f64> {
    if pred.shape() != target.shape() || valid.len() != pred.len() {
        bail!(
            Dimension,
            "smooth_l1: prediction {:?}, target {:?}, mask {}",
            pred.shape(),
            target.shape(),
            valid.len()
        );
    }
    let mut n = 0usize;
    let mut acc = 0.0;
    for ((p, t), ok) in pred.data().iter().zip(target.data()).zip(valid) {
        if *ok {
            acc += huber(p - t);
            n += 1;
        }
    }
    if n == 0 {
        bail!(Contract, "smooth_l1 needs at least one valid pixel");
    }
    Ok(acc / n as f64)
}

pub(crate) fn smooth_l1_grad(pred: &Tensor, target: &Tensor, valid: &[bool], g: f64) -> Tensor {
    let n = valid.iter().filter(|v| **v).count().max(1) as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(valid)
        .map(|((p, t), ok)| {
            if !*ok {
                return 0.0;
            }
            let x = p - t;
            g * x.clamp(-1.0, 1.0) / n
        })
        .collect();
    Tensor::new(pred.shape(), data).expect("shape preserved")
}

// ---- public operations ----

/// Expected disparity index under a softmax over axis 1: `[B, H4, W4]`.
pub fn soft_argmax(c: &CostVolume) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(c.volume.clone());
    let d = soft_argmax_var(&mut g, v)?;
    Ok(g.value(d).clone())
}

pub fn soft_argmax_var(g: &mut Graph, volume: Var) -> Result<Var> {
    let shape = g.shape(volume);
    if shape.len() != 4 || shape[1] < 2 {
        bail!(Contract, "soft argmax needs [B, D4 >= 2, H, W], got {:?}", shape);
    }
    let p = g.softmax(volume, 1)?;
    g.index_expectation(p)
}

/// Softmaxed `[B, 9, H, W]` combination weights predicted from the guide image.
pub fn upsample_weights_var(g: &mut Graph, guide: Var, p: &HeadVars) -> Result<Var> {
    let h = g.conv2d(guide, p.guide1_w, 1, 1)?;
    let h = g.add_channel_bias(h, p.guide1_b)?;
    let h = g.leaky_relu(h, 0.1)?;
    let logits = g.conv2d(h, p.guide2_w, 1, 1)?;
    let logits = g.add_channel_bias(logits, p.guide2_b)?;
    g.softmax(logits, 1)
}

/// Full-resolution disparity `[B, H, W]` from quarter-resolution `d0`.
pub fn upsample_full_var(g: &mut Graph, d0: Var, guide: Var, p: &HeadVars) -> Result<Var> {
    let (ds, gs) = (g.shape(d0).to_vec(), g.shape(guide).to_vec());
    if ds.len() != 3
        || gs.len() != 4
        || gs[0] != ds[0]
        || gs[2] != ds[1] * UPSAMPLE
        || gs[3] != ds[2] * UPSAMPLE
    {
        bail!(
            Dimension,
            "guide {:?} is not {}x the coarse disparity {:?}",
            gs,
            UPSAMPLE,
            ds
        );
    }
    let w = upsample_weights_var(g, guide, p)?;
    g.convex_upsample(d0, w, UPSAMPLE)
}

pub fn upsample_full(d0: &Tensor, guide: &Tensor, p: &HeadParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = crate::params::ParamSet::bind(p, &mut g, false);
    let (d, gd) = (g.constant(d0.clone()), g.constant(guide.clone()));
    let out = upsample_full_var(&mut g, d, gd, &vars)?;
    Ok(g.value(out).clone())
}

/// Mean smooth-L1 of `pred - gt` over valid pixels.
pub fn smooth_l1(pred: &Tensor, gt: &Tensor, valid: &[bool]) -> Result<f64> {
    smooth_l1_value(pred, gt, valid)
}

fn stack_maps(maps: &[DisparityMap]) -> Result<(Tensor, Vec<bool>)> {
    let first = match maps.first() {
        Some(m) => m,
        None => bail!(Contract, "empty ground-truth batch"),
    };
    let (h, w) = (first.height(), first.width());
    let mut vals = Vec::with_capacity(maps.len() * h * w);
    let mut valid = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.height() != h || m.width() != w {
            bail!(Dimension, "ground-truth maps differ in size");
        }
        vals.extend_from_slice(m.values.data());
        valid.extend_from_slice(&m.valid);
    }
    Ok((Tensor::new(&[maps.len(), h, w], vals)?, valid))
}

/// `lambda0 * SL1(d0 - gt/4) + lambda1 * SL1(d1 - gt)` on the tape.
///
/// `d0: [B, H/4, W/4]` in quarter units, `d1: [B, H, W]`, one full-resolution
/// ground-truth map per batch item.
pub fn total_loss_var(
    g: &mut Graph,
    d0: Var,
    d1: Var,
    gt: &[DisparityMap],
    cfg: &LossConfig,
) -> Result<Var> {
    if cfg.lambda0 < 0.0 || cfg.lambda1 < 0.0 {
        bail!(Config, "loss weights must be non-negative");
    }
    let quarter: Vec<DisparityMap> = gt
        .iter()
        .map(DisparityMap::downsample_quarter)
        .collect::<Result<_>>()?;
    let (t0, v0) = stack_maps(&quarter)?;
    let (t1, v1) = stack_maps(gt)?;
    let l0 = g.smooth_l1(d0, &t0, &v0)?;
    let l1 = g.smooth_l1(d1, &t1, &v1)?;
    let l0 = g.scale(l0, cfg.lambda0)?;
    let l1 = g.scale(l1, cfg.lambda1)?;
    g.add(l0, l1)
}

pub fn total_loss(d0: &Tensor, d1: &Tensor, gt: &[DisparityMap], cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(d0.clone()), g.constant(d1.clone()));
    let l = total_loss_var(&mut g, a, b, gt, cfg)?;
    Ok(g.value(l).item())
}
