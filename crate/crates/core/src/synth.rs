//! Synthetic rectified stereo pairs with exact ground truth.
//!
//! A right image of per-pixel noise is drawn first; the left image samples it
//! at `x - d(x, y)` with linear interpolation, so every valid pixel satisfies
//! `right(x - gt, y) == left(x, y)` up to interpolation. Disparity is
//! Gaussian-blurred uniform noise rescaled to `[0, dmax]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::check_extents;
use crate::error::{bail, Result};
use crate::head::DisparityMap;
use crate::init::Rng;
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    pub gt: DisparityMap,
}

/// Clamp-to-edge separable Gaussian blur of an `[h, w]` plane.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = math::ceil(3.0 * sigma) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let norm: f64 = taps.iter().sum();
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, weight) in taps.iter().enumerate() {
                    let off = t as isize - radius;
                    let (sy, sx) = if along_rows {
                        (y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((y as isize + off).clamp(0, h as isize - 1) as usize, x)
                    };
                    acc += weight * src[sy * w + sx];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Smooth field in `[0, dmax]`; a constant field collapses to zero.
///
/// Noise is drawn on a canvas padded by the blur support and cropped, so edge
/// pixels are as variable as interior ones.
pub fn disparity_field(rng: &mut Rng, h: usize, w: usize, dmax: f64) -> Tensor {
    let sigma = w as f64 / 16.0;
    let pad = math::ceil(3.0 * sigma) as usize;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let noise: Vec<f64> = (0..ph * pw).map(|_| rng.uniform(0.0, 1.0)).collect();
    let canvas = gaussian_blur(&noise, ph, pw, sigma);
    let smooth: Vec<f64> = (0..h * w).map(|i| canvas[(i / w + pad) * pw + i % w + pad]).collect();
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = smooth
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span * dmax } else { 0.0 })
        .collect();
    Tensor::new(&[h, w], data).expect("field extent")
}

/// Render the left view of `right: [3, H, W]` under `disp: [H, W]`.
///
/// Pixels whose source column falls outside the frame are marked invalid and
/// filled with fresh noise from `rng`.
pub fn render_pair(right: &Tensor, disp: &Tensor, rng: &mut Rng) -> Result<StereoSample> {
    let (h, w) = match (right.shape(), disp.shape()) {
        ([3, h, w], [dh, dw]) if h == dh && w == dw => (*h, *w),
        _ => bail!(
            Dimension,
            "right image {:?} and disparity {:?} do not align",
            right.shape(),
            disp.shape()
        ),
    };
    let mut left = Tensor::zeros(&[3, h, w]);
    let mut valid = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            let src = x as f64 - disp.data()[y * w + x];
            let inside = src >= 0.0;
            valid[y * w + x] = inside;
            for c in 0..3 {
                let v = if inside {
                    let x0 = math::floor(src) as usize;
                    let t = src - x0 as f64;
                    let row = &right.data()[(c * h + y) * w..(c * h + y + 1) * w];
                    if t == 0.0 {
                        row[x0]
                    } else {
                        (1.0 - t) * row[x0] + t * row[x0 + 1]
                    }
                } else {
                    rng.uniform(0.0, 1.0)
                };
                left.data_mut()[(c * h + y) * w + x] = v;
            }
        }
    }
    let gt = DisparityMap::new(disp.clone(), valid)?;
    Ok(StereoSample { left, right: right.clone(), gt })
}

fn check_dmax(w: usize, dmax: f64) -> Result<()> {
    if !(dmax.is_finite() && dmax >= 0.0 && dmax <= w as f64 / 4.0) {
        bail!(Config, "dmax {} must lie in [0, W/4 = {}]", dmax, w / 4);
    }
    Ok(())
}

/// Deterministic sample for `seed`.
pub fn gen_synthetic_pair(seed: u64, h: usize, w: usize, dmax: f64) -> Result<StereoSample> {
    check_extents(h, w)?;
    check_dmax(w, dmax)?;
    let mut rng = Rng::new(seed);
    let right = Tensor::from_fn(&[3, h, w], |_| rng.uniform(0.0, 1.0));
    let disp = disparity_field(&mut rng, h, w, dmax);
    render_pair(&right, &disp, &mut rng)
}

/// `count` samples whose seeds are derived from `seed` and `stream`, so a
/// training and a held-out set drawn from the same seed never overlap.
pub fn gen_dataset(seed: u64, stream: u64, count: usize, h: usize, w: usize, dmax: f64) -> Result<Vec<StereoSample>> {
    let mut seeds = Rng::derived(seed, stream);
    (0..count)
        .map(|_| gen_synthetic_pair(seeds.next_u64(), h, w, dmax))
        .collect()
}
