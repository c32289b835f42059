//! 2D real FFT over the two trailing axes.
//!
//! Forward is unnormalized, the inverse carries the `1/(H*W)` factor. Only the
//! non-redundant half spectrum (`W/2 + 1` columns) is stored. Power-of-two
//! lengths use an iterative radix-2 transform, anything else a direct DFT.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor;

/// Half-spectrum of a real signal.
///
/// Logical shape `[.., H, W/2 + 1]`; stored as a real tensor with a trailing
/// axis of length 2 holding interleaved (re, im) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    inner: Tensor,
}

impl ComplexTensor {
    pub fn from_interleaved(inner: Tensor) -> Result<Self> {
        if inner.rank() < 3 || *inner.shape().last().unwrap() != 2 {
            bail!(
                Dimension,
                "complex storage needs a trailing axis of 2, got {:?}",
                inner.shape()
            );
        }
        Ok(Self { inner })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let mut s = shape.to_vec();
        s.push(2);
        Self {
            inner: Tensor::zeros(&s),
        }
    }

    /// Logical (complex) shape.
    pub fn shape(&self) -> &[usize] {
        let s = self.inner.shape();
        &s[..s.len() - 1]
    }

    pub fn get(&self, index: &[usize]) -> (f64, f64) {
        let o = self.flat(index);
        (self.inner.data()[o], self.inner.data()[o + 1])
    }

    pub fn set(&mut self, index: &[usize], value: (f64, f64)) {
        let o = self.flat(index);
        let d = self.inner.data_mut();
        d[o] = value.0;
        d[o + 1] = value.1;
    }

    fn flat(&self, index: &[usize]) -> usize {
        let shape = self.shape();
        assert_eq!(index.len(), shape.len());
        2 * index.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn as_interleaved(&self) -> &Tensor {
        &self.inner
    }

    pub fn into_interleaved(self) -> Tensor {
        self.inner
    }
}

/// Half-spectrum width for a real signal of width `w`.
#[inline]
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Multiplicity of half-spectrum column `l` in the full spectrum.
#[inline]
pub fn hermitian_weight(l: usize, w: usize) -> f64 {
    if l == 0 || (w.is_multiple_of(2) && l == w / 2) {
        1.0
    } else {
        2.0
    }
}

pub fn rfft2(x: &Tensor) -> Result<ComplexTensor> {
    let (lead, h, w) = split_plane(x.shape())?;
    if h < 2 || w < 2 {
        bail!(Dimension, "rfft2 needs H, W >= 2, got {}x{}", h, w);
    }
    let wh = half_width(w);
    let planes = x.len() / (h * w);
    let mut out = vec![0.0; planes * h * wh * 2];
    let mut row = vec![0.0; 2 * w];
    let mut col = vec![0.0; 2 * h];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * wh * 2..(p + 1) * h * wh * 2];
        for m in 0..h {
            for n in 0..w {
                row[2 * n] = src[m * w + n];
                row[2 * n + 1] = 0.0;
            }
            fft_inplace(&mut row, false);
            dst[m * wh * 2..(m + 1) * wh * 2].copy_from_slice(&row[..2 * wh]);
        }
        columns(dst, h, wh, &mut col, false);
    }
    let mut shape = lead.to_vec();
    shape.extend_from_slice(&[h, wh, 2]);
    Ok(ComplexTensor {
        inner: Tensor::new(&shape, out)?,
    })
}

/// Inverse of [`rfft2`] for a real signal of width `out_width`.
///
/// For an arbitrary (not necessarily Hermitian) half spectrum `Y` this is the
/// real-linear map `x[m,n] = 1/(HW) * sum_{k,l} w_l * Re(Y[k,l] e^{i theta})`
/// with `w_l` from [`hermitian_weight`].
pub fn irfft2(f: &ComplexTensor, out_width: usize) -> Result<Tensor> {
    let shape = f.shape();
    let (lead, h, wh) = split_plane(shape)?;
    if out_width < 2 || half_width(out_width) != wh {
        bail!(
            Dimension,
            "output width {} inconsistent with half-spectrum width {}",
            out_width,
            wh
        );
    }
    let w = out_width;
    let planes = f.inner.len() / (h * wh * 2);
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; planes * h * w];
    let mut tmp = vec![0.0; h * wh * 2];
    let mut col = vec![0.0; 2 * h];
    let mut row = vec![0.0; 2 * w];
    for p in 0..planes {
        tmp.copy_from_slice(&f.inner.data()[p * h * wh * 2..(p + 1) * h * wh * 2]);
        columns(&mut tmp, h, wh, &mut col, true);
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for m in 0..h {
            let z = &tmp[m * wh * 2..(m + 1) * wh * 2];
            for l in 0..w {
                let (re, im) = if l < wh {
                    let imag = if hermitian_weight(l, w) == 1.0 { 0.0 } else { z[2 * l + 1] };
                    (z[2 * l], imag)
                } else {
                    (z[2 * (w - l)], -z[2 * (w - l) + 1])
                };
                row[2 * l] = re;
                row[2 * l + 1] = im;
            }
            fft_inplace(&mut row, true);
            for n in 0..w {
                dst[m * w + n] = row[2 * n] * norm;
            }
        }
    }
    let mut oshape = lead.to_vec();
    oshape.extend_from_slice(&[h, w]);
    Tensor::new(&oshape, out)
}

/// Adjoint of [`rfft2`]: maps a cotangent on the half spectrum to one on the
/// real input.
pub(crate) fn rfft2_adjoint(g: &ComplexTensor, w: usize) -> Result<Tensor> {
    let shape = g.shape();
    let h = shape[shape.len() - 2];
    let wh = shape[shape.len() - 1];
    let mut scaled = g.clone();
    let hw = (h * w) as f64;
    for (i, pair) in scaled.inner.data_mut().chunks_exact_mut(2).enumerate() {
        let s = hw / hermitian_weight(i % wh, w);
        pair[0] *= s;
        pair[1] *= s;
    }
    irfft2(&scaled, w)
}

/// Adjoint of [`irfft2`].
pub(crate) fn irfft2_adjoint(g: &Tensor) -> Result<ComplexTensor> {
    let w = *g.shape().last().unwrap();
    let h = g.shape()[g.rank() - 2];
    let wh = half_width(w);
    let mut f = rfft2(g)?;
    let hw = (h * w) as f64;
    for (i, pair) in f.inner.data_mut().chunks_exact_mut(2).enumerate() {
        let s = hermitian_weight(i % wh, w) / hw;
        pair[0] *= s;
        pair[1] *= s;
    }
    Ok(f)
}

fn split_plane(shape: &[usize]) -> Result<(&[usize], usize, usize)> {
    if shape.len() < 2 {
        bail!(Dimension, "need at least 2 axes, got {:?}", shape);
    }
    let r = shape.len();
    Ok((&shape[..r - 2], shape[r - 2], shape[r - 1]))
}

// Transform every column of an interleaved `h x wh` complex plane.
fn columns(plane: &mut [f64], h: usize, wh: usize, col: &mut [f64], inverse: bool) {
    for l in 0..wh {
        for m in 0..h {
            col[2 * m] = plane[(m * wh + l) * 2];
            col[2 * m + 1] = plane[(m * wh + l) * 2 + 1];
        }
        fft_inplace(col, inverse);
        for m in 0..h {
            plane[(m * wh + l) * 2] = col[2 * m];
            plane[(m * wh + l) * 2 + 1] = col[2 * m + 1];
        }
    }
}

/// Unnormalized complex DFT of an interleaved buffer; `inverse` flips the
/// exponent sign.
pub fn fft_inplace(buf: &mut [f64], inverse: bool) {
    let n = buf.len() / 2;
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        naive_dft(buf, inverse);
    }
}

fn radix2(buf: &mut [f64], inverse: bool) {
    let n = buf.len() / 2;
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(2 * i, 2 * j);
            buf.swap(2 * i + 1, 2 * j + 1);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let (s, c) = math::sin_cos(sign * 2.0 * PI / len as f64);
        let half = len / 2;
        for start in (0..n).step_by(len) {
            let (mut wr, mut wi) = (1.0, 0.0);
            for k in 0..half {
                let a = 2 * (start + k);
                let b = 2 * (start + k + half);
                let tr = buf[b] * wr - buf[b + 1] * wi;
                let ti = buf[b] * wi + buf[b + 1] * wr;
                buf[b] = buf[a] - tr;
                buf[b + 1] = buf[a + 1] - ti;
                buf[a] += tr;
                buf[a + 1] += ti;
                let nwr = wr * c - wi * s;
                wi = wr * s + wi * c;
                wr = nwr;
            }
        }
        len <<= 1;
    }
}

fn naive_dft(buf: &mut [f64], inverse: bool) {
    let n = buf.len() / 2;
    let sign = if inverse { 1.0 } else { -1.0 };
    let src: Vec<f64> = buf.to_vec();
    for k in 0..n {
        let (mut re, mut im) = (0.0, 0.0);
        for t in 0..n {
            // reduce k*t mod n to keep the angle small
            let (s, c) = math::sin_cos(sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64);
            re += src[2 * t] * c - src[2 * t + 1] * s;
            im += src[2 * t] * s + src[2 * t + 1] * c;
        }
        buf[2 * k] = re;
        buf[2 * k + 1] = im;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::Rng;

    // Direct O(H^2 W^2) double sum, independent of the row/column factorization.
    fn dft_oracle(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
        let wh = half_width(w);
        let mut out = Vec::new();
        for k in 0..h {
            for l in 0..wh {
                let (mut re, mut im) = (0.0, 0.0);
                for m in 0..h {
                    for n in 0..w {
                        let theta =
                            2.0 * PI * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                        re += x[m * w + n] * theta.cos();
                        im -= x[m * w + n] * theta.sin();
                    }
                }
                out.push((re, im));
            }
        }
        out
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn constant_image_has_only_dc() {
        let x = Tensor::full(&[4, 4], 2.5);
        let f = rfft2(&x).unwrap();
        assert_eq!(f.shape(), &[4, 3]);
        for k in 0..4 {
            for l in 0..3 {
                let (re, im) = f.get(&[k, l]);
                let want = if k == 0 && l == 0 { 16.0 * 2.5 } else { 0.0 };
                assert!((re - want).abs() < 1e-12 && im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_is_flat() {
        let mut x = Tensor::zeros(&[4, 6]);
        x.set(&[0, 0], 1.0);
        let f = rfft2(&x).unwrap();
        for v in f.as_interleaved().data().chunks_exact(2) {
            assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft() {
        for (h, w) in [(8, 8), (6, 5), (4, 12), (3, 7)] {
            let x = random(&[h, w], (h * 100 + w) as u64);
            let f = rfft2(&x).unwrap();
            let want = dft_oracle(x.data(), h, w);
            let got: Vec<_> = f.as_interleaved().data().chunks_exact(2).collect();
            for (g, o) in got.iter().zip(&want) {
                assert!((g[0] - o.0).abs() <= 1e-9 && (g[1] - o.1).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn inverse_cases() {
        let zero = ComplexTensor::zeros(&[4, 3]);
        assert_eq!(irfft2(&zero, 4).unwrap(), Tensor::zeros(&[4, 4]));
        let mut dc = ComplexTensor::zeros(&[4, 3]);
        dc.set(&[0, 0], (16.0 * 0.75, 0.0));
        let x = irfft2(&dc, 4).unwrap();
        assert!(x.max_abs_diff(&Tensor::full(&[4, 4], 0.75)) < 1e-12);
        assert!(irfft2(&dc, 6).is_err());
        // both widths 4 and 5 share a half width of 3
        assert!(irfft2(&dc, 5).is_ok());
    }

    #[test]
    fn degenerate_extents_rejected() {
        assert!(rfft2(&Tensor::zeros(&[1, 8])).is_err());
        assert!(rfft2(&Tensor::zeros(&[8, 1])).is_err());
        assert!(rfft2(&Tensor::zeros(&[8])).is_err());
    }

    #[test]
    fn round_trip_batched() {
        let x = random(&[2, 3, 8, 6], 7);
        let f = rfft2(&x).unwrap();
        assert_eq!(f.shape(), &[2, 3, 8, 4]);
        let y = irfft2(&f, 6).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <rfft2(x), g> == <x, rfft2_adjoint(g)> for real inner products
        for (h, w) in [(4, 4), (5, 7), (8, 6)] {
            let x = random(&[h, w], 11);
            let wh = half_width(w);
            let g = ComplexTensor::from_interleaved(random(&[h, wh, 2], 12)).unwrap();
            let lhs: f64 = rfft2(&x)
                .unwrap()
                .as_interleaved()
                .data()
                .iter()
                .zip(g.as_interleaved().data())
                .map(|(a, b)| a * b)
                .sum();
            let ax = rfft2_adjoint(&g, w).unwrap();
            let rhs: f64 = x.data().iter().zip(ax.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

            let y = random(&[h, w], 13);
            let lhs: f64 = irfft2(&g, w)
                .unwrap()
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| a * b)
                .sum();
            let ay = irfft2_adjoint(&y).unwrap();
            let rhs: f64 = g
                .as_interleaved()
                .data()
                .iter()
                .zip(ay.as_interleaved().data())
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }
}
