//! Weight-shared multi-scale feature extractor.
//!
//! Five stride-2 3x3 convolutions reach 1/32 resolution; three 4x4 stride-2
//! transposed convolutions walk back up to 1/4, each merged with the lateral
//! feature of matching scale through a 3x3 convolution.

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::init::{fan_in_uniform, leaky_gain, Rng};
use crate::params::{param_set, ParamSet};
use crate::tensor::Tensor;

/// Channel widths of the five downsampling stages.
pub const STAGE_WIDTHS: [usize; 5] = [16, 24, 32, 64, 96];
/// Channels of the 1/4, 1/8 and 1/16 outputs.
pub const F4_CHANNELS: usize = 48;
pub const F8_CHANNELS: usize = 48;
pub const F16_CHANNELS: usize = 64;

const SLOPE: f64 = 0.1;

param_set! {
    pub struct EncoderParams / EncoderVars {
        s1_w, s1_b, s2_w, s2_b, s3_w, s3_b, s4_w, s4_b, s5_w, s5_b,
        up16_w, up16_b, fuse16_w, fuse16_b,
        up8_w, up8_b, fuse8_w, fuse8_b,
        up4_w, up4_b, fuse4_w, fuse4_b,
    }
}

impl EncoderParams {
    pub fn init(rng: &mut Rng) -> Self {
        let [c1, c2, c3, c4, c5] = STAGE_WIDTHS;
        let conv = |o: usize, i: usize, k: usize, rng: &mut Rng| fan_in_uniform(&[o, i, k, k], i * k * k, leaky_gain(SLOPE), rng);
        // transposed weights are [Cin, Cout, k, k]; each output sees Cin * (k/2)^2 taps
        let deconv = |i: usize, o: usize, rng: &mut Rng| fan_in_uniform(&[i, o, 4, 4], i * 4, leaky_gain(SLOPE), rng);
        let (u16, u8, u4) = (64, 32, 24);
        Self {
            s1_w: conv(c1, 3, 3, rng),
            s1_b: Tensor::zeros(&[c1]),
            s2_w: conv(c2, c1, 3, rng),
            s2_b: Tensor::zeros(&[c2]),
            s3_w: conv(c3, c2, 3, rng),
            s3_b: Tensor::zeros(&[c3]),
            s4_w: conv(c4, c3, 3, rng),
            s4_b: Tensor::zeros(&[c4]),
            s5_w: conv(c5, c4, 3, rng),
            s5_b: Tensor::zeros(&[c5]),
            up16_w: deconv(c5, u16, rng),
            up16_b: Tensor::zeros(&[u16]),
            fuse16_w: conv(F16_CHANNELS, u16 + c4, 3, rng),
            fuse16_b: Tensor::zeros(&[F16_CHANNELS]),
            up8_w: deconv(F16_CHANNELS, u8, rng),
            up8_b: Tensor::zeros(&[u8]),
            fuse8_w: conv(F8_CHANNELS, u8 + c3, 3, rng),
            fuse8_b: Tensor::zeros(&[F8_CHANNELS]),
            up4_w: deconv(F8_CHANNELS, u4, rng),
            up4_b: Tensor::zeros(&[u4]),
            fuse4_w: conv(F4_CHANNELS, u4 + c2, 3, rng),
            fuse4_b: Tensor::zeros(&[F4_CHANNELS]),
        }
    }
}

/// Features of one image batch at three scales.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub f4: Tensor,
    pub f8: Tensor,
    pub f16: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub f4: Var,
    pub f8: Var,
    pub f16: Var,
}

/// Reject extents the 1/32 stage cannot represent exactly.
pub fn check_extents(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        let ph = h.max(32).div_ceil(32) * 32;
        let pw = w.max(32).div_ceil(32) * 32;
        bail!(
            Dimension,
            "image extents {}x{} must be multiples of 32 (pad to {}x{})",
            h,
            w,
            ph,
            pw
        );
    }
    Ok(())
}

fn conv(g: &mut Graph, x: Var, w: Var, b: Var, stride: usize, act: bool) -> Result<Var> {
    let y = g.conv2d(x, w, stride, 1)?;
    let y = g.add_channel_bias(y, b)?;
    if act {
        g.leaky_relu(y, SLOPE)
    } else {
        Ok(y)
    }
}

fn up(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.conv_transpose2d(x, w, 2, 1)?;
    let y = g.add_channel_bias(y, b)?;
    g.leaky_relu(y, SLOPE)
}

/// Pyramid of an image batch `[B, 3, H, W]`.
pub fn encode_var(g: &mut Graph, images: Var, p: &EncoderVars) -> Result<PyramidVars> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 {
        bail!(Dimension, "encoder expects [B, 3, H, W], got {:?}", s);
    }
    check_extents(s[2], s[3])?;
    let x2 = conv(g, images, p.s1_w, p.s1_b, 2, true)?;
    let x4 = conv(g, x2, p.s2_w, p.s2_b, 2, true)?;
    let x8 = conv(g, x4, p.s3_w, p.s3_b, 2, true)?;
    let x16 = conv(g, x8, p.s4_w, p.s4_b, 2, true)?;
    let x32 = conv(g, x16, p.s5_w, p.s5_b, 2, true)?;

    let u16 = up(g, x32, p.up16_w, p.up16_b)?;
    let m16 = g.concat(&[u16, x16], 1)?;
    let f16 = conv(g, m16, p.fuse16_w, p.fuse16_b, 1, true)?;

    let u8 = up(g, f16, p.up8_w, p.up8_b)?;
    let m8 = g.concat(&[u8, x8], 1)?;
    let f8 = conv(g, m8, p.fuse8_w, p.fuse8_b, 1, true)?;

    let u4 = up(g, f8, p.up4_w, p.up4_b)?;
    let m4 = g.concat(&[u4, x4], 1)?;
    // linear output: correlation wants signed features
    let f4 = conv(g, m4, p.fuse4_w, p.fuse4_b, 1, false)?;
    Ok(PyramidVars { f4, f8, f16 })
}

/// Left and right pyramids from one shared parameter set.
pub fn encode_pair_var(
    g: &mut Graph,
    left: Var,
    right: Var,
    p: &EncoderVars,
) -> Result<(PyramidVars, PyramidVars)> {
    if g.shape(left) != g.shape(right) {
        bail!(
            Dimension,
            "left {:?} and right {:?} differ",
            g.shape(left),
            g.shape(right)
        );
    }
    let b = g.shape(left)[0];
    let both = g.concat(&[left, right], 0)?;
    let pyr = encode_var(g, both, p)?;
    let mut halves = [None, None];
    for (i, half) in halves.iter_mut().enumerate() {
        *half = Some(PyramidVars {
            f4: g.slice(pyr.f4, 0, i * b, b)?,
            f8: g.slice(pyr.f8, 0, i * b, b)?,
            f16: g.slice(pyr.f16, 0, i * b, b)?,
        });
    }
    Ok((halves[0].unwrap(), halves[1].unwrap()))
}

pub fn extract(
    left: &Tensor,
    right: &Tensor,
    p: &EncoderParams,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
    let (pl, pr) = encode_pair_var(&mut g, l, r, &vars)?;
    let get = |g: &Graph, v: PyramidVars| FeaturePyramid {
        f4: g.value(v.f4).clone(),
        f8: g.value(v.f8).clone(),
        f16: g.value(v.f16).clone(),
    };
    Ok((get(&g, pl), get(&g, pr)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, grad_check};

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| rng.uniform(0.0, 1.0))
    }

    #[test]
    fn pyramid_extents() {
        let p = EncoderParams::init(&mut Rng::new(0));
        let (l, _) = extract(&image(1, 64, 128), &image(2, 64, 128), &p).unwrap();
        assert_eq!(l.f4.shape(), &[1, F4_CHANNELS, 16, 32]);
        assert_eq!(l.f8.shape(), &[1, F8_CHANNELS, 8, 16]);
        assert_eq!(l.f16.shape(), &[1, F16_CHANNELS, 4, 8]);
    }

    #[test]
    fn identical_inputs_give_identical_pyramids() {
        let p = EncoderParams::init(&mut Rng::new(0));
        let x = image(3, 32, 64);
        let (l, r) = extract(&x, &x, &p).unwrap();
        assert_eq!(l, r);
    }

    #[test]
    fn swapping_inputs_swaps_outputs() {
        let p = EncoderParams::init(&mut Rng::new(0));
        let (a, b) = (image(4, 32, 32), image(5, 32, 32));
        let (la, rb) = extract(&a, &b, &p).unwrap();
        let (lb, ra) = extract(&b, &a, &p).unwrap();
        assert_eq!(la, ra);
        assert_eq!(rb, lb);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let x = image(6, 32, 64);
        let a = extract(&x, &x, &EncoderParams::init(&mut Rng::new(42))).unwrap();
        let b = extract(&x, &x, &EncoderParams::init(&mut Rng::new(42))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extents_must_be_multiples_of_32() {
        let p = EncoderParams::init(&mut Rng::new(0));
        let err = extract(&image(1, 48, 64), &image(1, 48, 64), &p).unwrap_err();
        match err {
            crate::Error::Dimension(msg) => assert!(msg.contains("64x64"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gradients_reach_every_parameter_and_the_input() {
        // bias probes shift whole channels; a wider step crosses activation kinks
        let p = EncoderParams::init(&mut Rng::new(7));
        let (l, r) = (image(8, 32, 32), image(9, 32, 32));
        let mut rng = Rng::new(10);
        let probe = Tensor::from_fn(&[1, F4_CHANNELS, 8, 8], |_| rng.uniform(-1.0, 1.0));
        let reduce = |g: &mut Graph, pl: PyramidVars, pr: PyramidVars| -> Result<Var> {
            let w = g.constant(probe.clone());
            let a = g.mul(pl.f4, w)?;
            let b = g.mul(pr.f4, pl.f4)?;
            let s8 = g.sum(pl.f8)?;
            let s16 = g.sum(pr.f16)?;
            let (a, b) = (g.sum(a)?, g.sum(b)?);
            let t = g.add(a, b)?;
            let t = g.add(t, s8)?;
            g.add(t, s16)
        };
        let reports = check_params(
            &p,
            |g, v| {
                let (lv, rv) = (g.constant(l.clone()), g.constant(r.clone()));
                let (pl, pr) = encode_pair_var(g, lv, rv, v)?;
                reduce(g, pl, pr)
            },
            1e-7,
            12,
        )
        .unwrap();
        for rep in &reports {
            assert!(rep.max_rel_err <= 1e-4, "{:?}", rep);
        }
        let err = grad_check(
            |g, x| {
                let v = p.bind(g, false);
                let rv = g.constant(r.clone());
                let (pl, pr) = encode_pair_var(g, x, rv, &v)?;
                reduce(g, pl, pr)
            },
            &l,
            1e-7,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
