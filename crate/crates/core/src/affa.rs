//! Adaptive frequency-domain filtering attention.
//!
//! Features are split into low and high radial frequency bands with learnable
//! sigmoid masks, re-mixed per pixel by a softmax gate, and turned into a pair
//! of complementary attention maps (`a_low = 1 - a_high`).

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::fft::half_width;
use crate::graph::{Graph, Var};
use crate::init::{fan_in_uniform, leaky_gain, Rng};
use crate::math;
use crate::params::{param_set, ParamSet};
use crate::tensor::Tensor;

const SLOPE: f64 = 0.1;

/// Normalized radius of every half-spectrum bin, `[H, W/2 + 1]`.
///
/// Rows are folded (`min(u, H - u)`) so the DC bin sits at radius 0 without
/// shifting the spectrum; the even-extent Nyquist corner has radius 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialGrid {
    pub r: Tensor,
}

pub fn radial_grid(h: usize, w: usize) -> Result<RadialGrid> {
    if h < 2 || w < 2 {
        bail!(Dimension, "radial grid needs H, W >= 2, got {}x{}", h, w);
    }
    let wh = half_width(w);
    let (hh, wh2) = (h as f64 / 2.0, w as f64 / 2.0);
    let r = Tensor::from_fn(&[h, wh], |i| {
        let (u, v) = (i / wh, i % wh);
        let fu = u.min(h - u) as f64 / hh;
        let fv = v as f64 / wh2;
        math::sqrt((fu * fu + fv * fv) / 2.0)
    });
    Ok(RadialGrid { r })
}

param_set! {
    /// Thresholds and temperature are stored unconstrained:
    /// `tau = sigmoid(raw)`, `gamma = exp(raw)`.
    pub struct AffaParams / AffaVars {
        tau_low_raw,
        tau_high_raw,
        gamma_raw,
        gate_w,
        gate_b,
        attn1_w,
        attn1_b,
        attn2_w,
        attn2_b,
    }
}

fn logit(p: f64) -> f64 {
    math::ln(p / (1.0 - p))
}

impl AffaParams {
    /// `channels` is the feature width `C`; thresholds start at 0.5 and the
    /// temperature at 0.1.
    pub fn init(channels: usize, rng: &mut Rng) -> Self {
        let hidden = (channels / 2).max(1);
        Self {
            tau_low_raw: Tensor::scalar(logit(0.5)),
            tau_high_raw: Tensor::scalar(logit(0.5)),
            gamma_raw: Tensor::scalar(math::ln(0.1)),
            gate_w: fan_in_uniform(&[2, 2 * channels, 1, 1], 2 * channels, 1.0, rng),
            gate_b: Tensor::zeros(&[2]),
            attn1_w: fan_in_uniform(&[hidden, channels, 3, 3], 9 * channels, leaky_gain(SLOPE), rng),
            attn1_b: Tensor::zeros(&[hidden]),
            attn2_w: fan_in_uniform(&[1, hidden, 3, 3], 9 * hidden, 1.0, rng),
            attn2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn set_thresholds(&mut self, tau_low: f64, tau_high: f64, gamma: f64) -> Result<()> {
        let open = |t: f64| t > 0.0 && t < 1.0;
        if !open(tau_low) || !open(tau_high) || !(gamma > 0.0 && gamma.is_finite()) {
            bail!(
                Config,
                "need thresholds in (0, 1) and a positive temperature, got {}, {}, {}",
                tau_low,
                tau_high,
                gamma
            );
        }
        self.tau_low_raw = Tensor::scalar(logit(tau_low));
        self.tau_high_raw = Tensor::scalar(logit(tau_high));
        self.gamma_raw = Tensor::scalar(math::ln(gamma));
        Ok(())
    }

    pub fn tau_low(&self) -> f64 {
        math::sigmoid(self.tau_low_raw.item())
    }

    pub fn tau_high(&self) -> f64 {
        math::sigmoid(self.tau_high_raw.item())
    }

    pub fn gamma(&self) -> f64 {
        math::exp(self.gamma_raw.item())
    }

    pub fn channels(&self) -> usize {
        self.attn1_w.dim(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    /// `[B, 1, H, W]`, strictly inside (0, 1).
    pub a_high: Tensor,
    /// `1 - a_high`.
    pub a_low: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub a_high: Var,
    pub a_low: Var,
}

/// `(m_low, m_high)`, each `[H, W/2 + 1]`.
pub fn soft_masks_var(g: &mut Graph, grid: &RadialGrid, p: &AffaVars) -> Result<(Var, Var)> {
    let shape = grid.r.shape().to_vec();
    let r = g.constant(grid.r.clone());
    let tau_l = g.sigmoid(p.tau_low_raw)?;
    let tau_h = g.sigmoid(p.tau_high_raw)?;
    let gamma = g.exp(p.gamma_raw)?;
    let tau_l = g.broadcast_scalar(tau_l, &shape)?;
    let tau_h = g.broadcast_scalar(tau_h, &shape)?;
    let gamma = g.broadcast_scalar(gamma, &shape)?;

    let lo = g.sub(tau_l, r)?;
    let lo = g.div(lo, gamma)?;
    let m_low = g.sigmoid(lo)?;
    let hi = g.sub(r, tau_h)?;
    let hi = g.div(hi, gamma)?;
    let m_high = g.sigmoid(hi)?;
    Ok((m_low, m_high))
}

/// `(x_low, x_high)` band-limited copies of `x: [B, C, H, W]`.
pub fn decompose_var(g: &mut Graph, x: Var, m_low: Var, m_high: Var) -> Result<(Var, Var)> {
    let w = match g.shape(x).last() {
        Some(&w) => w,
        None => bail!(Dimension, "decompose needs a spatial input"),
    };
    let spec = g.rfft2(x)?;
    let lo = g.spectral_mask(spec, m_low)?;
    let hi = g.spectral_mask(spec, m_high)?;
    Ok((g.irfft2(lo, w)?, g.irfft2(hi, w)?))
}

/// Per-pixel softmax gate over the two bands.
pub fn fuse_gate_var(g: &mut Graph, x_low: Var, x_high: Var, p: &AffaVars) -> Result<Var> {
    if g.shape(x_low) != g.shape(x_high) {
        bail!(Dimension, "band shapes differ");
    }
    let z = g.concat(&[x_low, x_high], 1)?;
    let logits = g.conv2d(z, p.gate_w, 1, 0)?;
    let logits = g.add_channel_bias(logits, p.gate_b)?;
    let gate = g.softmax(logits, 1)?;
    let g_low = g.slice(gate, 1, 0, 1)?;
    let g_high = g.slice(gate, 1, 1, 1)?;
    let lo = g.mul_channel(x_low, g_low)?;
    let hi = g.mul_channel(x_high, g_high)?;
    g.add(lo, hi)
}

pub fn attention_maps_var(g: &mut Graph, x_f: Var, p: &AffaVars) -> Result<AttentionVars> {
    let h = g.conv2d(x_f, p.attn1_w, 1, 1)?;
    let h = g.add_channel_bias(h, p.attn1_b)?;
    let h = g.leaky_relu(h, SLOPE)?;
    let logit = g.conv2d(h, p.attn2_w, 1, 1)?;
    let logit = g.add_channel_bias(logit, p.attn2_b)?;
    let a_high = g.sigmoid(logit)?;
    let a_low = g.one_minus(a_high)?;
    Ok(AttentionVars { a_high, a_low })
}

/// Full module on `x: [B, C, H, W]`.
pub fn affa_forward_var(g: &mut Graph, x: Var, p: &AffaVars) -> Result<AttentionVars> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        bail!(Dimension, "AFFA expects [B, C, H, W], got {:?}", s);
    }
    let grid = radial_grid(s[2], s[3])?;
    let (m_low, m_high) = soft_masks_var(g, &grid, p)?;
    let (x_low, x_high) = decompose_var(g, x, m_low, m_high)?;
    let x_f = fuse_gate_var(g, x_low, x_high, p)?;
    attention_maps_var(g, x_f, p)
}

pub fn soft_masks(grid: &RadialGrid, p: &AffaParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let v = p.bind(&mut g, false);
    let (lo, hi) = soft_masks_var(&mut g, grid, &v)?;
    Ok((g.value(lo).clone(), g.value(hi).clone()))
}

pub fn decompose(x: &Tensor, m_low: &Tensor, m_high: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (lo, hi) = (g.constant(m_low.clone()), g.constant(m_high.clone()));
    let (a, b) = decompose_var(&mut g, xv, lo, hi)?;
    Ok((g.value(a).clone(), g.value(b).clone()))
}

pub fn fuse_gate(x_low: &Tensor, x_high: &Tensor, p: &AffaParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = p.bind(&mut g, false);
    let (a, b) = (g.constant(x_low.clone()), g.constant(x_high.clone()));
    let out = fuse_gate_var(&mut g, a, b, &v)?;
    Ok(g.value(out).clone())
}

pub fn attention_maps(x_f: &Tensor, p: &AffaParams) -> Result<AttentionMaps> {
    let mut g = Graph::new();
    let v = p.bind(&mut g, false);
    let x = g.constant(x_f.clone());
    let a = attention_maps_var(&mut g, x, &v)?;
    Ok(AttentionMaps {
        a_high: g.value(a.a_high).clone(),
        a_low: g.value(a.a_low).clone(),
    })
}

pub fn affa_forward(x: &Tensor, p: &AffaParams) -> Result<AttentionMaps> {
    let mut g = Graph::new();
    let v = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let a = affa_forward_var(&mut g, xv, &v)?;
    Ok(AttentionMaps {
        a_high: g.value(a.a_high).clone(),
        a_low: g.value(a.a_low).clone(),
    })
}

/// `sum(x_high^2) / sum(x^2)`.
pub fn high_band_energy_ratio(x: &Tensor, x_high: &Tensor) -> f64 {
    let e = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
    e(x_high) / e(x)
}

/// Mask values paired with their radii, sorted by radius.
pub fn by_radius(grid: &RadialGrid, m: &Tensor) -> Vec<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = grid
        .r
        .data()
        .iter()
        .copied()
        .zip(m.data().iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs
}
