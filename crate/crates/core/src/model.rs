//! The assembled network: encoder, group-wise volume, AFFA maps, AAHF fusion,
//! soft argmax and convex upsampling.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use crate::aahf::{aahf_forward_var, split_volume_var, AahfParams, AahfVars, AttentionMode};
use crate::affa::{affa_forward_var, AffaParams, AffaVars, AttentionVars};
use crate::cost_volume::build_gwc_var;
use crate::encoder::{check_extents, encode_pair_var, EncoderParams, EncoderVars, F4_CHANNELS};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::head::{soft_argmax_var, total_loss_var, upsample_full_var, DisparityMap, HeadParams, HeadVars, LossConfig, UPSAMPLE};
use crate::init::Rng;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input extents the attention projections are sized for.
    pub height: usize,
    pub width: usize,
    /// Largest representable disparity in full-resolution pixels; a multiple
    /// of 4.
    pub max_disp: usize,
    /// Correlation groups; must divide the 1/4 feature width.
    pub groups: usize,
    /// Rank of the token projections, clamped to the token count.
    pub rank: usize,
    pub d_attn: usize,
    /// `false` replaces the learned attention maps by a constant 0.5.
    pub use_affa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            max_disp: 48,
            groups: 8,
            rank: 256,
            d_attn: 32,
            use_affa: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_extents(self.height, self.width)?;
        if !self.max_disp.is_multiple_of(UPSAMPLE) || self.max_disp < 2 * UPSAMPLE {
            bail!(Config, "max_disp {} must be a multiple of 4 and at least 8", self.max_disp);
        }
        if self.d4() > self.width / UPSAMPLE {
            bail!(Config, "max_disp {} exceeds the image width {}", self.max_disp, self.width);
        }
        if self.groups == 0 || !F4_CHANNELS.is_multiple_of(self.groups) {
            bail!(Config, "groups {} must divide {}", self.groups, F4_CHANNELS);
        }
        if self.rank == 0 || self.d_attn == 0 {
            bail!(Config, "attention rank and width must be positive");
        }
        Ok(())
    }

    /// Disparity candidates at 1/4 resolution.
    pub fn d4(&self) -> usize {
        self.max_disp / UPSAMPLE
    }

    pub fn tokens(&self) -> usize {
        (self.height / UPSAMPLE) * (self.width / UPSAMPLE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MafNetParams {
    pub encoder: EncoderParams,
    pub affa: AffaParams,
    pub aahf: AahfParams,
    pub head: HeadParams,
}

#[derive(Clone, Copy, Debug)]
pub struct MafNetVars {
    pub encoder: EncoderVars,
    pub affa: AffaVars,
    pub aahf: AahfVars,
    pub head: HeadVars,
}

impl MafNetParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: EncoderParams::init(rng),
            affa: AffaParams::init(F4_CHANNELS, rng),
            aahf: AahfParams::init(cfg.d4(), cfg.tokens(), cfg.rank, cfg.d_attn, rng)?,
            head: HeadParams::init(rng),
        })
    }

    /// Weight decay applies to matrices and kernels, not to biases or the
    /// scalar band parameters.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.tensors().iter().map(|t| t.rank() >= 2).collect()
    }
}

fn prefixed<P: ParamSet>(prefix: &str, out: &mut Vec<String>) {
    out.extend(P::names().iter().map(|n| format!("{prefix}.{n}")));
}

impl ParamSet for MafNetParams {
    type Vars = MafNetVars;

    fn names() -> Vec<String> {
        let mut out = Vec::new();
        prefixed::<EncoderParams>("encoder", &mut out);
        prefixed::<AffaParams>("affa", &mut out);
        prefixed::<AahfParams>("aahf", &mut out);
        prefixed::<HeadParams>("head", &mut out);
        out
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.tensors();
        out.extend(self.affa.tensors());
        out.extend(self.aahf.tensors());
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.affa.tensors_mut());
        out.extend(self.aahf.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> MafNetVars {
        MafNetVars {
            encoder: self.encoder.bind(g, trainable),
            affa: self.affa.bind(g, trainable),
            aahf: self.aahf.bind(g, trainable),
            head: self.head.bind(g, trainable),
        }
    }

    fn vars(v: &MafNetVars) -> Vec<Var> {
        let mut out = EncoderParams::vars(&v.encoder);
        out.extend(AffaParams::vars(&v.affa));
        out.extend(AahfParams::vars(&v.aahf));
        out.extend(HeadParams::vars(&v.head));
        out
    }
}

/// Pipeline stages in execution order, reported to the forward observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Volume,
    Affa,
    Aahf,
    Head,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Volume => "volume",
            Stage::Affa => "affa",
            Stage::Aahf => "aahf",
            Stage::Head => "head",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, H/4, W/4]` in quarter-resolution units.
    pub d0: Var,
    /// `[B, H, W]` in pixels.
    pub d1: Var,
    pub maps: AttentionVars,
}

/// Forward pass on image batches `[B, 3, H, W]`; `observe` is called as each
/// stage completes.
pub fn forward_var(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &MafNetVars,
    left: Var,
    right: Var,
    mut observe: impl FnMut(Stage),
) -> Result<ForwardVars> {
    let s = g.shape(left).to_vec();
    if s.len() != 4 || s[2] != cfg.height || s[3] != cfg.width {
        bail!(
            Dimension,
            "model is sized for {}x{} inputs, got {:?}",
            cfg.height,
            cfg.width,
            s
        );
    }
    let (pl, pr) = encode_pair_var(g, left, right, &p.encoder)?;
    observe(Stage::Encoder);
    let volume = build_gwc_var(g, pl.f4, pr.f4, cfg.d4(), cfg.groups)?;
    observe(Stage::Volume);
    let maps = if cfg.use_affa {
        affa_forward_var(g, pl.f4, &p.affa)?
    } else {
        let mut shape = g.shape(volume).to_vec();
        shape[1] = 1;
        let half = g.constant(Tensor::full(&shape, 0.5));
        AttentionVars { a_high: half, a_low: half }
    };
    observe(Stage::Affa);
    let (hi, lo) = split_volume_var(g, volume, &maps)?;
    let fused = aahf_forward_var(g, hi, lo, &p.aahf, AttentionMode::Linformer)?;
    observe(Stage::Aahf);
    let d0 = soft_argmax_var(g, fused)?;
    let d1 = upsample_full_var(g, d0, left, &p.head)?;
    observe(Stage::Head);
    Ok(ForwardVars { d0, d1, maps })
}

/// Loss of a batch against full-resolution ground truth.
pub fn loss_var(
    g: &mut Graph,
    cfg: &ModelConfig,
    loss: &LossConfig,
    p: &MafNetVars,
    left: Var,
    right: Var,
    gt: &[DisparityMap],
) -> Result<Var> {
    let out = forward_var(g, cfg, p, left, right, |_| {})?;
    total_loss_var(g, out.d0, out.d1, gt, loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub d0: Tensor,
    pub d1: Tensor,
}

impl Prediction {
    /// Full-resolution map of batch item `i`.
    pub fn disparity(&self, i: usize) -> Result<DisparityMap> {
        let (h, w) = (self.d1.dim(1), self.d1.dim(2));
        let vals = self.d1.data()[i * h * w..(i + 1) * h * w].to_vec();
        DisparityMap::dense(Tensor::new(&[h, w], vals)?)
    }
}

pub fn predict(cfg: &ModelConfig, params: &MafNetParams, left: &Tensor, right: &Tensor) -> Result<Prediction> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
    let out = forward_var(&mut g, cfg, &vars, l, r, |_| {})?;
    Ok(Prediction {
        d0: g.value(out.d0).clone(),
        d1: g.value(out.d1).clone(),
    })
}
