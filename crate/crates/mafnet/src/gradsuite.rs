//! Finite-difference gradient suite over every differentiable module at toy
//! extents (32x32 images, disparity range 16).

use std::cell::RefCell;

use mafnet_core::aahf::{aahf_forward_var, AahfParams, AttentionMode};
use mafnet_core::affa::{affa_forward_var, AffaParams};
use mafnet_core::cost_volume::build_gwc_var;
use mafnet_core::encoder::{encode_pair_var, EncoderParams, F4_CHANNELS};
use mafnet_core::gradcheck::{check_params_with, grad_check_with, probe_indices};
use mafnet_core::head::{soft_argmax_var, total_loss_var, upsample_full_var, DisparityMap, HeadParams, LossConfig};
use mafnet_core::init::Rng;
use mafnet_core::params::ParamSet;
use mafnet_core::{Graph, Result, Tensor, Var};
use serde::Serialize;

pub const TOLERANCE: f64 = 1e-4;
pub const EXTENT: usize = 32;
pub const DMAX: usize = 16;

const D4: usize = DMAX / 4;
const Q: usize = EXTENT / 4;
const GROUPS: usize = 8;
const PROBES_PER_PARAM: usize = 16;
const PROBES_PER_INPUT: usize = 48;
// step small enough that probes rarely straddle a leaky-relu or smooth-l1 kink
const EPS: f64 = 1e-7;

/// One checked tensor.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct GradRow {
    pub module: &'static str,
    pub target: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Worst row of each module, in suite order.
pub fn module_summary(rows: &[GradRow]) -> Vec<(&'static str, f64, bool)> {
    let mut out: Vec<(&'static str, f64, bool)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|m| m.0 == r.module) {
            Some(m) => {
                m.1 = m.1.max(r.max_rel_err);
                m.2 &= r.passed();
            }
            None => out.push((r.module, r.max_rel_err, r.passed())),
        }
    }
    out
}

thread_local! {
    static CORRUPT: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn fault(op: &'static str, grad: &mut Tensor) {
    let hit = CORRUPT.with(|c| c.borrow().as_deref() == Some(op));
    if hit {
        grad.data_mut().iter_mut().for_each(|v| *v *= 1.5);
    }
}

fn random(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    g.sum(p)
}

struct Suite {
    rows: Vec<GradRow>,
}

impl Suite {
    fn params<P, F>(&mut self, module: &'static str, p: &P, f: F) -> Result<()>
    where
        P: ParamSet + Clone,
        F: Fn(&mut Graph, &P::Vars) -> Result<Var>,
    {
        for r in check_params_with(p, f, EPS, PROBES_PER_PARAM, Some(fault))? {
            self.rows.push(GradRow {
                module,
                target: r.name,
                max_rel_err: r.max_rel_err,
                probes: r.checked,
            });
        }
        Ok(())
    }

    fn input<F>(&mut self, module: &'static str, name: &str, x: &Tensor, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let err = grad_check_with(f, x, EPS, PROBES_PER_INPUT, Some(fault))?;
        self.rows.push(GradRow {
            module,
            target: name.to_string(),
            max_rel_err: err,
            probes: probe_indices(x.len(), PROBES_PER_INPUT).count(),
        });
        Ok(())
    }
}

/// Run the whole suite. `corrupt` names a tape op whose backward output is
/// scaled by 1.5 before use, which must make exactly the modules using that
/// op fail.
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<Vec<GradRow>> {
    CORRUPT.with(|c| *c.borrow_mut() = corrupt.map(str::to_string));
    let out = run(seed);
    CORRUPT.with(|c| *c.borrow_mut() = None);
    out
}

fn run(seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = Rng::new(seed);
    let mut s = Suite { rows: Vec::new() };

    // encoder
    let enc = EncoderParams::init(&mut rng);
    let left = random(&[1, 3, EXTENT, EXTENT], &mut rng, 0.0, 1.0);
    let right = random(&[1, 3, EXTENT, EXTENT], &mut rng, 0.0, 1.0);
    let w4 = random(&[2, F4_CHANNELS, Q, Q], &mut rng, -1.0, 1.0);
    let reduce = |g: &mut Graph, l: Var, r: Var, v: &_| -> Result<Var> {
        let (pl, pr) = encode_pair_var(g, l, r, v)?;
        let both = g.concat(&[pl.f4, pr.f4], 0)?;
        let a = weighted_sum(g, both, &w4)?;
        let s8 = g.sum(pl.f8)?;
        let s16 = g.sum(pr.f16)?;
        let t = g.add(a, s8)?;
        g.add(t, s16)
    };
    s.params("encoder", &enc, |g, v| {
        let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
        reduce(g, l, r, v)
    })?;
    s.input("encoder", "left", &left, |g, x| {
        let v = enc.bind(g, false);
        let r = g.constant(right.clone());
        reduce(g, x, r, &v)
    })?;

    // cost volume
    let fl = random(&[1, F4_CHANNELS, Q, Q], &mut rng, -1.0, 1.0);
    let fr = random(&[1, F4_CHANNELS, Q, Q], &mut rng, -1.0, 1.0);
    let wv = random(&[1, D4, Q, Q], &mut rng, -1.0, 1.0);
    s.input("cost-volume", "f_left", &fl, |g, x| {
        let r = g.constant(fr.clone());
        let c = build_gwc_var(g, x, r, D4, GROUPS)?;
        weighted_sum(g, c, &wv)
    })?;
    s.input("cost-volume", "f_right", &fr, |g, x| {
        let l = g.constant(fl.clone());
        let c = build_gwc_var(g, l, x, D4, GROUPS)?;
        weighted_sum(g, c, &wv)
    })?;

    // affa
    let affa = AffaParams::init(F4_CHANNELS, &mut rng);
    let wa = random(&[1, 1, Q, Q], &mut rng, -1.0, 1.0);
    let affa_loss = |g: &mut Graph, x: Var, v: &_| -> Result<Var> {
        let maps = affa_forward_var(g, x, v)?;
        weighted_sum(g, maps.a_high, &wa)
    };
    s.params("affa", &affa, |g, v| {
        let x = g.constant(fl.clone());
        affa_loss(g, x, v)
    })?;
    s.input("affa", "features", &fl, |g, x| {
        let v = affa.bind(g, false);
        affa_loss(g, x, &v)
    })?;

    // aahf
    let n = Q * Q;
    let aahf = AahfParams::init(D4, n, n / 4, 8, &mut rng)?;
    let hi = random(&[1, D4, Q, Q], &mut rng, -1.0, 1.0);
    let lo = random(&[1, D4, Q, Q], &mut rng, -1.0, 1.0);
    let aahf_loss = |g: &mut Graph, h: Var, l: Var, v: &_| -> Result<Var> {
        let c = aahf_forward_var(g, h, l, v, AttentionMode::Linformer)?;
        weighted_sum(g, c, &wv)
    };
    s.params("aahf", &aahf, |g, v| {
        let (h, l) = (g.constant(hi.clone()), g.constant(lo.clone()));
        aahf_loss(g, h, l, v)
    })?;
    s.input("aahf", "cv_high", &hi, |g, x| {
        let v = aahf.bind(g, false);
        let l = g.constant(lo.clone());
        aahf_loss(g, x, l, &v)
    })?;
    s.input("aahf", "cv_low", &lo, |g, x| {
        let v = aahf.bind(g, false);
        let h = g.constant(hi.clone());
        aahf_loss(g, h, x, &v)
    })?;

    // head: soft argmax then convex upsampling
    let head = HeadParams::init(&mut rng);
    let volume = random(&[1, D4, Q, Q], &mut rng, -2.0, 2.0);
    let wd = random(&[1, EXTENT, EXTENT], &mut rng, -1.0, 1.0);
    let head_loss = |g: &mut Graph, c: Var, guide: Var, v: &_| -> Result<Var> {
        let d0 = soft_argmax_var(g, c)?;
        let d1 = upsample_full_var(g, d0, guide, v)?;
        weighted_sum(g, d1, &wd)
    };
    s.params("head", &head, |g, v| {
        let (c, l) = (g.constant(volume.clone()), g.constant(left.clone()));
        head_loss(g, c, l, v)
    })?;
    s.input("head", "volume", &volume, |g, x| {
        let v = head.bind(g, false);
        let l = g.constant(left.clone());
        head_loss(g, x, l, &v)
    })?;
    s.input("head", "guide", &left, |g, x| {
        let v = head.bind(g, false);
        let c = g.constant(volume.clone());
        head_loss(g, c, x, &v)
    })?;

    // loss
    let gt = [DisparityMap::dense(random(&[EXTENT, EXTENT], &mut rng, 0.0, DMAX as f64))?];
    let d0 = random(&[1, Q, Q], &mut rng, 0.0, D4 as f64);
    let d1 = random(&[1, EXTENT, EXTENT], &mut rng, 0.0, DMAX as f64);
    let cfg = LossConfig::default();
    s.input("loss", "d0", &d0, |g, x| {
        let b = g.constant(d1.clone());
        total_loss_var(g, x, b, &gt, &cfg)
    })?;
    s.input("loss", "d1", &d1, |g, x| {
        let a = g.constant(d0.clone());
        total_loss_var(g, a, x, &gt, &cfg)
    })?;

    Ok(s.rows)
}

/// Plain-text table: one line per checked tensor, then one per module.
pub fn format_table(rows: &[GradRow]) -> String {
    let mut out = format!("{:<12} {:<14} {:>12} {:>7}  status\n", "module", "tensor", "max rel err", "probes");
    for r in rows {
        out += &format!(
            "{:<12} {:<14} {:>12.3e} {:>7}  {}\n",
            r.module,
            r.target,
            r.max_rel_err,
            r.probes,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    out += "\n";
    for (m, err, ok) in module_summary(rows) {
        out += &format!("{:<12} {:>12.3e}  {}\n", m, err, if ok { "PASS" } else { "FAIL" });
    }
    out
}
