//! Adaptive aggregation of the high- and low-frequency cost volumes.
//!
//! The volume is split by the AFFA maps, stacked along the disparity axis,
//! flattened to `N = H4 * W4` tokens of width `2 * D4`, fused by single-head
//! self-attention and projected back to `D4` channels.

use alloc::vec;
use alloc::vec::Vec;

use crate::affa::{AttentionMaps, AttentionVars};
use crate::cost_volume::CostVolume;
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::init::{fan_in_uniform, Rng};
use crate::math;
use crate::params::{param_set, ParamSet};
use crate::tensor::{gemm, Tensor};

/// Query rows scored per block, bounding scratch to `ROW_BLOCK * keys`.
const ROW_BLOCK: usize = 256;

param_set! {
    pub struct AahfParams / AahfVars {
        /// `[2 * D4, d_attn]`
        wq,
        wk,
        wv,
        /// `[k, N]`
        e_proj,
        f_proj,
        /// `[d_attn, D4]`
        w_out,
        /// `[D4]`
        b_out,
    }
}

/// Rows that average `k` contiguous, near-equal blocks of `n` tokens.
pub fn pooling_projection(k: usize, n: usize) -> Result<Tensor> {
    if k == 0 || k > n {
        bail!(Config, "projection rank {} must lie in [1, {}]", k, n);
    }
    let mut t = Tensor::zeros(&[k, n]);
    for i in 0..k {
        let (lo, hi) = (i * n / k, (i + 1) * n / k);
        for j in lo..hi {
            t.data_mut()[i * n + j] = 1.0 / (hi - lo) as f64;
        }
    }
    Ok(t)
}

impl AahfParams {
    /// `k` is clamped to `n`.
    pub fn init(d4: usize, n: usize, k: usize, d_attn: usize, rng: &mut Rng) -> Result<Self> {
        if d4 == 0 || n == 0 || d_attn == 0 || k == 0 {
            bail!(Config, "attention extents must be positive (D4 {}, N {}, k {}, d {})", d4, n, k, d_attn);
        }
        let k = k.min(n);
        Ok(Self {
            wq: fan_in_uniform(&[2 * d4, d_attn], 2 * d4, 1.0, rng),
            wk: fan_in_uniform(&[2 * d4, d_attn], 2 * d4, 1.0, rng),
            wv: fan_in_uniform(&[2 * d4, d_attn], 2 * d4, 1.0, rng),
            e_proj: pooling_projection(k, n)?,
            f_proj: pooling_projection(k, n)?,
            w_out: fan_in_uniform(&[d_attn, d4], d_attn, 1.0, rng),
            b_out: Tensor::zeros(&[d4]),
        })
    }

    pub fn tokens(&self) -> usize {
        self.e_proj.dim(1)
    }

    pub fn rank(&self) -> usize {
        self.e_proj.dim(0)
    }

    pub fn d_attn(&self) -> usize {
        self.wq.dim(1)
    }

    pub fn disparities(&self) -> usize {
        self.w_out.dim(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Keys and values projected to `k` rows.
    Linformer,
    /// All `N` keys; the quadratic reference.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitVolumes {
    pub cv_high: Tensor,
    pub cv_low: Tensor,
}

pub fn split_volume_var(g: &mut Graph, c: Var, a: &AttentionVars) -> Result<(Var, Var)> {
    let (cs, hs) = (g.shape(c).to_vec(), g.shape(a.a_high).to_vec());
    if cs.len() != 4 || hs.len() != 4 || hs[1] != 1 || cs[0] != hs[0] || cs[2..] != hs[2..] {
        bail!(Dimension, "volume {:?} and attention map {:?} do not align", cs, hs);
    }
    Ok((g.mul_channel(c, a.a_high)?, g.mul_channel(c, a.a_low)?))
}

pub fn split_volume(c: &CostVolume, a: &AttentionMaps) -> Result<SplitVolumes> {
    let mut g = Graph::new();
    let cv = g.constant(c.volume.clone());
    let av = AttentionVars {
        a_high: g.constant(a.a_high.clone()),
        a_low: g.constant(a.a_low.clone()),
    };
    let (hi, lo) = split_volume_var(&mut g, cv, &av)?;
    Ok(SplitVolumes {
        cv_high: g.value(hi).clone(),
        cv_low: g.value(lo).clone(),
    })
}

/// Fused volume `[B, D4, H4, W4]` from the two split halves.
pub fn aahf_forward_var(
    g: &mut Graph,
    cv_high: Var,
    cv_low: Var,
    p: &AahfVars,
    mode: AttentionMode,
) -> Result<Var> {
    let s = g.shape(cv_high).to_vec();
    if s.len() != 4 || g.shape(cv_low) != s.as_slice() {
        bail!(Dimension, "split volumes must share a [B, D4, H4, W4] shape, got {:?} and {:?}", s, g.shape(cv_low));
    }
    let (b, d4, n) = (s[0], s[1], s[2] * s[3]);
    let wq = g.shape(p.wq).to_vec();
    if wq[0] != 2 * d4 || g.shape(p.w_out)[1] != d4 || g.shape(p.e_proj)[1] != n {
        bail!(
            Dimension,
            "attention built for {} tokens of width {}, got {} tokens of width {}",
            g.shape(p.e_proj)[1],
            wq[0],
            n,
            2 * d4
        );
    }
    let d_attn = wq[1];

    let x = g.concat(&[cv_high, cv_low], 1)?;
    let x = g.reshape(x, &[b, 2 * d4, n])?;
    let q = g.matmul(x, p.wq, true, false)?;
    let k = g.matmul(x, p.wk, true, false)?;
    let v = g.matmul(x, p.wv, true, false)?;
    let (k, v) = match mode {
        AttentionMode::Linformer => (g.matmul(p.e_proj, k, false, false)?, g.matmul(p.f_proj, v, false, false)?),
        AttentionMode::Full => (k, v),
    };
    let scores = g.matmul(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / math::sqrt(d_attn as f64))?;
    let weights = g.softmax(scores, 2)?;
    let fused = g.matmul(weights, v, false, false)?;
    let out = g.matmul(p.w_out, fused, true, true)?;
    let out = g.reshape(out, &s)?;
    g.add_channel_bias(out, p.b_out)
}

pub fn aahf_forward(s: &SplitVolumes, p: &AahfParams, mode: AttentionMode) -> Result<CostVolume> {
    let mut g = Graph::new();
    let v = p.bind(&mut g, false);
    let (hi, lo) = (g.constant(s.cv_high.clone()), g.constant(s.cv_low.clone()));
    let out = aahf_forward_var(&mut g, hi, lo, &v, mode)?;
    let volume = g.value(out).clone();
    let max_disp = 4 * volume.dim(1);
    Ok(CostVolume { volume, max_disp })
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    match (q.shape(), k.shape(), v.shape()) {
        ([n, d], [m, dk], [mv, dv]) if d == dk && m == mv => Ok((*n, *m, *dv)),
        _ => bail!(
            Dimension,
            "attention operands disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ),
    }
}

/// `softmax(q keys^T / sqrt(d)) values`, scored in row blocks.
fn attend(q: &Tensor, keys: &Tensor, values: &Tensor, mut weights_out: Option<&mut Tensor>) -> Result<Tensor> {
    let (n, m, dv) = check_qkv(q, keys, values)?;
    let d = q.dim(1);
    let scale = 1.0 / math::sqrt(d as f64);
    let mut out = Tensor::zeros(&[n, dv]);
    let mut scores = vec![0.0; ROW_BLOCK.min(n.max(1)) * m];
    let mut r0 = 0;
    while r0 < n {
        let rows = ROW_BLOCK.min(n - r0);
        let s = &mut scores[..rows * m];
        gemm(rows, d, m, scale, &q.data()[r0 * d..], false, keys.data(), true, 0.0, s);
        for row in s.chunks_exact_mut(m) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = math::exp(*x - mx);
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        if let Some(w) = weights_out.as_deref_mut() {
            w.data_mut()[r0 * m..(r0 + rows) * m].copy_from_slice(s);
        }
        gemm(rows, m, dv, 1.0, s, false, values.data(), false, 0.0, &mut out.data_mut()[r0 * dv..]);
        r0 += rows;
    }
    Ok(out)
}

/// Quadratic reference: `softmax(q k^T / sqrt(d)) v` over all `N` keys.
pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    attend(q, k, v, None)
}

/// Low-rank attention with `K' = e k`, `V' = f v`.
pub fn lin_attention(q: &Tensor, k: &Tensor, v: &Tensor, e: &Tensor, f: &Tensor) -> Result<Tensor> {
    let n = k.dim(0);
    match (e.shape(), f.shape()) {
        ([r, c], [rf, cf]) if c == &n && cf == &n && r == rf && *r <= n => {}
        _ => bail!(
            Dimension,
            "projections {:?} and {:?} must both be [k, {}] with k <= {}",
            e.shape(),
            f.shape(),
            n,
            n
        ),
    }
    let kp = crate::ops::matmul(e, k, false, false)?;
    let vp = crate::ops::matmul(f, v, false, false)?;
    attend(q, &kp, &vp, None)
}

/// The `[N, keys]` softmax factor of an attention call.
pub fn attention_weights(q: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let mut w = Tensor::zeros(&[q.dim(0), keys.dim(0)]);
    let dummy = Tensor::zeros(&[keys.dim(0), 1]);
    attend(q, keys, &dummy, Some(&mut w))?;
    Ok(w)
}

/// Bytes of scratch a call keeps live: inputs, projected keys/values, one
/// score block and the output.
pub fn attention_bytes(n: usize, keys: usize, d_attn: usize, projected: bool) -> usize {
    let f = core::mem::size_of::<f64>();
    let inputs = 3 * n * d_attn;
    let proj = if projected { 2 * keys * d_attn } else { 0 };
    (inputs + proj + ROW_BLOCK.min(n) * keys + n * d_attn) * f
}

/// Identity `[n, n]`.
pub fn identity(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

/// Mean of each column of `v: [N, d]`.
pub fn column_mean(v: &Tensor) -> Vec<f64> {
    let (n, d) = (v.dim(0), v.dim(1));
    let mut m = vec![0.0; d];
    for row in v.data().chunks_exact(d) {
        for (a, b) in m.iter_mut().zip(row) {
            *a += b / n as f64;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, grad_check};

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut rng = Rng::new(0);
        let (q, k, v) = (random(&[1, 4], &mut rng), random(&[1, 4], &mut rng), random(&[1, 3], &mut rng));
        assert!(full_attention(&q, &k, &v).unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = Rng::new(1);
        let (k, v) = (random(&[7, 4], &mut rng), random(&[7, 5], &mut rng));
        let out = full_attention(&Tensor::zeros(&[7, 4]), &k, &v).unwrap();
        let mean = column_mean(&v);
        for row in out.data().chunks_exact(5) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_tokens_by_hand() {
        let mut rng = Rng::new(2);
        let (q, k, v) = (random(&[3, 2], &mut rng), random(&[3, 2], &mut rng), random(&[3, 2], &mut rng));
        let out = full_attention(&q, &k, &v).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for i in 0..3 {
            let dot = |j: usize| (q.at(&[i, 0]) * k.at(&[j, 0]) + q.at(&[i, 1]) * k.at(&[j, 1])) * s;
            let (e0, e1, e2) = (dot(0).exp(), dot(1).exp(), dot(2).exp());
            let z = e0 + e1 + e2;
            for c in 0..2 {
                let want = (e0 * v.at(&[0, c]) + e1 * v.at(&[1, c]) + e2 * v.at(&[2, c])) / z;
                assert!((out.at(&[i, c]) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn identity_projection_matches_full() {
        let mut rng = Rng::new(3);
        for n in [1, 5, 33, 64] {
            let (q, k, v) = (random(&[n, 8], &mut rng), random(&[n, 8], &mut rng), random(&[n, 6], &mut rng));
            let id = identity(n);
            let lin = lin_attention(&q, &k, &v, &id, &id).unwrap();
            assert!(lin.max_abs_diff(&full_attention(&q, &k, &v).unwrap()) <= 1e-9);
        }
    }

    #[test]
    fn block_scoring_matches_single_block() {
        let mut rng = Rng::new(4);
        let n = ROW_BLOCK * 2 + 17;
        let (q, k, v) = (random(&[n, 4], &mut rng), random(&[n, 4], &mut rng), random(&[n, 3], &mut rng));
        let out = full_attention(&q, &k, &v).unwrap();
        let s = crate::ops::matmul(&q, &k, false, true).unwrap().scale(0.5);
        let w = crate::ops::softmax(&s, 1).unwrap();
        let want = crate::ops::matmul(&w, &v, false, false).unwrap();
        assert!(out.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn rank_one_projection_averages_values() {
        let mut rng = Rng::new(5);
        let n = 10;
        let (q, k, v) = (random(&[n, 4], &mut rng), random(&[n, 4], &mut rng), random(&[n, 3], &mut rng));
        let avg = Tensor::full(&[1, n], 1.0 / n as f64);
        let out = lin_attention(&q, &k, &v, &avg, &avg).unwrap();
        let mean = column_mean(&v);
        for row in out.data().chunks_exact(3) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = Rng::new(6);
        let (q, k) = (random(&[300, 8], &mut rng).scale(5.0), random(&[40, 8], &mut rng));
        let w = attention_weights(&q, &k).unwrap();
        for row in w.data().chunks_exact(40) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn oversized_rank_rejected() {
        let t = Tensor::zeros(&[4, 2]);
        let e = Tensor::zeros(&[5, 4]);
        assert!(lin_attention(&t, &t, &t, &e, &e).is_err());
        assert!(pooling_projection(5, 4).is_err());
    }

    #[test]
    fn pooling_rows_are_averages() {
        let e = pooling_projection(3, 8).unwrap();
        for row in e.data().chunks_exact(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        // every token belongs to exactly one block
        for j in 0..8 {
            assert_eq!((0..3).filter(|&i| e.at(&[i, j]) > 0.0).count(), 1);
        }
    }

    fn maps(b: usize, h: usize, w: usize, rng: &mut Rng) -> AttentionMaps {
        let a_high = Tensor::from_fn(&[b, 1, h, w], |_| rng.uniform(0.01, 0.99));
        let a_low = a_high.map(|x| 1.0 - x);
        AttentionMaps { a_high, a_low }
    }

    #[test]
    fn split_sums_back_to_the_volume() {
        let mut rng = Rng::new(7);
        let c = CostVolume { volume: random(&[2, 5, 3, 4], &mut rng), max_disp: 20 };
        let a = maps(2, 3, 4, &mut rng);
        let s = split_volume(&c, &a).unwrap();
        let sum = s.cv_high.zip_map(&s.cv_low, |x, y| x + y).unwrap();
        assert!(sum.max_abs_diff(&c.volume) <= 1e-12);
        for b in 0..2 {
            for d in 0..5 {
                for y in 0..3 {
                    for x in 0..4 {
                        let want = a.a_high.at(&[b, 0, y, x]) * c.volume.at(&[b, d, y, x]);
                        assert!((s.cv_high.at(&[b, d, y, x]) - want).abs() <= 1e-12);
                    }
                }
            }
        }
        let half = AttentionMaps {
            a_high: Tensor::full(&[2, 1, 3, 4], 0.5),
            a_low: Tensor::full(&[2, 1, 3, 4], 0.5),
        };
        let s = split_volume(&c, &half).unwrap();
        assert_eq!(s.cv_high, s.cv_low);
        assert_eq!(s.cv_high, c.volume.scale(0.5));
    }

    #[test]
    fn split_rejects_misaligned_maps() {
        let c = CostVolume { volume: Tensor::zeros(&[1, 4, 3, 4]), max_disp: 16 };
        let a = maps(1, 4, 3, &mut Rng::new(0));
        assert!(matches!(split_volume(&c, &a), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn forward_shapes_and_zero_input() {
        let mut rng = Rng::new(8);
        let p = AahfParams::init(6, 12, 4, 8, &mut rng).unwrap();
        let zero = SplitVolumes { cv_high: Tensor::zeros(&[2, 6, 3, 4]), cv_low: Tensor::zeros(&[2, 6, 3, 4]) };
        let out = aahf_forward(&zero, &p, AttentionMode::Linformer).unwrap();
        assert_eq!(out.volume.shape(), &[2, 6, 3, 4]);
        assert!(out.volume.data().iter().all(|&v| v == 0.0));
        let bad = SplitVolumes { cv_high: Tensor::zeros(&[1, 6, 4, 4]), cv_low: Tensor::zeros(&[1, 6, 4, 4]) };
        assert!(matches!(aahf_forward(&bad, &p, AttentionMode::Linformer), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn identity_projection_pipeline_matches_full_pipeline() {
        let mut rng = Rng::new(9);
        let (d4, h, w) = (5, 3, 4);
        let n = h * w;
        let mut p = AahfParams::init(d4, n, n, 8, &mut rng).unwrap();
        p.e_proj = identity(n);
        p.f_proj = identity(n);
        p.b_out = random(&[d4], &mut rng);
        let s = SplitVolumes { cv_high: random(&[2, d4, h, w], &mut rng), cv_low: random(&[2, d4, h, w], &mut rng) };
        let lin = aahf_forward(&s, &p, AttentionMode::Linformer).unwrap();
        let full = aahf_forward(&s, &p, AttentionMode::Full).unwrap();
        assert!(lin.volume.max_abs_diff(&full.volume) <= 1e-9);
    }

    #[test]
    fn graph_path_matches_plain_attention() {
        let mut rng = Rng::new(10);
        let (d4, h, w, k) = (4, 4, 4, 5);
        let n = h * w;
        let p = AahfParams::init(d4, n, k, 6, &mut rng).unwrap();
        let s = SplitVolumes { cv_high: random(&[1, d4, h, w], &mut rng), cv_low: random(&[1, d4, h, w], &mut rng) };
        let out = aahf_forward(&s, &p, AttentionMode::Linformer).unwrap();

        let x = crate::ops::concat(&[&s.cv_high, &s.cv_low], 1).unwrap().reshape(&[2 * d4, n]).unwrap();
        let proj = |wm: &Tensor| crate::ops::matmul(&x, wm, true, false).unwrap();
        let fused = lin_attention(&proj(&p.wq), &proj(&p.wk), &proj(&p.wv), &p.e_proj, &p.f_proj).unwrap();
        let want = crate::ops::matmul(&fused, &p.w_out, false, false).unwrap();
        for t in 0..n {
            for d in 0..d4 {
                assert!((out.volume.data()[d * n + t] - want.at(&[t, d])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_gradients() {
        let mut rng = Rng::new(11);
        let (d4, h, w) = (6, 4, 4);
        let mut p = AahfParams::init(d4, h * w, 8, 8, &mut rng).unwrap();
        p.b_out = random(&[d4], &mut rng);
        let (hi, lo) = (random(&[1, d4, h, w], &mut rng), random(&[1, d4, h, w], &mut rng));
        let probe = random(&[1, d4, h, w], &mut rng);
        let reduce = |g: &mut Graph, out: Var| -> Result<Var> {
            let pv = g.constant(probe.clone());
            let m = g.mul(out, pv)?;
            g.sum(m)
        };
        let reports = check_params(
            &p,
            |g, v| {
                let (a, b) = (g.constant(hi.clone()), g.constant(lo.clone()));
                let out = aahf_forward_var(g, a, b, v, AttentionMode::Linformer)?;
                reduce(g, out)
            },
            1e-6,
            64,
        )
        .unwrap();
        for r in &reports {
            assert!(r.max_rel_err <= 1e-4, "{:?}", r);
        }
        for which in 0..2 {
            let err = grad_check(
                |g, x| {
                    let v = p.bind(g, false);
                    let other = g.constant(if which == 0 { lo.clone() } else { hi.clone() });
                    let (a, b) = if which == 0 { (x, other) } else { (other, x) };
                    let out = aahf_forward_var(g, a, b, &v, AttentionMode::Linformer)?;
                    reduce(g, out)
                },
                if which == 0 { &hi } else { &lo },
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-4, "{err}");
        }
    }
}
