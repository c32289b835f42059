//! Group-wise correlation cost volume.
//!
//! For quarter-resolution features split into `ng` channel groups,
//! `C(x, y, d, g) = (ng / Nc) * <f_l^g(x, y), f_r^g(x - d, y)>` for `x >= d`
//! and zero where the right-image column falls out of frame.

use alloc::vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Matching volume `[B, D4, H4, W4]` (group axis already mean-reduced).
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub volume: Tensor,
    /// Full-resolution maximum disparity in pixels (`4 * D4`).
    pub max_disp: usize,
}

impl CostVolume {
    pub fn candidates(&self) -> usize {
        self.volume.dim(1)
    }
}

pub(crate) fn validate(l: &Tensor, r: &Tensor, max_disp: usize, groups: usize) -> Result<()> {
    if l.rank() != 4 || l.shape() != r.shape() {
        bail!(
            Dimension,
            "feature maps must be equal-shape [B, C, H, W], got {:?} and {:?}",
            l.shape(),
            r.shape()
        );
    }
    let (nc, w) = (l.dim(1), l.dim(3));
    if groups == 0 || nc % groups != 0 {
        bail!(Config, "{} channels cannot be split into {} equal groups", nc, groups);
    }
    if max_disp == 0 || max_disp > w {
        bail!(
            Config,
            "disparity candidates {} must lie in [1, W4 = {}]",
            max_disp,
            w
        );
    }
    Ok(())
}

/// Grouped volume `[B, G, D, H, W]`.
pub(crate) fn gwc_forward(l: &Tensor, r: &Tensor, max_disp: usize, groups: usize) -> Result<Tensor> {
    validate(l, r, max_disp, groups)?;
    let (b, nc, h, w) = (l.dim(0), l.dim(1), l.dim(2), l.dim(3));
    let cpg = nc / groups;
    let norm = 1.0 / cpg as f64;
    let hw = h * w;
    let mut out = vec![0.0; b * groups * max_disp * hw];
    let (ld, rd) = (l.data(), r.data());
    for bi in 0..b {
        for g in 0..groups {
            for d in 0..max_disp {
                let dst = &mut out[((bi * groups + g) * max_disp + d) * hw..][..hw];
                for c in g * cpg..(g + 1) * cpg {
                    let base = (bi * nc + c) * hw;
                    for y in 0..h {
                        let lrow = &ld[base + y * w..base + (y + 1) * w];
                        let rrow = &rd[base + y * w..base + (y + 1) * w];
                        let orow = &mut dst[y * w..(y + 1) * w];
                        for x in d..w {
                            orow[x] += lrow[x] * rrow[x - d];
                        }
                    }
                }
                dst.iter_mut().for_each(|v| *v *= norm);
            }
        }
    }
    Tensor::new(&[b, groups, max_disp, h, w], out)
}

pub(crate) fn gwc_backward(l: &Tensor, r: &Tensor, g_out: &Tensor, groups: usize) -> (Tensor, Tensor) {
    let (b, nc, h, w) = (l.dim(0), l.dim(1), l.dim(2), l.dim(3));
    let max_disp = g_out.dim(2);
    let cpg = nc / groups;
    let norm = 1.0 / cpg as f64;
    let hw = h * w;
    let mut gl = Tensor::zeros(l.shape());
    let mut gr = Tensor::zeros(r.shape());
    let (ld, rd, gd) = (l.data(), r.data(), g_out.data());
    for bi in 0..b {
        for g in 0..groups {
            for d in 0..max_disp {
                let go = &gd[((bi * groups + g) * max_disp + d) * hw..][..hw];
                for c in g * cpg..(g + 1) * cpg {
                    let base = (bi * nc + c) * hw;
                    for y in 0..h {
                        let row = base + y * w;
                        for x in d..w {
                            let gv = go[y * w + x] * norm;
                            gl.data_mut()[row + x] += gv * rd[row + x - d];
                            gr.data_mut()[row + x - d] += gv * ld[row + x];
                        }
                    }
                }
            }
        }
    }
    (gl, gr)
}

/// Grouped correlation volume `[B, ng, dmax4, H4, W4]`.
pub fn build_gwc_grouped(f_l: &Tensor, f_r: &Tensor, dmax4: usize, ng: usize) -> Result<Tensor> {
    gwc_forward(f_l, f_r, dmax4, ng)
}

/// Correlation volume averaged over the `ng` groups.
pub fn build_gwc(f_l: &Tensor, f_r: &Tensor, dmax4: usize, ng: usize) -> Result<CostVolume> {
    let grouped = gwc_forward(f_l, f_r, dmax4, ng)?;
    Ok(CostVolume {
        volume: mean_groups(&grouped)?,
        max_disp: 4 * dmax4,
    })
}

/// Plain nested-loop evaluation of the grouped volume; the reference the fast
/// path is tested against. Intended for tiny extents.
pub fn gwc_oracle_grouped(f_l: &Tensor, f_r: &Tensor, dmax4: usize, ng: usize) -> Result<Tensor> {
    validate(f_l, f_r, dmax4, ng)?;
    let (b, nc, h, w) = (f_l.dim(0), f_l.dim(1), f_l.dim(2), f_l.dim(3));
    let cpg = nc / ng;
    let mut out = Tensor::zeros(&[b, ng, dmax4, h, w]);
    for bi in 0..b {
        for x in 0..w {
            for y in 0..h {
                for d in 0..dmax4 {
                    for g in 0..ng {
                        if x < d {
                            continue;
                        }
                        let mut acc = 0.0;
                        for k in 0..cpg {
                            let c = g * cpg + k;
                            acc += f_l.at(&[bi, c, y, x]) * f_r.at(&[bi, c, y, x - d]);
                        }
                        out.set(&[bi, g, d, y, x], acc / (nc as f64 / ng as f64));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn gwc_oracle(f_l: &Tensor, f_r: &Tensor, dmax4: usize, ng: usize) -> Result<CostVolume> {
    let grouped = gwc_oracle_grouped(f_l, f_r, dmax4, ng)?;
    Ok(CostVolume {
        volume: mean_groups(&grouped)?,
        max_disp: 4 * dmax4,
    })
}

fn mean_groups(grouped: &Tensor) -> Result<Tensor> {
    let ng = grouped.dim(1) as f64;
    Ok(crate::ops::sum_axis(grouped, 1)?.map(|v| v / ng))
}

/// Recorded variant of [`build_gwc`] returning the `[B, D4, H4, W4]` volume.
pub fn build_gwc_var(g: &mut Graph, f_l: Var, f_r: Var, dmax4: usize, ng: usize) -> Result<Var> {
    let grouped = g.gwc_volume(f_l, f_r, dmax4, ng)?;
    g.mean_axis(grouped, 1)
}
