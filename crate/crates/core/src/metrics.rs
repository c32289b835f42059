//! End-point error, Bad-3 and D1 over jointly valid pixels.

use crate::error::{bail, Result};
use crate::head::DisparityMap;

/// Absolute error above which a pixel counts as bad.
pub const BAD_PX: f64 = 3.0;
/// D1 additionally requires the error to exceed this fraction of the truth.
pub const D1_REL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub epe: f64,
    pub bad3: f64,
    pub d1: f64,
    pub n_valid: usize,
}

/// Pools pixels over several maps before averaging.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricsAccumulator {
    abs_err: f64,
    bad3: usize,
    d1: usize,
    n: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &DisparityMap, gt: &DisparityMap) -> Result<()> {
        if pred.values.shape() != gt.values.shape() {
            bail!(
                Dimension,
                "prediction {:?} and ground truth {:?} differ",
                pred.values.shape(),
                gt.values.shape()
            );
        }
        let pixels = pred.values.data().iter().zip(gt.values.data());
        let masks = pred.valid.iter().zip(&gt.valid);
        for ((p, g), (vp, vg)) in pixels.zip(masks) {
            if !(*vp && *vg) {
                continue;
            }
            let e = (p - g).abs();
            self.abs_err += e;
            self.n += 1;
            if e > BAD_PX {
                self.bad3 += 1;
                if e > D1_REL * g {
                    self.d1 += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            bail!(Contract, "no jointly valid pixels to score");
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            epe: self.abs_err / n,
            bad3: self.bad3 as f64 / n,
            d1: self.d1 as f64 / n,
            n_valid: self.n,
        })
    }
}

pub fn compute_metrics(pred: &DisparityMap, gt: &DisparityMap) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt)?;
    acc.finish()
}
