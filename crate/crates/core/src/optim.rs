//! AdamW with a one-cycle learning-rate schedule.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor;

/// Linear warm-up from `max_lr * warmup_floor` to `max_lr`, then cosine decay
/// to `max_lr * final_frac` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub warmup_floor: f64,
    pub final_frac: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize, warmup_frac: f64, warmup_floor: f64) -> Result<Self> {
        if !(max_lr > 0.0 && max_lr.is_finite()) || total_steps == 0 {
            bail!(Config, "schedule needs a positive learning rate and step count");
        }
        if !(0.0..1.0).contains(&warmup_frac) || !(0.0..=1.0).contains(&warmup_floor) {
            bail!(
                Config,
                "warm-up fraction {} must be in [0, 1) and floor {} in [0, 1]",
                warmup_frac,
                warmup_floor
            );
        }
        Ok(Self {
            max_lr,
            total_steps,
            warmup_frac,
            warmup_floor,
            final_frac: 1e-3,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        let w = math::floor(self.warmup_frac * self.total_steps as f64 + 0.5) as usize;
        w.min(self.total_steps - 1)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            let t = step as f64 / warm as f64;
            return self.max_lr * (self.warmup_floor + (1.0 - self.warmup_floor) * t);
        }
        let last = self.total_steps - 1;
        let floor = self.max_lr * self.final_frac;
        if last <= warm {
            return self.max_lr;
        }
        let t = ((step.min(last) - warm) as f64) / ((last - warm) as f64);
        floor + (self.max_lr - floor) * 0.5 * (1.0 + math::cos(core::f64::consts::PI * t))
    }
}

/// Decoupled-weight-decay Adam. Moments are public so checkpoints can carry
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates taken so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[&Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update. `grads[i] == None` leaves parameter `i` and its moments
    /// untouched; weight decay applies only where `decay[i]`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len() {
            bail!(
                Contract,
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            );
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != p.shape() {
                bail!(Dimension, "gradient {:?} does not match parameter {:?}", g.shape(), p.shape());
            }
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= lr * (mh / (math::sqrt(vh) + self.eps) + wd * *x);
            }
            if !p.all_finite() {
                bail!(NonFinite, "parameter {} became non-finite", i);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_shape() {
        let s = OneCycle::new(8e-4, 2000, 0.05, 0.1).unwrap();
        assert_eq!(s.warmup_steps(), 100);
        assert!((s.lr(0) - 8e-5).abs() < 1e-18);
        assert_eq!(s.lr(100), 8e-4);
        assert!(s.lr(1999) <= 1e-2 * 8e-4);
        assert!((s.lr(1999) - 8e-7).abs() < 1e-18);
        for i in 1..100 {
            assert!(s.lr(i) > s.lr(i - 1));
        }
        for i in 101..2000 {
            assert!(s.lr(i) <= s.lr(i - 1));
        }
    }

    #[test]
    fn schedule_edge_cases() {
        let s = OneCycle::new(1.0, 1, 0.05, 0.1).unwrap();
        assert_eq!(s.lr(0), 1.0);
        let s = OneCycle::new(1.0, 10, 0.0, 0.1).unwrap();
        assert_eq!(s.lr(0), 1.0);
        assert!(OneCycle::new(0.0, 10, 0.05, 0.1).is_err());
        assert!(OneCycle::new(1.0, 10, 1.0, 0.1).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes |update| = lr on the first step
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamW::new(&[&p], 0.0);
        let g = Tensor::new(&[3], vec![0.3, -7.0, 1e-3]).unwrap();
        opt.step(vec![&mut p], &[Some(g)], &[true], 0.01).unwrap();
        let want = [0.99, -1.99, 0.49];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = Tensor::new(&[1], vec![2.0]).unwrap();
        let mut q = p.clone();
        let mut opt = AdamW::new(&[&p, &q], 0.5);
        let zero = Tensor::zeros(&[1]);
        opt.step(vec![&mut p, &mut q], &[Some(zero.clone()), Some(zero)], &[true, false], 0.1).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
        assert_eq!(q.data()[0], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::new(&[2], vec![3.0, -4.0]).unwrap();
        let mut opt = AdamW::new(&[&p], 0.0);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            opt.step(vec![&mut p], &[Some(g)], &[false], 0.01).unwrap();
        }
        assert!(p.max_abs() < 1e-2);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(&[&p], 0.1);
        opt.step(vec![&mut p], &[None], &[true], 0.1).unwrap();
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.t, 1);
    }
}
