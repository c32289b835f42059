//! Training loop state: parameters, optimizer, schedule and step counter.
//!
//! Every random choice of step `s` comes from a stream derived from the seed
//! and `s`, so resuming from a saved state replays the same trajectory.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::head::{DisparityMap, LossConfig};
use crate::init::Rng;
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{loss_var, predict, MafNetParams, ModelConfig};
use crate::optim::{AdamW, OneCycle};
use crate::params::ParamSet;
use crate::synth::StereoSample;
use crate::tensor::Tensor;

/// Stream used for parameter initialization; steps use `1 + step`.
const INIT_STREAM: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub batch: usize,
    pub steps: usize,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub warmup_floor: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            batch: 2,
            steps: 2000,
            max_lr: 8e-4,
            warmup_frac: 0.05,
            warmup_floor: 0.1,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<OneCycle> {
        OneCycle::new(self.max_lr, self.steps, self.warmup_frac, self.warmup_floor)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        if self.batch == 0 {
            bail!(Config, "batch size must be positive");
        }
        if self.loss.lambda0 < 0.0 || self.loss.lambda1 < 0.0 {
            bail!(Config, "loss weights must be non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "weight decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: MafNetParams,
    pub opt: AdamW,
    /// Steps completed.
    pub step: usize,
}

/// Crop `[3, H, W]` images and their ground truth to the model extents.
///
/// Ground-truth pixels whose match leaves the cropped right view become
/// invalid.
pub fn crop_sample(s: &StereoSample, y0: usize, x0: usize, h: usize, w: usize) -> Result<StereoSample> {
    let (sh, sw) = (s.gt.height(), s.gt.width());
    if y0 + h > sh || x0 + w > sw {
        bail!(Dimension, "crop {}x{} at ({}, {}) leaves the {}x{} image", h, w, y0, x0, sh, sw);
    }
    let img = |t: &Tensor| {
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            t.data()[(c * sh + y0 + y) * sw + x0 + x]
        })
    };
    let mut vals = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let src = (y0 + y) * sw + x0 + x;
            let d = s.gt.values.data()[src];
            vals.push(d);
            valid.push(s.gt.valid[src] && x as f64 - d >= 0.0);
        }
    }
    Ok(StereoSample {
        left: img(&s.left),
        right: img(&s.right),
        gt: DisparityMap::new(Tensor::new(&[h, w], vals)?, valid)?,
    })
}

/// Stack `[3, H, W]` images into `[B, 3, H, W]`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        bail!(Contract, "cannot stack an empty batch");
    };
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for t in images {
        if t.shape() != s.as_slice() {
            bail!(Dimension, "batch images differ: {:?} vs {:?}", s, t.shape());
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = alloc::vec![images.len()];
    shape.extend_from_slice(&s);
    Tensor::new(&shape, data)
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = MafNetParams::init(&cfg.model, &mut Rng::derived(cfg.seed, INIT_STREAM))?;
        let opt = AdamW::new(&params.tensors(), cfg.weight_decay);
        Ok(Self { cfg, params, opt, step: 0 })
    }

    /// Draw the batch of the current step: samples with replacement, each
    /// randomly cropped to the model extents.
    pub fn batch(&self, data: &[StereoSample]) -> Result<Vec<StereoSample>> {
        if data.is_empty() {
            bail!(Contract, "training set is empty");
        }
        let mut rng = Rng::derived(self.cfg.seed, 1 + self.step as u64);
        let (h, w) = (self.cfg.model.height, self.cfg.model.width);
        (0..self.cfg.batch)
            .map(|_| {
                let s = &data[rng.below(data.len())];
                let (sh, sw) = (s.gt.height(), s.gt.width());
                if sh < h || sw < w {
                    bail!(Dimension, "sample {}x{} is smaller than the crop {}x{}", sh, sw, h, w);
                }
                let y0 = rng.below(sh - h + 1);
                let x0 = rng.below(sw - w + 1);
                crop_sample(s, y0, x0, h, w)
            })
            .collect()
    }

    /// One optimizer update.
    pub fn train_step(&mut self, data: &[StereoSample]) -> Result<StepLog> {
        if self.step >= self.cfg.steps {
            bail!(Contract, "schedule of {} steps already completed", self.cfg.steps);
        }
        let batch = self.batch(data)?;
        let left = stack_images(&batch.iter().map(|s| &s.left).collect::<Vec<_>>())?;
        let right = stack_images(&batch.iter().map(|s| &s.right).collect::<Vec<_>>())?;
        let gt: Vec<DisparityMap> = batch.into_iter().map(|s| s.gt).collect();

        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let (l, r) = (g.constant(left), g.constant(right));
        let loss = match loss_var(&mut g, &self.cfg.model, &self.cfg.loss, &vars, l, r, &gt) {
            Err(crate::Error::NonFinite(msg)) => bail!(NonFinite, "step {}: {}", self.step, msg),
            other => other?,
        };
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grads: Vec<Option<Tensor>> = MafNetParams::vars(&vars).into_iter().map(|v| grads.take(v)).collect();
        drop(g);
        let lr = self.cfg.schedule()?.lr(self.step);
        let decay = self.params.decay_mask();
        if let Err(e) = self.opt.step(self.params.tensors_mut(), &grads, &decay, lr) {
            match e {
                crate::Error::NonFinite(msg) => bail!(NonFinite, "step {}: {}", self.step, msg),
                other => return Err(other),
            }
        }
        let log = StepLog { step: self.step, loss: value, lr };
        self.step += 1;
        Ok(log)
    }
}

/// Pooled metrics of full-resolution predictions, `chunk` samples per pass.
pub fn evaluate(cfg: &ModelConfig, params: &MafNetParams, data: &[StereoSample], chunk: usize) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    for part in data.chunks(chunk.max(1)) {
        let left = stack_images(&part.iter().map(|s| &s.left).collect::<Vec<_>>())?;
        let right = stack_images(&part.iter().map(|s| &s.right).collect::<Vec<_>>())?;
        let pred = predict(cfg, params, &left, &right)?;
        for (i, s) in part.iter().enumerate() {
            acc.add(&pred.disparity(i)?, &s.gt)?;
        }
    }
    acc.finish()
}
