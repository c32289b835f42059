//! Drivers behind the command-line subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mafnet_core::encoder::check_extents;
use mafnet_core::head::DisparityMap;
use mafnet_core::metrics::{compute_metrics, MetricsReport};
use mafnet_core::model::{forward_var, MafNetParams, ModelConfig, Stage};
use mafnet_core::params::ParamSet;
use mafnet_core::synth::{gen_dataset, StereoSample};
use mafnet_core::train::{crop_sample, evaluate, StepLog, Trainer};
use mafnet_core::Graph;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::image_io::{read_image, read_pfm, sample_paths, write_pfm, write_pgm, write_ppm};

/// Streams of the seeded generator used for each split.
pub const TRAIN_STREAM: u64 = 0;
pub const VAL_STREAM: u64 = 1;

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<StereoSample>,
    pub val: Vec<StereoSample>,
}

pub fn generate(cfg: &RunConfig) -> Result<Datasets> {
    let make = |stream, count| gen_dataset(cfg.seed, stream, count, cfg.height, cfg.width, cfg.dmax);
    Ok(Datasets {
        train: make(TRAIN_STREAM, cfg.train_pairs)?,
        val: make(VAL_STREAM, cfg.val_pairs)?,
    })
}

/// Write `train/` and `val/` splits under `dir`; returns the pair count.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<usize> {
    let data = generate(cfg)?;
    for (name, split) in [("train", &data.train), ("val", &data.val)] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, s) in split.iter().enumerate() {
            let [l, r, d] = sample_paths(&sub, i);
            write_ppm(&s.left, &l)?;
            write_ppm(&s.right, &r)?;
            write_pfm(&s.gt, &d)?;
        }
    }
    Ok(data.train.len() + data.val.len())
}

/// Consecutively numbered samples of one split directory, stopping at the
/// first missing index.
pub fn load_split(dir: &Path) -> Result<Vec<StereoSample>> {
    let mut out = Vec::new();
    loop {
        let [l, r, d] = sample_paths(dir, out.len());
        if !l.exists() {
            break;
        }
        let sample = StereoSample {
            left: read_image(&l)?,
            right: read_image(&r)?,
            gt: read_pfm(&d)?,
        };
        let (h, w) = (sample.gt.height(), sample.gt.width());
        if sample.left.shape() != [3, h, w] || sample.right.shape() != [3, h, w] {
            return Err(config_err!("{}: images and disparity differ in extent", l.display()));
        }
        out.push(sample);
    }
    Ok(out)
}

/// Splits from `cfg.data_dir` when set, otherwise generated from the seed.
pub fn datasets(cfg: &RunConfig) -> Result<Datasets> {
    let Some(dir) = &cfg.data_dir else {
        return generate(cfg);
    };
    let train = load_split(&dir.join("train"))?;
    if train.is_empty() {
        return Err(config_err!("{}: no training samples", dir.join("train").display()));
    }
    Ok(Datasets {
        train,
        val: load_split(&dir.join("val"))?,
    })
}

/// Centre crop to the model extents, which the attention projections fix.
pub fn fit(samples: &[StereoSample], model: &ModelConfig) -> Result<Vec<StereoSample>> {
    let (h, w) = (model.height, model.width);
    samples
        .iter()
        .map(|s| {
            let (sh, sw) = (s.gt.height(), s.gt.width());
            if sh < h || sw < w {
                return Err(config_err!("sample {sh}x{sw} is smaller than the model extents {h}x{w}"));
            }
            Ok(crop_sample(s, (sh - h) / 2, (sw - w) / 2, h, w)?)
        })
        .collect()
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("checkpoint.mafckpt"))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub last: Option<StepLog>,
    /// Metrics on the training pairs.
    pub train_metrics: MetricsReport,
    /// Metrics on the held-out split, when there is one.
    pub val_metrics: Option<MetricsReport>,
}

/// Step `trainer` until its schedule ends or `stop_at` steps are complete,
/// then evaluate both splits.
pub fn run_train(
    trainer: Trainer,
    data: &Datasets,
    stop_at: Option<usize>,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = trainer;
    let end = stop_at.unwrap_or(usize::MAX).min(trainer.cfg.steps);
    let mut last = None;
    while trainer.step < end {
        let log = trainer.train_step(&data.train)?;
        on_step(&log)?;
        last = Some(log);
    }
    let model = trainer.cfg.model;
    let train_metrics = evaluate(&model, &trainer.params, &fit(&data.train, &model)?, 4)?;
    let val_metrics = if data.val.is_empty() {
        None
    } else {
        Some(evaluate(&model, &trainer.params, &fit(&data.val, &model)?, 4)?)
    };
    Ok(TrainOutcome {
        trainer,
        last,
        train_metrics,
        val_metrics,
    })
}

pub fn metrics_json(m: &MetricsReport) -> serde_json::Value {
    json!({ "epe": m.epe, "bad3": m.bad3, "d1": m.d1, "n_valid": m.n_valid })
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub disparity: DisparityMap,
    /// Seconds spent in each stage, in execution order.
    pub timings: Vec<(Stage, f64)>,
}

/// Full-resolution disparity of one `[3, H, W]` pair.
pub fn infer(model: &ModelConfig, params: &MafNetParams, left: &mafnet_core::Tensor, right: &mafnet_core::Tensor) -> Result<Inference> {
    if left.rank() != 3 || left.shape() != right.shape() {
        return Err(config_err!("left {:?} and right {:?} must be equal [3, H, W] images", left.shape(), right.shape()));
    }
    let (h, w) = (left.dim(1), left.dim(2));
    check_extents(h, w)?;
    if (h, w) != (model.height, model.width) {
        return Err(config_err!(
            "the checkpoint was trained for {}x{} inputs, got {h}x{w}",
            model.height,
            model.width
        ));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let l = g.constant(left.clone().reshape(&[1, 3, h, w])?);
    let r = g.constant(right.clone().reshape(&[1, 3, h, w])?);
    let mut timings = Vec::new();
    let mut t0 = Instant::now();
    let out = forward_var(&mut g, model, &vars, l, r, |stage| {
        timings.push((stage, t0.elapsed().as_secs_f64()));
        t0 = Instant::now();
    })?;
    let d1 = g.value(out.d1).clone().reshape(&[h, w])?;
    Ok(Inference {
        disparity: DisparityMap::dense(d1)?,
        timings,
    })
}

/// Write `disparity.pfm` and `disparity.pgm` into `dir`.
pub fn write_disparity(map: &DisparityMap, dmax: f64, dir: &Path) -> Result<[PathBuf; 2]> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pfm = dir.join("disparity.pfm");
    let pgm = dir.join("disparity.pgm");
    write_pfm(map, &pfm)?;
    write_pgm(map, dmax, &pgm)?;
    Ok([pfm, pgm])
}

/// Metrics of a predicted PFM against a ground-truth PFM.
pub fn eval_files(pred: &Path, gt: &Path) -> Result<MetricsReport> {
    Ok(compute_metrics(&read_pfm(pred)?, &read_pfm(gt)?)?)
}
