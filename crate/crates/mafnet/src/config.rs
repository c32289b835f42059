//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mafnet_core::head::LossConfig;
use mafnet_core::model::ModelConfig;
use mafnet_core::train::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Extents of generated images.
    pub height: usize,
    pub width: usize,
    /// Largest generated disparity in pixels.
    pub dmax: f64,
    /// Largest disparity the network can express; a multiple of 4.
    pub max_disp: usize,
    pub groups: usize,
    /// Rank of the low-rank token projections.
    pub rank: usize,
    pub d_attn: usize,
    pub use_affa: bool,
    pub batch: usize,
    pub steps: usize,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub warmup_floor: f64,
    pub weight_decay: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub seed: u64,
    pub crop_height: usize,
    pub crop_width: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub log_every: usize,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            dmax: 32.0,
            max_disp: 48,
            groups: 8,
            rank: 256,
            d_attn: 32,
            use_affa: true,
            batch: 2,
            steps: 2000,
            max_lr: 8e-4,
            warmup_frac: 0.05,
            warmup_floor: 0.1,
            weight_decay: 1e-4,
            lambda0: 0.3,
            lambda1: 1.0,
            seed: 0,
            crop_height: 64,
            crop_width: 128,
            train_pairs: 20,
            val_pairs: 10,
            log_every: 50,
            data_dir: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err!("{key}: cannot parse {value:?}"))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err!("line {}: expected `key = value`", no + 1));
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(config_err!("line {}: {key} given twice", no + 1));
            }
            cfg.set(key, value)
                .map_err(|e| config_err!("line {}: {}", no + 1, e.to_string().trim_start_matches("config: ")))?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "dmax" => self.dmax = parse(key, v)?,
            "max_disp" => self.max_disp = parse(key, v)?,
            "groups" => self.groups = parse(key, v)?,
            "rank" => self.rank = parse(key, v)?,
            "d_attn" => self.d_attn = parse(key, v)?,
            "use_affa" => self.use_affa = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "max_lr" => self.max_lr = parse(key, v)?,
            "warmup_frac" => self.warmup_frac = parse(key, v)?,
            "warmup_floor" => self.warmup_floor = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lambda0" => self.lambda0 = parse(key, v)?,
            "lambda1" => self.lambda1 = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "crop_height" => self.crop_height = parse(key, v)?,
            "crop_width" => self.crop_width = parse(key, v)?,
            "train_pairs" => self.train_pairs = parse(key, v)?,
            "val_pairs" => self.val_pairs = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(config_err!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch", self.batch),
            ("steps", self.steps),
            ("train_pairs", self.train_pairs),
            ("log_every", self.log_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(config_err!("{name} must be positive"));
            }
        }
        if !self.crop_height.is_multiple_of(32) || !self.crop_width.is_multiple_of(32) || self.crop_height == 0 || self.crop_width == 0 {
            return Err(config_err!(
                "crop {}x{} must be a positive multiple of 32",
                self.crop_height,
                self.crop_width
            ));
        }
        if self.crop_height > self.height || self.crop_width > self.width {
            return Err(config_err!(
                "crop {}x{} exceeds the image {}x{}",
                self.crop_height,
                self.crop_width,
                self.height,
                self.width
            ));
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.crop_height,
            width: self.crop_width,
            max_disp: self.max_disp,
            groups: self.groups,
            rank: self.rank,
            d_attn: self.d_attn,
            use_affa: self.use_affa,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            loss: LossConfig {
                lambda0: self.lambda0,
                lambda1: self.lambda1,
            },
            batch: self.batch,
            steps: self.steps,
            max_lr: self.max_lr,
            warmup_frac: self.warmup_frac,
            warmup_floor: self.warmup_floor,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    /// Every key except paths and logging cadence, one `key = value` per line
    /// in a fixed order. Floats use the shortest exact representation.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "dmax = {:?}", self.dmax);
        let _ = writeln!(s, "max_disp = {}", self.max_disp);
        let _ = writeln!(s, "groups = {}", self.groups);
        let _ = writeln!(s, "rank = {}", self.rank);
        let _ = writeln!(s, "d_attn = {}", self.d_attn);
        let _ = writeln!(s, "use_affa = {}", self.use_affa);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "max_lr = {:?}", self.max_lr);
        let _ = writeln!(s, "warmup_frac = {:?}", self.warmup_frac);
        let _ = writeln!(s, "warmup_floor = {:?}", self.warmup_floor);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "lambda0 = {:?}", self.lambda0);
        let _ = writeln!(s, "lambda1 = {:?}", self.lambda1);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "crop_height = {}", self.crop_height);
        let _ = writeln!(s, "crop_width = {}", self.crop_width);
        let _ = writeln!(s, "train_pairs = {}", self.train_pairs);
        let _ = writeln!(s, "val_pairs = {}", self.val_pairs);
        s
    }

    /// SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::parse_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn canonical_reparses() {
        let cfg = RunConfig::parse_str("seed = 7\nmax_lr = 3e-4\nuse_affa = false\n").unwrap();
        let again = RunConfig::parse_str(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }
}
