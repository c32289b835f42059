use std::path::Path;

use mafnet::checkpoint::{self, decode, encode, MAGIC};
use mafnet::commands::{generate, run_train};
use mafnet::config::RunConfig;
use mafnet::Error;
use mafnet_core::train::Trainer;

const TINY: &str = "
height = 32
width = 64
dmax = 8
max_disp = 16
groups = 4
rank = 32
d_attn = 8
steps = 6
crop_height = 32
crop_width = 64
train_pairs = 3
val_pairs = 1
";

fn tiny() -> RunConfig {
    RunConfig::parse_str(TINY).unwrap()
}

fn config_error(text: &str) -> String {
    match RunConfig::parse_str(text) {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error for {text:?}, got {other:?}"),
    }
}

#[test]
fn config_rejects_bad_input() {
    assert!(config_error("stpes = 10").contains("unknown key"));
    assert!(config_error("seed = 1\nseed = 2").contains("twice"));
    assert!(config_error("steps = ten").contains("steps"));
    assert!(config_error("steps = 0").contains("steps"));
    assert!(config_error("batch = 0").contains("batch"));
    assert!(config_error("crop_width = 100").contains("multiple of 32"));
    assert!(config_error("crop_height = 96").contains("exceeds"));
    assert!(config_error("just words").contains("key = value"));
}

#[test]
fn config_comments_and_whitespace() {
    let cfg = RunConfig::parse_str("# header\n\n  seed=5   # trailing\nmax_lr = 1e-3\n").unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.max_lr, 1e-3);
}

#[test]
fn defaults_are_the_desk_regime() {
    let cfg = RunConfig::default();
    assert_eq!((cfg.crop_height, cfg.crop_width, cfg.batch, cfg.steps), (64, 128, 2, 2000));
    assert_eq!((cfg.max_lr, cfg.lambda0, cfg.lambda1), (8e-4, 0.3, 1.0));
}

#[test]
fn paths_do_not_change_the_hash() {
    let a = tiny();
    let mut b = a.clone();
    b.out_dir = "elsewhere".into();
    b.checkpoint = Some("x.mafckpt".into());
    b.log_every = 3;
    assert_eq!(a.hash(), b.hash());
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = tiny();
    let data = generate(&cfg).unwrap();
    let trainer = Trainer::new(cfg.train_config()).unwrap();
    let out = run_train(trainer, &data, Some(2), |_| Ok(())).unwrap();
    let bytes = encode(&out.trainer, &cfg.hash());
    assert!(bytes.starts_with(MAGIC));
    let back = decode(&bytes, &cfg, Path::new("mem")).unwrap();
    assert_eq!(back, out.trainer);
    assert_eq!(encode(&back, &cfg.hash()), bytes);

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.mafckpt"), dir.path().join("b.mafckpt"));
    checkpoint::save(&out.trainer, &cfg, &p1).unwrap();
    checkpoint::save(&checkpoint::load(&cfg, &p1).unwrap(), &cfg, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn checkpoint_refuses_other_configs_and_damage() {
    let cfg = tiny();
    let trainer = Trainer::new(cfg.train_config()).unwrap();
    let bytes = encode(&trainer, &cfg.hash());
    let mut other = cfg.clone();
    other.max_lr = 1e-3;
    assert!(matches!(decode(&bytes, &other, Path::new("m")), Err(Error::Config(_))));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(decode(&bad_magic, &cfg, Path::new("m")).is_err());
    assert!(decode(&bytes[..bytes.len() - 1], &cfg, Path::new("m")).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode(&trailing, &cfg, Path::new("m")).is_err());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let cfg = tiny();
    let data = generate(&cfg).unwrap();
    let mut straight = Vec::new();
    let full = run_train(Trainer::new(cfg.train_config()).unwrap(), &data, None, |s| {
        straight.push(s.loss.to_bits());
        Ok(())
    })
    .unwrap();

    let half = run_train(Trainer::new(cfg.train_config()).unwrap(), &data, Some(3), |_| Ok(())).unwrap();
    let restored = decode(&encode(&half.trainer, &cfg.hash()), &cfg, Path::new("m")).unwrap();
    let mut resumed = Vec::new();
    let rest = run_train(restored, &data, None, |s| {
        resumed.push(s.loss.to_bits());
        Ok(())
    })
    .unwrap();
    assert_eq!(resumed, straight[3..]);
    assert_eq!(rest.trainer, full.trainer);
    assert_eq!(rest.train_metrics, full.train_metrics);
}
