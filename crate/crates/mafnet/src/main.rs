use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mafnet::bench::{format_report, run_bench, BenchPlan};
use mafnet::commands::{self, checkpoint_path, metrics_json};
use mafnet::config::RunConfig;
use mafnet::error::{Error, Result};
use mafnet::gradsuite::{format_table, run_gradcheck};
use mafnet::image_io::read_image;
use mafnet::{checkpoint, gradsuite};
use mafnet_core::train::Trainer;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mafnet", version, about = "Multi-frequency adaptive stereo matching")]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/ and val/ splits into the output directory.
    GenData,
    /// Train, then save a checkpoint and report metrics.
    Train {
        /// Continue from the checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
        /// Stop once this many steps are complete.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Predict the disparity of one image pair (PPM or PGM).
    Infer { left: PathBuf, right: PathBuf },
    /// Score the checkpoint on the held-out split, or a PFM against a PFM.
    Eval {
        #[arg(requires = "gt")]
        pred: Option<PathBuf>,
        gt: Option<PathBuf>,
    },
    /// Time full against low-rank attention.
    Bench {
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Finite-difference gradient checks of every module.
    Gradcheck {
        /// Scale the backward output of this tape op (fault injection).
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(c) = &cli.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn train(cfg: &RunConfig, resume: bool, stop_at: Option<usize>) -> Result<()> {
    let ckpt = checkpoint_path(cfg);
    let trainer = if resume {
        checkpoint::load(cfg, &ckpt)?
    } else {
        Trainer::new(cfg.train_config())?
    };
    let data = commands::datasets(cfg)?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log = if resume && log_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map(BufWriter::new)
            .map_err(|e| Error::io(&log_path, e))?
    } else {
        create(log_path.clone())?
    };
    let every = cfg.log_every;
    let outcome = commands::run_train(trainer, &data, stop_at, |s| {
        let line = json!({ "step": s.step, "loss": s.loss, "lr": s.lr });
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if s.step % every == 0 {
            println!("{line}");
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    checkpoint::save(&outcome.trainer, cfg, &ckpt)?;
    let summary = json!({
        "step": outcome.trainer.step,
        "loss": outcome.last.map(|l| l.loss),
        "train": metrics_json(&outcome.train_metrics),
        "val": outcome.val_metrics.as_ref().map(metrics_json),
        "checkpoint": ckpt.display().to_string(),
    });
    let path = cfg.out_dir.join("metrics.json");
    fs::write(&path, format!("{summary}\n")).map_err(|e| Error::io(&path, e))?;
    println!("{summary}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = run_config(&cli)?;
    match cli.command {
        Command::GenData => {
            let n = commands::gen_data(&cfg, &cfg.out_dir)?;
            println!("wrote {n} pairs to {}", cfg.out_dir.display());
        }
        Command::Train { resume, stop_at } => train(&cfg, resume, stop_at)?,
        Command::Infer { left, right } => {
            let trainer = checkpoint::load(&cfg, &checkpoint_path(&cfg))?;
            let (l, r) = (read_image(&left)?, read_image(&right)?);
            let inf = commands::infer(&trainer.cfg.model, &trainer.params, &l, &r)?;
            for (stage, secs) in &inf.timings {
                println!("{:<8} {:>9.3} ms", stage.name(), secs * 1e3);
            }
            let [pfm, pgm] = commands::write_disparity(&inf.disparity, cfg.max_disp as f64, &cfg.out_dir)?;
            println!("wrote {} and {}", pfm.display(), pgm.display());
        }
        Command::Eval { pred, gt } => {
            let report = match (pred, gt) {
                (Some(p), Some(g)) => commands::eval_files(&p, &g)?,
                _ => {
                    let trainer = checkpoint::load(&cfg, &checkpoint_path(&cfg))?;
                    let data = commands::datasets(&cfg)?;
                    if data.val.is_empty() {
                        return Err(Error::Config("no held-out samples to evaluate".into()));
                    }
                    let model = trainer.cfg.model;
                    let val = commands::fit(&data.val, &model)?;
                    mafnet_core::train::evaluate(&model, &trainer.params, &val, 4)?
                }
            };
            println!("{}", metrics_json(&report));
        }
        Command::Bench { runs, ns, ks } => {
            let mut plan = BenchPlan {
                runs,
                seed: cfg.seed,
                ..BenchPlan::default()
            };
            if let Some(ns) = ns {
                plan.ns = ns;
            }
            if let Some(ks) = ks {
                plan.ks = ks;
            }
            let report = format_report(&run_bench(&plan)?);
            print!("{report}");
            let path = cfg.out_dir.join("bench.jsonl");
            create(path.clone())?
                .write_all(report.as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        Command::Gradcheck { corrupt_op } => {
            let rows = run_gradcheck(cfg.seed, corrupt_op.as_deref())?;
            print!("{}", format_table(&rows));
            let failed: Vec<_> = gradsuite::module_summary(&rows)
                .into_iter()
                .filter(|m| !m.2)
                .map(|m| m.0)
                .collect();
            if !failed.is_empty() {
                return Err(Error::Numerical(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
