//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. After the overfit run a supplementary `check` line
//! reports zero-disparity inference on identical views; it is printed with
//! its real status but does not affect the exit code. Criterion numbers given as arguments restrict the
//! run, e.g. `cargo test --test acceptance -- 1 2 9`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use mafnet::bench::{run_bench, BenchPlan};
use mafnet::commands::{fit, generate, infer, run_train, Datasets, TrainOutcome};
use mafnet::config::RunConfig;
use mafnet::gradsuite::{module_summary, run_gradcheck};
use mafnet::image_io::{decode_pfm, encode_pfm, Endian};
use mafnet_core::aahf::{full_attention, identity, lin_attention};
use mafnet_core::affa::{affa_forward, by_radius, decompose, high_band_energy_ratio, radial_grid, soft_masks, AffaParams};
use mafnet_core::cost_volume::{build_gwc, gwc_oracle};
use mafnet_core::fft::{hermitian_weight, irfft2, rfft2};
use mafnet_core::head::DisparityMap;
use mafnet_core::init::Rng;
use mafnet_core::metrics::compute_metrics;
use mafnet_core::train::Trainer;
use mafnet_core::Tensor;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn cost_volume_oracle() -> Verdict {
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    let instances = 150;
    for _ in 0..instances {
        let groups = 1 + rng.below(4);
        let nc = groups * (1 + rng.below(8 / groups));
        let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
        let d = 1 + rng.below(4.min(w));
        let b = 1 + rng.below(2);
        let (l, r) = (random(&[b, nc, h, w], &mut rng), random(&[b, nc, h, w], &mut rng));
        let fast = build_gwc(&l, &r, d, groups).unwrap();
        let slow = gwc_oracle(&l, &r, d, groups).unwrap();
        worst = worst.max(fast.volume.max_abs_diff(&slow.volume));
    }
    verdict(worst <= 1e-12, format!("{instances} instances, max |diff| {worst:.2e} (limit 1e-12)"))
}

fn attention_oracle() -> Verdict {
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    let instances = 150;
    for _ in 0..instances {
        let (n, d, dv) = (1 + rng.below(64), 1 + rng.below(16), 1 + rng.below(16));
        let (q, k, v) = (random(&[n, d], &mut rng), random(&[n, d], &mut rng), random(&[n, dv], &mut rng));
        let id = identity(n);
        let lin = lin_attention(&q, &k, &v, &id, &id).unwrap();
        worst = worst.max(lin.max_abs_diff(&full_attention(&q, &k, &v).unwrap()));
    }
    verdict(worst <= 1e-9, format!("{instances} instances, max |diff| {worst:.2e} (limit 1e-9)"))
}

fn fft_suite() -> Verdict {
    let mut rng = Rng::new(3);
    let (mut round, mut linear, mut parseval) = (0.0f64, 0.0f64, 0.0f64);
    let mut sizes: Vec<(usize, usize)> = (4..=32).map(|n| (n, n)).collect();
    for h in [4, 8, 16, 32] {
        for w in [4, 8, 16, 32] {
            sizes.push((h, w));
        }
    }
    for &(h, w) in &sizes {
        let (x, y) = (random(&[h, w], &mut rng), random(&[h, w], &mut rng));
        let fx = rfft2(&x).unwrap();
        round = round.max(irfft2(&fx, w).unwrap().max_abs_diff(&x));

        let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        let mix = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
        let (fy, fm) = (rfft2(&y).unwrap(), rfft2(&mix).unwrap());
        let combo = fx
            .as_interleaved()
            .zip_map(fy.as_interleaved(), |u, v| a * u + b * v)
            .unwrap();
        linear = linear.max(fm.as_interleaved().max_abs_diff(&combo));

        let time: f64 = x.data().iter().map(|v| v * v).sum();
        let mut freq = 0.0;
        for k in 0..h {
            for l in 0..w / 2 + 1 {
                let (re, im) = fx.get(&[k, l]);
                freq += hermitian_weight(l, w) * (re * re + im * im);
            }
        }
        parseval = parseval.max((time - freq / (h * w) as f64).abs() / time);
    }
    verdict(
        round <= 1e-9 && linear <= 1e-9 && parseval <= 1e-6,
        format!(
            "{} sizes 4x4..32x32: round trip {round:.1e}, linearity {linear:.1e}, Parseval rel {parseval:.1e}",
            sizes.len()
        ),
    )
}

fn affa_invariants() -> Verdict {
    let mut rng = Rng::new(4);
    let mut complementary = true;
    for _ in 0..20 {
        let p = AffaParams::init(4, &mut rng);
        let maps = affa_forward(&random(&[2, 4, 8, 16], &mut rng).scale(4.0), &p).unwrap();
        complementary &= maps.a_low.data().iter().zip(maps.a_high.data()).all(|(a, b)| a + b == 1.0);
    }

    let mut split: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..20 {
        let mut p = AffaParams::init(3, &mut rng);
        let tau = rng.uniform(0.05, 0.95);
        let gamma = rng.uniform(0.01, 0.5);
        p.set_thresholds(tau, tau, gamma).unwrap();
        let grid = radial_grid(16, 16).unwrap();
        let x = random(&[1, 3, 16, 16], &mut rng);
        let (ml, mh) = soft_masks(&grid, &p).unwrap();
        let (lo, hi) = decompose(&x, &ml, &mh).unwrap();
        split = split.max(lo.zip_map(&hi, |a, b| a + b).unwrap().max_abs_diff(&x));

        let tl = rng.uniform(0.05, 0.5);
        p.set_thresholds(tl, rng.uniform(tl, 0.95), gamma).unwrap();
        let (ml, mh) = soft_masks(&grid, &p).unwrap();
        monotone &= by_radius(&grid, &ml).windows(2).all(|w| w[1].1 <= w[0].1);
        monotone &= by_radius(&grid, &mh).windows(2).all(|w| w[1].1 >= w[0].1);
    }

    let x = Tensor::from_fn(&[1, 1, 8, 8], |i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 });
    let mut p = AffaParams::init(1, &mut rng);
    p.set_thresholds(0.5, 0.5, 0.05).unwrap();
    let (ml, mh) = soft_masks(&radial_grid(8, 8).unwrap(), &p).unwrap();
    let (_, xh) = decompose(&x, &ml, &mh).unwrap();
    let nyquist = high_band_energy_ratio(&x, &xh);

    verdict(
        complementary && split <= 1e-9 && monotone && nyquist >= 0.99,
        format!(
            "a_low + a_high == 1: {complementary}; equal-threshold split {split:.1e}; monotone: {monotone}; checkerboard high-band energy {:.4}%",
            100.0 * nyquist
        ),
    )
}

fn gradient_suite() -> Verdict {
    let t0 = Instant::now();
    let rows = run_gradcheck(0, None).unwrap();
    let summary = module_summary(&rows);
    let all = summary.iter().all(|m| m.2);
    // negative control: one corrupted backward rule fails exactly its module
    let corrupted = run_gradcheck(0, Some("spectral_mask")).unwrap();
    let failing: Vec<&str> = module_summary(&corrupted).into_iter().filter(|m| !m.2).map(|m| m.0).collect();
    let secs = t0.elapsed().as_secs_f64();
    let parts: Vec<String> = summary.iter().map(|(m, e, _)| format!("{m} {e:.1e}")).collect();
    verdict(
        all && failing == ["affa"] && secs < 300.0,
        format!(
            "{} ({} tensors); corrupted spectral_mask fails {:?}; {:.0} s",
            parts.join(", "),
            rows.len(),
            failing,
            secs
        ),
    )
}

fn desk_config(seed: u64, use_affa: bool) -> RunConfig {
    RunConfig {
        seed,
        use_affa,
        ..RunConfig::default()
    }
}

fn train_desk(cfg: &RunConfig) -> (Datasets, TrainOutcome) {
    let data = generate(cfg).unwrap();
    let t0 = Instant::now();
    let label = if cfg.use_affa { "full" } else { "baseline" };
    let out = run_train(Trainer::new(cfg.train_config()).unwrap(), &data, None, |s| {
        if (s.step + 1) % 500 == 0 {
            eprintln!(
                "  [{label} seed {}] step {} loss {:.4} ({:.0} s)",
                cfg.seed,
                s.step + 1,
                s.loss,
                t0.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })
    .unwrap();
    (data, out)
}

fn overfit(data: &Datasets, out: &TrainOutcome) -> (Verdict, Verdict) {
    let m = &out.train_metrics;
    let main = verdict(
        m.epe <= 1.0 && m.bad3 <= 0.05,
        format!(
            "training-pair EPE {:.3} px (limit 1.0), Bad-3.0 {:.2}% (limit 5%), final loss {:.4}",
            m.epe,
            100.0 * m.bad3,
            out.last.map_or(f64::NAN, |l| l.loss)
        ),
    );
    // identical views must read as zero disparity
    let model = out.trainer.cfg.model;
    let mut medians = Vec::new();
    for s in fit(&data.train, &model).unwrap().iter().take(5) {
        let inf = infer(&model, &out.trainer.params, &s.left, &s.left).unwrap();
        let mut v = inf.disparity.values.data().to_vec();
        v.sort_by(f64::total_cmp);
        medians.push(v[v.len() / 2]);
    }
    let worst = medians.iter().copied().fold(0.0, f64::max);
    let sanity = verdict(worst <= 1.0, format!("largest median disparity over 5 identical pairs {worst:.3} px (limit 1.0)"));
    (main, sanity)
}

fn complexity() -> Verdict {
    let plan = BenchPlan {
        ns: vec![256, 8192, 16384],
        ks: vec![256],
        d_attn: 32,
        runs: 10,
        seed: 0,
    };
    let recs = run_bench(&plan).unwrap();
    let at = |n| recs.iter().find(|r| r.n == n).unwrap();
    let (small, mid, big) = (at(256), at(8192), at(16384));
    let ratio = big.t_lin / big.t_full;
    let lin_growth = big.t_lin / mid.t_lin;
    let full_growth = big.t_full / mid.t_full;
    let degenerate = small.t_full.max(small.t_lin) / small.t_full.min(small.t_lin);
    verdict(
        ratio <= 0.5 && lin_growth <= 2.6 && full_growth >= 3.0 && degenerate <= 2.0,
        format!(
            "N=16384 k=256: lin {:.3} s / full {:.3} s = {ratio:.3} (limit 0.5); 8192->16384 growth lin {lin_growth:.2}x (limit 2.6), full {full_growth:.2}x (min 3.0); N=k=256 ratio {degenerate:.2} (limit 2)",
            big.t_lin, big.t_full
        ),
    )
}

fn ablation(first: Option<f64>) -> Verdict {
    let mut full = Vec::new();
    let mut base = Vec::new();
    for seed in 0..3u64 {
        let f = match (seed, first) {
            (0, Some(epe)) => epe,
            _ => train_desk(&desk_config(seed, true)).1.val_metrics.unwrap().epe,
        };
        full.push(f);
        base.push(train_desk(&desk_config(seed, false)).1.val_metrics.unwrap().epe);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, mb) = (mean(&full), mean(&base));
    let fmt = |v: &[f64]| v.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>().join("/");
    verdict(
        mf <= mb,
        format!("held-out EPE full {mf:.3} ({}) vs no-AFFA {mb:.3} ({}) over seeds 0/1/2", fmt(&full), fmt(&base)),
    )
}

fn metric_definitions() -> Verdict {
    let dense = |v: &[f64]| DisparityMap::dense(Tensor::new(&[10, 10], v.to_vec()).unwrap()).unwrap();
    let gt = vec![10.0; 100];
    let mut pred = gt.clone();
    pred[42] = 14.0;
    let a = compute_metrics(&dense(&pred), &dense(&gt)).unwrap();
    let first = a.epe == 0.04 && a.bad3 == 0.01 && a.d1 == 0.01;

    let mut gt = vec![10.0; 100];
    gt[7] = 100.0;
    let mut pred = gt.clone();
    pred[7] = 96.0;
    let b = compute_metrics(&dense(&pred), &dense(&gt)).unwrap();
    let second = b.bad3 == 0.01 && b.d1 == 0.0;

    let mut rng = Rng::new(9);
    let vals = Tensor::from_fn(&[17, 23], |_| rng.uniform(0.0, 300.0) as f32 as f64);
    let valid: Vec<bool> = (0..17 * 23).map(|i| i % 11 != 0).collect();
    let map = DisparityMap::new(vals, valid).unwrap();
    let mut lossless = true;
    for endian in [Endian::Little, Endian::Big] {
        let back = decode_pfm(&encode_pfm(&map, endian), Path::new("mem.pfm")).unwrap();
        lossless &= back.valid == map.valid
            && back.values.data().iter().zip(map.values.data()).zip(&map.valid).all(|((x, y), ok)| !ok || x == y);
    }
    verdict(
        first && second && lossless,
        format!(
            "epe/bad3/d1 = {}/{}/{}; gt=100 pixel bad3 {} d1 {}; PFM round trip lossless: {lossless}",
            a.epe, a.bad3, a.d1, b.bad3, b.d1
        ),
    )
}

const NAMES: [&str; 9] = [
    "cost volume matches oracle",
    "identity-projected attention matches full",
    "FFT round trip, linearity, Parseval",
    "AFFA invariants",
    "gradient suite",
    "end-to-end overfit",
    "low-rank attention scaling",
    "ablation direction",
    "metric definitions and PFM",
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |i: usize| selected.is_empty() || selected.contains(&i);
    let mut failures = 0;
    let mut report = |i: usize, label: &str, v: Verdict, secs: f64| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {i} {status} {label}: {} [{secs:.1} s]", v.detail);
        if !v.pass {
            failures += 1;
        }
    };

    let mut seed0_full_epe = None;
    for i in 1..=9 {
        if !wanted(i) {
            continue;
        }
        let t0 = Instant::now();
        let v = match i {
            1 => cost_volume_oracle(),
            2 => attention_oracle(),
            3 => fft_suite(),
            4 => affa_invariants(),
            5 => gradient_suite(),
            6 => {
                let (data, out) = train_desk(&desk_config(0, true));
                seed0_full_epe = out.val_metrics.map(|m| m.epe);
                let (main, sanity) = overfit(&data, &out);
                let secs = t0.elapsed().as_secs_f64();
                report(6, NAMES[5], main, secs);
                let status = if sanity.pass { "PASS" } else { "FAIL" };
                println!("check {status} zero-disparity inference (not a criterion): {}", sanity.detail);
                continue;
            }
            7 => complexity(),
            8 => ablation(seed0_full_epe),
            9 => metric_definitions(),
            _ => unreachable!(),
        };
        report(i, NAMES[i - 1], v, t0.elapsed().as_secs_f64());
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
