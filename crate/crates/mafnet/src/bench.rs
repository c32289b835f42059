//! Wall-clock comparison of quadratic and low-rank attention.

use std::collections::HashMap;
use std::time::Instant;

use mafnet_core::aahf::{attention_bytes, full_attention, lin_attention, pooling_projection};
use mafnet_core::init::Rng;
use mafnet_core::Tensor;
use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BenchRecord {
    pub n: usize,
    pub k: usize,
    pub d_attn: usize,
    /// Median seconds.
    pub t_full: f64,
    pub t_lin: f64,
    /// `t_full / t_lin`.
    pub speedup: f64,
    /// Estimated peak transient bytes.
    pub bytes_full: usize,
    pub bytes_lin: usize,
}

#[derive(Clone, Debug)]
pub struct BenchPlan {
    pub ns: Vec<usize>,
    pub ks: Vec<usize>,
    pub d_attn: usize,
    /// Timed repetitions after one warm-up call.
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            ns: vec![1024, 4096, 16384],
            ks: vec![64, 256],
            d_attn: 32,
            runs: 10,
            seed: 0,
        }
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// Median wall time of `f` over `runs` calls, after one untimed call.
pub fn median_time<T>(runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    std::hint::black_box(f()?);
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t0 = Instant::now();
        std::hint::black_box(f()?);
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// One record per `(n, k)` with `k <= n`; full attention is timed once per `n`.
pub fn run_bench(plan: &BenchPlan) -> Result<Vec<BenchRecord>> {
    let mut rng = Rng::new(plan.seed);
    let d = plan.d_attn;
    let mut full_times: HashMap<usize, f64> = HashMap::new();
    let mut out = Vec::new();
    for &n in &plan.ns {
        let (q, k, v) = (random(&[n, d], &mut rng), random(&[n, d], &mut rng), random(&[n, d], &mut rng));
        for &rank in plan.ks.iter().filter(|&&r| r <= n) {
            let t_full = match full_times.get(&n) {
                Some(t) => *t,
                None => {
                    let t = median_time(plan.runs, || Ok(full_attention(&q, &k, &v)?))?;
                    full_times.insert(n, t);
                    t
                }
            };
            let e = pooling_projection(rank, n)?;
            let f = pooling_projection(rank, n)?;
            let t_lin = median_time(plan.runs, || Ok(lin_attention(&q, &k, &v, &e, &f)?))?;
            out.push(BenchRecord {
                n,
                k: rank,
                d_attn: d,
                t_full,
                t_lin,
                speedup: t_full / t_lin,
                bytes_full: attention_bytes(n, n, d, false),
                bytes_lin: attention_bytes(n, rank, d, true) + 2 * rank * n * std::mem::size_of::<f64>(),
            });
        }
    }
    Ok(out)
}

/// One JSON object per line.
pub fn format_report(records: &[BenchRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}
