//! Wall-clock timing of inference forward passes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

/// Compute kernels run on the calling thread only.
pub const BENCH_THREADS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            warmup: 5,
            repetitions: 31,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub batch_size: usize,
    pub repetitions: usize,
    pub threads: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Interquartile range.
    pub iqr_ms: f64,
}

impl LatencyStats {
    pub fn per_sample_ms(&self) -> f64 {
        self.median_ms / self.batch_size as f64
    }

    /// How many times faster `self` is than `baseline`.
    pub fn speedup_over(&self, baseline: &LatencyStats) -> f64 {
        baseline.median_ms / self.median_ms
    }
}

/// Times `net.predict` on one fixed random batch.
pub fn bench_inference(net: &Network, cfg: &BenchConfig, seed: u64) -> Result<LatencyStats> {
    if cfg.batch_size == 0 || cfg.repetitions == 0 {
        return input_err("batch_size and repetitions must be positive");
    }
    let [c, h, w] = net.spec().input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..cfg.batch_size * c * h * w).map(|_| rng.random::<f32>()).collect();
    let batch = Tensor::from_vec(&[cfg.batch_size, c, h, w], data)?;
    for _ in 0..cfg.warmup {
        std::hint::black_box(net.predict(&batch)?);
    }
    let mut times = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        let t = Instant::now();
        std::hint::black_box(net.predict(&batch)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let q = |p: f64| times[((times.len() - 1) as f64 * p).round() as usize];
    Ok(LatencyStats {
        batch_size: cfg.batch_size,
        repetitions: cfg.repetitions,
        threads: BENCH_THREADS,
        median_ms: q(0.5),
        min_ms: times[0],
        max_ms: times[times.len() - 1],
        iqr_ms: q(0.75) - q(0.25),
    })
}
