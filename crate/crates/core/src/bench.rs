//! Latency and throughput measurement with an injected clock.
//!
//! Protocol: `warmup` untimed runs, then `iters` runs each timed
//! individually (clock read immediately before and after). Only the timed
//! samples enter the statistics. Percentiles are nearest-rank on the
//! ascending sample: `p`-th percentile is element `ceil(p/100 · n) - 1`.

use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelError, ModelGraph};
use crate::tensor::Tensor;

/// Monotonic time source.
pub trait Clock {
    fn now(&mut self) -> Duration;
}

impl<C: Clock + ?Sized> Clock for &mut C {
    fn now(&mut self) -> Duration {
        (**self).now()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("at least 2 timed iterations are needed for a standard deviation, got {0}")]
    TooFewIterations(usize),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("throughput budget {budget:?} is too small: first batch took {first:?}")]
    BudgetTooSmall { budget: Duration, first: Duration },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = core::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = libm::ceil(pct / 100.0 * n as f64) as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Mean, sample standard deviation (n - 1), min, p50 and p95.
pub fn latency_stats(samples: &[f64]) -> Result<LatencyStats> {
    let n = samples.len();
    if n < 2 {
        return Err(BenchError::TooFewIterations(n));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mean,
        std: libm::sqrt(var),
        min: sorted[0],
        p50: nearest_rank(&sorted, 50.0),
        p95: nearest_rank(&sorted, 95.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub arch: String,
    pub attention: String,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub latency_ms: LatencyStats,
    pub throughput_ips: f64,
    pub environment: String,
}

/// Latency statistics for an arbitrary workload. `run` executes one
/// forward pass and returns a value that is folded into a checksum so the
/// work cannot be optimized away.
pub fn measure_latency<C: Clock>(
    mut run: impl FnMut() -> core::result::Result<f64, ModelError>,
    batch_size: usize,
    warmup: usize,
    iters: usize,
    clock: &mut C,
) -> Result<(LatencyStats, f64)> {
    if iters < 2 {
        return Err(BenchError::TooFewIterations(iters));
    }
    if batch_size == 0 {
        return Err(BenchError::EmptyBatch);
    }
    let mut checksum = 0.0;
    for _ in 0..warmup {
        checksum += core::hint::black_box(run()?);
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = clock.now();
        checksum += core::hint::black_box(run()?);
        let end = clock.now();
        samples.push(end.saturating_sub(start).as_secs_f64() * 1e3);
    }
    core::hint::black_box(checksum);
    let stats = latency_stats(&samples)?;
    let throughput = if stats.mean > 0.0 { batch_size as f64 * 1e3 / stats.mean } else { f64::INFINITY };
    Ok((stats, throughput))
}

/// A fixed pseudo-random input batch for `graph`.
pub fn bench_input(graph: &ModelGraph, batch_size: usize, seed: u64) -> Tensor {
    let [c, h, w] = graph.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[batch_size, c, h, w], |_| rng.gen_range(-1.0..1.0))
}

/// Eval-mode forward latency of `graph`. The input is built once, outside
/// the timed region.
pub fn measure_model_latency<C: Clock>(
    graph: &ModelGraph,
    batch_size: usize,
    warmup: usize,
    iters: usize,
    clock: &mut C,
    environment: String,
) -> Result<BenchReport> {
    if batch_size == 0 {
        return Err(BenchError::EmptyBatch);
    }
    let input = bench_input(graph, batch_size, 0x5EED);
    let (latency_ms, throughput_ips) =
        measure_latency(|| graph.infer(&input).map(|y| y.sum()), batch_size, warmup, iters, clock)?;
    Ok(BenchReport {
        arch: graph.config().arch.name().into(),
        attention: graph.config().attention.kind.name().into(),
        batch_size,
        warmup_iters: warmup,
        timed_iters: iters,
        latency_ms,
        throughput_ips,
        environment,
    })
}

/// Steady-state images per second: runs batches back to back until the
/// elapsed time reaches `budget`.
pub fn measure_throughput<C: Clock>(
    mut run_batch: impl FnMut() -> core::result::Result<f64, ModelError>,
    batch_size: usize,
    budget: Duration,
    clock: &mut C,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(BenchError::EmptyBatch);
    }
    let start = clock.now();
    let mut batches = 0usize;
    let mut checksum = 0.0;
    let elapsed = loop {
        checksum += core::hint::black_box(run_batch()?);
        batches += 1;
        let elapsed = clock.now().saturating_sub(start);
        if batches == 1 && (budget.is_zero() || elapsed > budget) {
            return Err(BenchError::BudgetTooSmall { budget, first: elapsed });
        }
        if elapsed >= budget {
            break elapsed;
        }
    };
    core::hint::black_box(checksum);
    Ok((batches * batch_size) as f64 / elapsed.as_secs_f64())
}

pub fn measure_model_throughput<C: Clock>(graph: &ModelGraph, batch_size: usize, budget: Duration, clock: &mut C) -> Result<f64> {
    if batch_size == 0 {
        return Err(BenchError::EmptyBatch);
    }
    let input = bench_input(graph, batch_size, 0x5EED);
    measure_throughput(|| graph.infer(&input).map(|y| y.sum()), batch_size, budget, clock)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StepClock {
        t: Duration,
        step: Duration,
    }

    impl Clock for StepClock {
        fn now(&mut self) -> Duration {
            let t = self.t;
            self.t += self.step;
            t
        }
    }

    #[test]
    fn constant_interval_has_zero_spread() {
        let mut clock = StepClock {
            t: Duration::ZERO,
            step: Duration::from_millis(3),
        };
        let (s, ips) = measure_latency(|| Ok(1.0), 1, 10, 100, &mut clock).unwrap();
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.p95, 3.0);
        assert!((ips - 1000.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn fewer_than_two_iterations_rejected() {
        let mut clock = StepClock {
            t: Duration::ZERO,
            step: Duration::from_millis(1),
        };
        assert!(matches!(
            measure_latency(|| Ok(0.0), 1, 0, 1, &mut clock),
            Err(BenchError::TooFewIterations(1))
        ));
        assert!(latency_stats(&[]).is_err());
    }

    #[test]
    fn nearest_rank_small_cases() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(nearest_rank(&v, 50.0), 2.0);
        assert_eq!(nearest_rank(&v, 95.0), 4.0);
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
    }

    #[test]
    fn zero_budget_rejected() {
        let mut clock = StepClock {
            t: Duration::ZERO,
            step: Duration::from_millis(1),
        };
        assert!(matches!(
            measure_throughput(|| Ok(0.0), 1, Duration::ZERO, &mut clock),
            Err(BenchError::BudgetTooSmall { .. })
        ));
    }
}
