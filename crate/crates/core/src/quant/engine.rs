//! Thread-count-controlled inference and latency benchmarking.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{write_model, ModelGraph};
use crate::tensor::{DType, Tensor};

/// Runs inference on a dedicated worker pool of a fixed size.
///
/// Kernels split work into units whose boundaries do not depend on the pool
/// size, and reduce across units in a fixed order, so results are bitwise
/// identical for every thread count.
pub struct InferenceEngine {
    pool: rayon::ThreadPool,
    threads: usize,
}

impl InferenceEngine {
    pub fn new(threads: usize) -> Result<Self> {
        if threads < 1 {
            return Err(Error::config("thread count must be at least 1"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("binlite-infer-{i}"))
            .build()
            .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool, threads })
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Class probabilities and the wall-clock latency of the forward pass.
    pub fn infer(&self, graph: &ModelGraph, input: &Tensor) -> Result<(Tensor, f64)> {
        let start = Instant::now();
        let probs = self.pool.install(|| graph.predict(input))?;
        Ok((probs, start.elapsed().as_secs_f64() * 1e3))
    }
}

/// One-shot inference on a fresh pool of `threads` workers.
pub fn infer(graph: &ModelGraph, input: &Tensor, threads: usize) -> Result<(Tensor, f64)> {
    InferenceEngine::new(threads)?.infer(graph, input)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub threads: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub model_bytes: u64,
    pub dtype: DType,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Times single-image inference for each thread count. Warmup runs are
/// discarded. The latency curve is reported as measured; no ordering between
/// thread counts is implied.
pub fn bench(
    graph: &ModelGraph,
    thread_counts: &[usize],
    iters: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if iters < 10 {
        return Err(Error::config(format!("bench needs at least 10 iterations, got {iters}")));
    }
    if warmup < 1 {
        return Err(Error::config("bench needs at least one warmup run"));
    }
    if thread_counts.is_empty() || thread_counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "thread counts must be non-empty and strictly increasing: {thread_counts:?}"
        )));
    }
    let mut size = CountingWriter(0);
    write_model(graph, &mut size)?;

    let [h, w, c] = graph.input_shape;
    let input = Tensor::full(&[1, h, w, c], 0.5)?;
    let mut records = Vec::with_capacity(thread_counts.len());
    for &threads in thread_counts {
        let engine = InferenceEngine::new(threads)?;
        for _ in 0..warmup {
            engine.infer(graph, &input)?;
        }
        let mut times = (0..iters)
            .map(|_| engine.infer(graph, &input).map(|(_, ms)| ms))
            .collect::<Result<Vec<_>>>()?;
        let mean_ms = times.iter().sum::<f64>() / iters as f64;
        times.sort_by(f64::total_cmp);
        records.push(BenchRecord {
            threads,
            mean_ms,
            p50_ms: percentile(&times, 0.5),
            p95_ms: percentile(&times, 0.95),
            iters,
        });
    }
    Ok(BenchReport {
        records,
        model_bytes: size.0,
        dtype: graph.weight_dtype(),
    })
}

struct CountingWriter(u64);

impl std::io::Write for CountingWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0 += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model: {} bytes, weights {}", self.model_bytes, self.dtype)?;
        writeln!(
            f,
            "{:>7}  {:>10}  {:>10}  {:>10}  {:>6}",
            "threads", "mean_ms", "p50_ms", "p95_ms", "iters"
        )?;
        for r in &self.records {
            writeln!(
                f,
                "{:>7}  {:>10.3}  {:>10.3}  {:>10.3}  {:>6}",
                r.threads, r.mean_ms, r.p50_ms, r.p95_ms, r.iters
            )?;
        }
        Ok(())
    }
}
