//! Index-addressable synthetic sample sequence.
//!
//! Sample `i` of a generator depends only on the config, the pool, the
//! master seed and `i`, so any worker can produce any index and a batch
//! comes out the same regardless of the thread count.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::compositor::{
    render_timed, sample_plan, ComposeError, CompositionConfig, StageTimes, SyntheticSample,
};
use crate::emitters::encode_png;
use crate::patch_extraction::PatchPool;
use crate::seed;

#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub config: Arc<CompositionConfig>,
    pub pool: Arc<PatchPool>,
    pub master_seed: u64,
}

impl GeneratorSpec {
    pub fn new(
        config: CompositionConfig,
        pool: PatchPool,
        master_seed: u64,
    ) -> Result<Self, ComposeError> {
        config.validate()?;
        Ok(GeneratorSpec {
            config: Arc::new(config),
            pool: Arc::new(pool),
            master_seed,
        })
    }

    pub fn plan_seed(&self, index: u64) -> u64 {
        seed::substream_seed(self.master_seed, index)
    }

    pub fn sample_at(&self, index: u64) -> Result<SyntheticSample, ComposeError> {
        self.sample_timed(index, &mut StageTimes::default())
    }

    fn sample_timed(
        &self,
        index: u64,
        times: &mut StageTimes,
    ) -> Result<SyntheticSample, ComposeError> {
        let t = Instant::now();
        let plan = sample_plan(&self.config, &self.pool, self.plan_seed(index))?;
        times.plan += t.elapsed();
        render_timed(&plan, &self.pool, times)
    }

    /// Unbounded iterator starting at `start`.
    pub fn iter_from(
        &self,
        start: u64,
    ) -> impl Iterator<Item = Result<SyntheticSample, ComposeError>> + '_ {
        (start..).map(move |i| self.sample_at(i))
    }
}

fn thread_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool construction")
}

/// Samples `start..start + n` in index order, generated on `workers` threads.
pub fn batch(
    spec: &GeneratorSpec,
    start: u64,
    n: usize,
    workers: usize,
) -> Result<Vec<SyntheticSample>, ComposeError> {
    thread_pool(workers).install(|| {
        (0..n as u64)
            .into_par_iter()
            .map(|i| spec.sample_at(start + i))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageSeconds {
    pub plan: f64,
    pub augment: f64,
    pub paste: f64,
    pub encode: f64,
}

impl From<StageTimes> for StageSeconds {
    fn from(t: StageTimes) -> Self {
        StageSeconds {
            plan: t.plan.as_secs_f64(),
            augment: t.augment.as_secs_f64(),
            paste: t.paste.as_secs_f64(),
            encode: t.encode.as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRun {
    pub workers: usize,
    pub samples: usize,
    pub wall_seconds: f64,
    pub samples_per_sec: f64,
    /// CPU time summed over workers, by stage.
    pub stage_seconds: StageSeconds,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub canvas: [u32; 2],
    pub available_parallelism: usize,
    pub single: BenchRun,
    pub parallel: BenchRun,
    /// `parallel throughput / (workers * single throughput)`.
    pub parallel_efficiency: f64,
}

/// Generate and PNG-encode `n` samples on `workers` threads, discarding the
/// output.
pub fn bench_run(spec: &GeneratorSpec, n: usize, workers: usize) -> Result<BenchRun, ComposeError> {
    let start = Instant::now();
    let times = thread_pool(workers).install(|| {
        (0..n as u64)
            .into_par_iter()
            .map(|i| -> Result<StageTimes, ComposeError> {
                let mut times = StageTimes::default();
                let sample = spec.sample_timed(i, &mut times)?;
                let t = Instant::now();
                std::hint::black_box(encode_png(&sample.image));
                times.encode += t.elapsed();
                Ok(times)
            })
            .try_reduce(StageTimes::default, |mut a, b| {
                a += b;
                Ok(a)
            })
    })?;
    let wall = start.elapsed().max(Duration::from_nanos(1)).as_secs_f64();
    Ok(BenchRun {
        workers,
        samples: n,
        wall_seconds: wall,
        samples_per_sec: n as f64 / wall,
        stage_seconds: times.into(),
    })
}

/// Single-worker baseline followed by a `workers`-thread run.
pub fn bench(spec: &GeneratorSpec, n: usize, workers: usize) -> Result<BenchReport, ComposeError> {
    let single = bench_run(spec, n, 1)?;
    let parallel = bench_run(spec, n, workers)?;
    Ok(BenchReport {
        canvas: spec.config.canvas,
        available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        parallel_efficiency: parallel.samples_per_sec
            / (workers.max(1) as f64 * single.samples_per_sec),
        single,
        parallel,
    })
}
