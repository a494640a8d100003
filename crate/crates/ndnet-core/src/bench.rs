//! Wall-clock throughput measurement of eval-mode forward passes, with an
//! injectable clock so the arithmetic is testable.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::tensor::Tensor;

/// Monotonic time source in microseconds.
pub trait Clock {
    fn now_micros(&mut self) -> u64;
}

/// The real clock.
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_micros(&mut self) -> u64 {
        self.origin.elapsed().as_micros() as u64
    }
}

/// Per-run latencies and derived throughput. Latency values are
/// hardware-specific; only directions are ever compared across models.
#[derive(Clone, Debug, serde::Serialize)]
pub struct BenchReport {
    pub input_shape: [usize; 4],
    pub warmup: usize,
    pub latencies_ms: Vec<f64>,
    pub mean_latency_ms: f64,
    pub mean_fps: f64,
    /// Coefficient of variation of the recorded latencies.
    pub cv: f64,
}

impl BenchReport {
    pub fn render_text(&self) -> String {
        format!(
            "input {}x{}x{}x{}  runs {}  warmup {}\nmean latency {:.3} ms  mean FPS {:.2}  cv {:.4}\n",
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
            self.input_shape[3],
            self.latencies_ms.len(),
            self.warmup,
            self.mean_latency_ms,
            self.mean_fps,
            self.cv
        )
    }
}

/// Times `runs` eval-mode forward passes after `warmup` unrecorded passes.
/// Input contents are a fixed pseudo-random fill.
pub fn benchmark_fps(
    graph: &LayerGraph<f32>,
    input_shape: [usize; 4],
    runs: usize,
    warmup: usize,
    clock: &mut dyn Clock,
) -> Result<BenchReport> {
    if runs < 3 {
        return Err(Error::Spec(format!("benchmark needs runs >= 3, got {runs}")));
    }
    if warmup < 1 {
        return Err(Error::Spec(format!("benchmark needs warmup >= 1, got {warmup}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe9c);
    let input = Tensor::from_fn(input_shape, |_, _, _, _| {
        rand::Rng::random_range(&mut rng, -1.0f32..1.0)
    });

    for _ in 0..warmup {
        graph.forward_eval(&input)?;
    }
    let mut latencies = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = clock.now_micros();
        graph.forward_eval(&input)?;
        let t1 = clock.now_micros();
        latencies.push((t1 - t0) as f64 / 1000.0);
    }

    let mean = latencies.iter().sum::<f64>() / runs as f64;
    let var = latencies.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / runs as f64;
    Ok(BenchReport {
        input_shape,
        warmup,
        mean_latency_ms: mean,
        mean_fps: 1000.0 / mean,
        cv: var.sqrt() / mean,
        latencies_ms: latencies,
    })
}
