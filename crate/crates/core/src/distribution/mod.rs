//! Crop evaluation spread over detector workers.
//!
//! The client cuts tiles and sends them to workers in contiguous chunks
//! ([`dispatch`]); a stage takes as long as its slowest worker. With
//! dedicated attention workers, the next frame's attention runs while the
//! current frame's final pass is in flight ([`stream`]). [`sim`] replays the
//! same rules as a discrete-event simulation for scaling sweeps.

pub mod client;
pub mod protocol;
pub mod server;
pub mod sim;
pub mod stream;

use std::ops::Range;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use client::{remote_detect, RemoteDetector, WorkerClient, WorkerPool};
pub use server::{serve, spawn_worker, Worker};
pub use sim::{simulate_scaling, SimScenario, SimTable};
pub use stream::{run_stream, FrameProvider, StreamError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Workers dedicated to precomputing the next frame's attention. Empty
    /// means attention runs on the final workers, without overlap.
    #[serde(default)]
    pub attention_workers: Vec<String>,
    pub final_workers: Vec<String>,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT.as_millis() as u64
}

impl ClusterConfig {
    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerTiming {
    pub endpoint: String,
    pub crops: usize,
    pub transfer_ms: f64,
    pub busy_ms: f64,
}

/// Per-frame time breakdown, all in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    pub io_ms: f64,
    /// Attention time not hidden behind the previous frame's final pass.
    pub attention_wait_ms: f64,
    pub client_processing_ms: f64,
    pub transfer_ms: f64,
    /// Busy time of the slowest final-stage worker.
    pub final_eval_ms: f64,
    pub postprocess_ms: f64,
    pub per_worker: Vec<WorkerTiming>,
}

impl TimingProfile {
    pub fn total_ms(&self) -> f64 {
        self.io_ms
            + self.attention_wait_ms
            + self.client_processing_ms
            + self.transfer_ms
            + self.final_eval_ms
            + self.postprocess_ms
    }

    pub fn slowest_worker_ms(&self) -> f64 {
        self.per_worker.iter().map(|w| w.busy_ms).fold(0.0, f64::max)
    }
}

/// Splits `k` items into `workers` contiguous chunks whose sizes differ by
/// at most one; the first `k % workers` chunks get the extra item.
pub fn dispatch(k: usize, workers: usize) -> Vec<Range<usize>> {
    assert!(workers > 0, "dispatch needs at least one worker");
    let base = k / workers;
    let extra = k % workers;
    let mut start = 0;
    (0..workers)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}
