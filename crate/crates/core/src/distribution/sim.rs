//! Discrete-event model of the distributed pipeline, for sweeping worker
//! counts without hardware.
//!
//! A stage evaluating `k` crops on `n` workers is busy for
//! `max_chunk(k, n) * per_crop_cost + k * transfer_cost_per_crop`: crops are
//! dispatched in contiguous chunks, the slowest worker decides, and the
//! client uplink sends tiles one after another.
//!
//! With `n_a >= 1` attention for frame `t + 1` may start once frame `t`'s
//! final stage has started (one frame of lookahead). With `n_a == 0`
//! attention runs on the final workers right before each final stage.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dispatch;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCrops {
    pub attention_crops: usize,
    pub final_crops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub frames: Vec<FrameCrops>,
    pub per_crop_cost_ms: f64,
    pub transfer_cost_per_crop_ms: f64,
    #[serde(default = "default_na")]
    pub n_a: Vec<usize>,
    #[serde(default = "default_nf")]
    pub n_f: Vec<usize>,
}

fn default_na() -> Vec<usize> {
    vec![0, 1, 2]
}

fn default_nf() -> Vec<usize> {
    (1..=8).collect()
}

impl SimScenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.into()));
        if self.frames.is_empty() {
            return bad("no frames");
        }
        if !(self.per_crop_cost_ms > 0.0 && self.per_crop_cost_ms.is_finite()) {
            return bad("per_crop_cost_ms must be > 0");
        }
        if !(self.transfer_cost_per_crop_ms > 0.0 && self.transfer_cost_per_crop_ms.is_finite()) {
            return bad("transfer_cost_per_crop_ms must be > 0");
        }
        if self.n_f.is_empty() || self.n_f.contains(&0) {
            return bad("n_f values must be >= 1");
        }
        if self.n_a.is_empty() {
            return bad("n_a sweep is empty");
        }
        Ok(())
    }
}

fn ns(ms: f64) -> u64 {
    Duration::from_secs_f64(ms / 1e3).as_nanos() as u64
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

/// Busy time of a stage, in nanoseconds.
pub fn stage_time_ns(crops: usize, workers: usize, per_crop_ns: u64, transfer_ns: u64) -> u64 {
    if crops == 0 {
        return 0;
    }
    let slowest = dispatch(crops, workers).iter().map(|r| r.len()).max().unwrap_or(0);
    slowest as u64 * per_crop_ns + crops as u64 * transfer_ns
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    AttentionDone(usize),
    FinalDone(usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameTrace {
    pub attention_start_ns: u64,
    pub attention_done_ns: u64,
    pub final_start_ns: u64,
    pub final_done_ns: u64,
}

/// Event-driven schedule for one `(n_a, n_f)` point.
pub fn schedule(scenario: &SimScenario, n_a: usize, n_f: usize) -> Vec<FrameTrace> {
    let c = ns(scenario.per_crop_cost_ms);
    let tr = ns(scenario.transfer_cost_per_crop_ms);
    let frames = &scenario.frames;
    let n = frames.len();
    let mut trace = vec![FrameTrace::default(); n];
    let mut queue: BinaryHeap<Reverse<(u64, Event)>> = BinaryHeap::new();
    let mut attention_done = vec![false; n];
    let mut final_started = vec![false; n];
    let mut next_attention = 0usize;
    let mut next_final = 0usize;
    let mut attention_busy = false;
    let mut final_busy = false;
    let mut now = 0u64;

    loop {
        // start whatever can start at `now`
        let mut progressed = true;
        while progressed {
            progressed = false;
            let inline = n_a == 0;
            let att_pool_free = if inline { !final_busy } else { !attention_busy };
            let lookahead_ok = next_attention == 0 || final_started[next_attention - 1];
            // inline attention only for the frame the final stage needs next
            let inline_ok = !inline || next_attention == next_final;
            if next_attention < n && att_pool_free && lookahead_ok && inline_ok {
                let t = next_attention;
                let workers = if inline { n_f } else { n_a };
                let d = stage_time_ns(frames[t].attention_crops, workers, c, tr);
                trace[t].attention_start_ns = now;
                if inline {
                    final_busy = true;
                } else {
                    attention_busy = true;
                }
                queue.push(Reverse((now + d, Event::AttentionDone(t))));
                next_attention += 1;
                progressed = true;
            }
            if next_final < n && !final_busy && attention_done[next_final] {
                let t = next_final;
                let d = stage_time_ns(frames[t].final_crops, n_f, c, tr);
                trace[t].final_start_ns = now;
                final_started[t] = true;
                final_busy = true;
                queue.push(Reverse((now + d, Event::FinalDone(t))));
                next_final += 1;
                progressed = true;
            }
        }

        let Some(Reverse((time, event))) = queue.pop() else {
            break;
        };
        now = time;
        match event {
            Event::AttentionDone(t) => {
                trace[t].attention_done_ns = now;
                attention_done[t] = true;
                if n_a == 0 {
                    final_busy = false;
                } else {
                    attention_busy = false;
                }
            }
            Event::FinalDone(t) => {
                trace[t].final_done_ns = now;
                final_busy = false;
            }
        }
    }
    trace
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub n_a: usize,
    pub n_f: usize,
    pub frames: usize,
    pub mean_attention_stage_ms: f64,
    pub mean_final_stage_ms: f64,
    /// Mean interval between consecutive frame completions.
    pub mean_latency_ms: f64,
    /// As above, excluding the first frame.
    pub steady_latency_ms: f64,
    pub fps: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTable {
    pub rows: Vec<SimRow>,
}

impl SimTable {
    pub fn get(&self, n_a: usize, n_f: usize) -> Option<&SimRow> {
        self.rows.iter().find(|r| r.n_a == n_a && r.n_f == n_f)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-frame completion intervals of a schedule.
pub fn frame_latencies_ms(trace: &[FrameTrace]) -> Vec<f64> {
    let mut prev = 0;
    trace
        .iter()
        .map(|t| {
            let d = t.final_done_ns - prev;
            prev = t.final_done_ns;
            ms(d)
        })
        .collect()
}

pub fn simulate_scaling(scenario: &SimScenario) -> Result<SimTable, SimError> {
    scenario.validate()?;
    let c = ns(scenario.per_crop_cost_ms);
    let tr = ns(scenario.transfer_cost_per_crop_ms);
    let n = scenario.frames.len() as f64;
    let mut rows = Vec::new();
    for &n_a in &scenario.n_a {
        for &n_f in &scenario.n_f {
            let trace = schedule(scenario, n_a, n_f);
            let lat = frame_latencies_ms(&trace);
            let att_workers = if n_a == 0 { n_f } else { n_a };
            let mean_att = scenario
                .frames
                .iter()
                .map(|f| ms(stage_time_ns(f.attention_crops, att_workers, c, tr)))
                .sum::<f64>()
                / n;
            let mean_fin = scenario
                .frames
                .iter()
                .map(|f| ms(stage_time_ns(f.final_crops, n_f, c, tr)))
                .sum::<f64>()
                / n;
            let mean_latency = lat.iter().sum::<f64>() / n;
            let steady = if lat.len() > 1 {
                lat[1..].iter().sum::<f64>() / (lat.len() - 1) as f64
            } else {
                lat[0]
            };
            rows.push(SimRow {
                n_a,
                n_f,
                frames: trace.len(),
                mean_attention_stage_ms: mean_att,
                mean_final_stage_ms: mean_fin,
                mean_latency_ms: mean_latency,
                steady_latency_ms: steady,
                fps: if mean_latency > 0.0 { 1e3 / mean_latency } else { f64::INFINITY },
            });
        }
    }
    Ok(SimTable { rows })
}
