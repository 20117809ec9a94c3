//! Two-stage object detection on very large frames: a coarse attention
//! pass selects which cells of a fine crop grid are worth evaluating, and
//! crop evaluation can be spread over remote workers.

pub mod cli;
pub mod detector;
pub mod distribution;
pub mod frameio;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod synthetic;
