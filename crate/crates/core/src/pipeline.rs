//! Staged evaluation of a frame: a coarse attention pass, selection of the
//! fine-grid cells that touch what attention found, and a final pass over
//! only those cells. Also the two reference strategies: one downscaled
//! whole-frame crop, and every fine-grid crop.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{extract_tile, DetectError, Detection, Detector, FrameId, LocalDetection, Tile};
use crate::distribution::{TimingProfile, WorkerTiming};
use crate::geometry::{build_grid, to_global, CropSettings, CropSpec, GeometryError, GridSpec, Rect};
use crate::postprocess::{postprocess, Candidate, MergePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Attention,
    Final,
    Downscale,
    AllCrops,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Attention => "attention",
            Stage::Final => "final",
            Stage::Downscale => "downscale",
            Stage::AllCrops => "all-crops",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame_id}: {stage} stage failed: {source}")]
    Detect {
        frame_id: FrameId,
        stage: Stage,
        #[source]
        source: DetectError,
    },
    #[error("frame {frame_id}: {source}")]
    Geometry {
        frame_id: FrameId,
        #[source]
        source: GeometryError,
    },
    #[error("invalid settings: {0}")]
    Settings(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub attention: CropSettings,
    pub final_grid: CropSettings,
    /// Dilation of attention boxes before intersecting with the fine grid.
    pub attention_margin_px: i64,
    /// Number of most recent attention models unioned per frame.
    pub temporal_window: usize,
    pub min_confidence: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self::from_rows(1, 3, 20).expect("default settings are valid")
    }
}

impl PipelineSettings {
    pub fn from_rows(attention_rows: u32, final_rows: u32, overlap_px: u32) -> Result<Self, PipelineError> {
        let s = Self {
            attention: CropSettings::new(attention_rows, overlap_px)
                .map_err(|e| PipelineError::Settings(e.to_string()))?,
            final_grid: CropSettings::new(final_rows, overlap_px)
                .map_err(|e| PipelineError::Settings(e.to_string()))?,
            attention_margin_px: 20,
            temporal_window: 2,
            min_confidence: 0.3,
        };
        s.validate()?;
        Ok(s)
    }

    /// Parses names of the form `"1 att, 3 fin, 50 over"`.
    pub fn from_preset(name: &str) -> Result<Self, PipelineError> {
        let bad = || PipelineError::Settings(format!("unrecognised preset {name:?}"));
        let parts: Vec<&str> = name.split(',').map(str::trim).collect();
        let [att, fin, over] = parts.as_slice() else {
            return Err(bad());
        };
        let field = |s: &str, unit: &str| -> Option<u32> {
            let (n, u) = s.split_once(' ')?;
            (u.trim() == unit).then(|| n.trim().parse().ok()).flatten()
        };
        Self::from_rows(
            field(att, "att").ok_or_else(bad)?,
            field(fin, "fin").ok_or_else(bad)?,
            field(over, "over").ok_or_else(bad)?,
        )
    }

    pub fn preset_name(&self) -> String {
        if self.attention.overlap_px == self.final_grid.overlap_px {
            format!(
                "{} att, {} fin, {} over",
                self.attention.rows, self.final_grid.rows, self.final_grid.overlap_px
            )
        } else {
            format!(
                "{} att ({} over), {} fin ({} over)",
                self.attention.rows, self.attention.overlap_px, self.final_grid.rows, self.final_grid.overlap_px
            )
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.final_grid.rows < self.attention.rows {
            return Err(PipelineError::Settings(format!(
                "final rows {} must be >= attention rows {}",
                self.final_grid.rows, self.attention.rows
            )));
        }
        if self.temporal_window == 0 {
            return Err(PipelineError::Settings("temporal window must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(PipelineError::Settings("min_confidence must lie in [0, 1]".into()));
        }
        if self.attention_margin_px < 0 {
            return Err(PipelineError::Settings("attention margin must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionModel {
    pub frame_id: FrameId,
    pub boxes: Vec<Rect>,
    pub source_window: Vec<FrameId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    pub grid: GridSpec,
    pub active_ids: BTreeSet<usize>,
}

impl ActiveSet {
    pub fn all(grid: GridSpec) -> Self {
        let active_ids = (0..grid.len()).collect();
        Self { grid, active_ids }
    }

    pub fn active_crops(&self) -> Vec<CropSpec> {
        self.active_ids.iter().map(|&i| self.grid.crops[i].clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: FrameId,
    pub detections: Vec<Detection>,
    pub active_count: usize,
    pub total_count: usize,
    pub timing: TimingProfile,
}

/// Timing of one batch of crop evaluations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTiming {
    /// Tile cutting and resampling on the client.
    pub client_ms: f64,
    pub transfer_ms: f64,
    /// Slowest worker.
    pub eval_ms: f64,
    pub per_worker: Vec<WorkerTiming>,
}

/// Detections per crop, in the order the crops were given.
#[derive(Debug, Clone, Default)]
pub struct StageOutput {
    pub results: Vec<Vec<LocalDetection>>,
    pub timing: StageTiming,
}

/// Something that turns crops of a frame into crop-local detections,
/// either in-process or on remote workers.
pub trait CropEvaluator: Send + Sync {
    fn evaluate(&self, frame_id: FrameId, frame: &RgbImage, crops: &[CropSpec]) -> Result<StageOutput, DetectError>;
}

/// Runs a detector in the calling thread.
#[derive(Clone)]
pub struct LocalEvaluator {
    detector: Arc<dyn Detector>,
}

impl LocalEvaluator {
    pub fn new(detector: Arc<dyn Detector>) -> Self {
        Self { detector }
    }
}

impl CropEvaluator for LocalEvaluator {
    fn evaluate(&self, frame_id: FrameId, frame: &RgbImage, crops: &[CropSpec]) -> Result<StageOutput, DetectError> {
        let mut timing = StageTiming::default();
        let mut results = Vec::with_capacity(crops.len());
        for crop in crops {
            let t = Instant::now();
            let tile = Tile {
                frame_id,
                crop: crop.clone(),
                image: extract_tile(frame, crop),
            };
            timing.client_ms += ms_since(t);
            let t = Instant::now();
            results.push(self.detector.detect(&tile)?);
            timing.eval_ms += ms_since(t);
        }
        timing.per_worker.push(WorkerTiming {
            endpoint: "local".into(),
            crops: crops.len(),
            transfer_ms: 0.0,
            busy_ms: timing.eval_ms,
        });
        Ok(StageOutput { results, timing })
    }
}

pub(crate) fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn grid_for(frame_id: FrameId, frame: &RgbImage, settings: CropSettings) -> Result<GridSpec, PipelineError> {
    build_grid(frame.width(), frame.height(), settings).map_err(|source| PipelineError::Geometry { frame_id, source })
}

fn project(
    frame: &RgbImage,
    crops: &[CropSpec],
    results: Vec<Vec<LocalDetection>>,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (crop, dets) in crops.iter().zip(results) {
        for d in dets {
            if let Some(rect) = to_global(&d.rect, crop, frame.width(), frame.height()) {
                out.push(Candidate::new(
                    Detection {
                        rect,
                        class_label: d.class_label,
                        confidence: d.confidence,
                    },
                    crop.crop_id,
                ));
            }
        }
    }
    out
}

/// Attention model of one frame with the time it took.
#[derive(Debug, Clone)]
pub struct AttentionOutcome {
    pub model: AttentionModel,
    pub crops_evaluated: usize,
    pub wall_ms: f64,
}

/// Evaluates every crop of the coarse grid and keeps confident boxes.
pub fn attention_pass(
    frame_id: FrameId,
    frame: &RgbImage,
    settings: &PipelineSettings,
    eval: &dyn CropEvaluator,
) -> Result<AttentionOutcome, PipelineError> {
    let start = Instant::now();
    let grid = grid_for(frame_id, frame, settings.attention)?;
    let out = eval
        .evaluate(frame_id, frame, &grid.crops)
        .map_err(|source| PipelineError::Detect {
            frame_id,
            stage: Stage::Attention,
            source,
        })?;
    let boxes = project(frame, &grid.crops, out.results)
        .into_iter()
        .filter(|c| c.detection.confidence >= settings.min_confidence)
        .map(|c| c.detection.rect)
        .collect();
    Ok(AttentionOutcome {
        model: AttentionModel {
            frame_id,
            boxes,
            source_window: vec![frame_id],
        },
        crops_evaluated: grid.len(),
        wall_ms: ms_since(start),
    })
}

/// Union of the boxes of the `k` most recent models (the last entry is the
/// current frame).
pub fn merge_temporal(history: &[AttentionModel], k: usize) -> AttentionModel {
    let latest = history.last().expect("merge_temporal needs a non-empty history");
    let start = history.len().saturating_sub(k.max(1));
    let window = &history[start..];
    let mut seen = BTreeSet::new();
    let mut boxes = Vec::new();
    for m in window {
        for b in &m.boxes {
            if seen.insert(*b) {
                boxes.push(*b);
            }
        }
    }
    AttentionModel {
        frame_id: latest.frame_id,
        boxes,
        source_window: window.iter().map(|m| m.frame_id).collect(),
    }
}

/// Marks every fine-grid cell touching a dilated attention box.
pub fn select_active(final_grid: &GridSpec, att: &AttentionModel, margin: i64) -> ActiveSet {
    let bounds = final_grid.frame_rect();
    let dilated: Vec<Rect> = att.boxes.iter().filter_map(|b| b.dilate(margin, &bounds)).collect();
    let active_ids = final_grid
        .crops
        .iter()
        .filter(|c| dilated.iter().any(|b| b.intersection(&c.global_rect).is_some()))
        .map(|c| c.crop_id)
        .collect();
    ActiveSet {
        grid: final_grid.clone(),
        active_ids,
    }
}

/// Evaluates the active crops and projects raw detections to the frame.
pub fn final_pass(
    frame_id: FrameId,
    frame: &RgbImage,
    active: &ActiveSet,
    eval: &dyn CropEvaluator,
) -> Result<(Vec<Candidate>, StageTiming), PipelineError> {
    let crops = active.active_crops();
    if crops.is_empty() {
        return Ok((Vec::new(), StageTiming::default()));
    }
    let out = eval
        .evaluate(frame_id, frame, &crops)
        .map_err(|source| PipelineError::Detect {
            frame_id,
            stage: Stage::Final,
            source,
        })?;
    Ok((project(frame, &crops, out.results), out.timing))
}

fn finish(
    raw: Vec<Candidate>,
    grid: &GridSpec,
    policy: &MergePolicy,
    min_confidence: f64,
) -> (Vec<Detection>, f64) {
    let t = Instant::now();
    let mut dets = postprocess(raw, grid, policy);
    dets.retain(|d| d.confidence >= min_confidence);
    (dets, ms_since(t))
}

fn fill_final_timing(timing: &mut TimingProfile, stage: StageTiming) {
    timing.client_processing_ms += stage.client_ms;
    timing.transfer_ms += stage.transfer_ms;
    timing.final_eval_ms += stage.eval_ms;
    timing.per_worker = stage.per_worker;
}

/// Per-stream pipeline state: settings plus the recent attention models.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub settings: PipelineSettings,
    pub policy: MergePolicy,
    history: VecDeque<AttentionModel>,
}

impl Pipeline {
    pub fn new(settings: PipelineSettings, policy: MergePolicy) -> Result<Self, PipelineError> {
        settings.validate()?;
        Ok(Self {
            settings,
            policy,
            history: VecDeque::new(),
        })
    }

    pub fn history(&self) -> impl Iterator<Item = &AttentionModel> {
        self.history.iter()
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Attention for one frame; does not touch the history, so it can run
    /// ahead of [`Pipeline::complete`] on another thread.
    pub fn attend(&self, frame_id: FrameId, frame: &RgbImage, eval: &dyn CropEvaluator) -> Result<AttentionOutcome, PipelineError> {
        attention_pass(frame_id, frame, &self.settings, eval)
    }

    /// Everything after attention: temporal merge, active selection, final
    /// pass and postprocessing. `attention_wait_ms` is the part of the
    /// attention time the caller could not hide.
    pub fn complete(
        &mut self,
        frame_id: FrameId,
        frame: &RgbImage,
        attention: AttentionOutcome,
        attention_wait_ms: f64,
        eval: &dyn CropEvaluator,
    ) -> Result<FrameResult, PipelineError> {
        let k = self.settings.temporal_window;
        self.history.push_back(attention.model);
        while self.history.len() > k {
            self.history.pop_front();
        }
        let merged = merge_temporal(self.history.make_contiguous(), k);

        let t = Instant::now();
        let grid = grid_for(frame_id, frame, self.settings.final_grid)?;
        let active = select_active(&grid, &merged, self.settings.attention_margin_px);
        let select_ms = ms_since(t);

        let (raw, stage) = final_pass(frame_id, frame, &active, eval)?;
        let (detections, post_ms) = finish(raw, &grid, &self.policy, self.settings.min_confidence);

        let mut timing = TimingProfile {
            attention_wait_ms,
            client_processing_ms: select_ms,
            postprocess_ms: post_ms,
            ..Default::default()
        };
        fill_final_timing(&mut timing, stage);
        Ok(FrameResult {
            frame_id,
            detections,
            active_count: active.active_ids.len(),
            total_count: grid.len(),
            timing,
        })
    }

    /// Sequential evaluation of one frame: attention, then the rest.
    pub fn run_frame(&mut self, frame_id: FrameId, frame: &RgbImage, eval: &dyn CropEvaluator) -> Result<FrameResult, PipelineError> {
        let att = self.attend(frame_id, frame, eval)?;
        let wait = att.wall_ms;
        self.complete(frame_id, frame, att, wait, eval)
    }
}

/// The whole frame letterboxed into one model-sized crop (anchored top-left,
/// padded right or bottom).
pub fn downscale_crop(frame_w: u32, frame_h: u32) -> CropSpec {
    CropSpec::square(0, 0, 0, frame_w.max(frame_h))
}

pub fn run_downscale_baseline(
    frame_id: FrameId,
    frame: &RgbImage,
    policy: &MergePolicy,
    min_confidence: f64,
    eval: &dyn CropEvaluator,
) -> Result<FrameResult, PipelineError> {
    let crop = downscale_crop(frame.width(), frame.height());
    let side = crop.global_rect.w as u32;
    let grid = GridSpec {
        frame_w: frame.width(),
        frame_h: frame.height(),
        settings: CropSettings::new(1, 0).expect("valid"),
        crop_side: side,
        rows: 1,
        cols: 1,
        crops: vec![crop],
    };
    let out = eval
        .evaluate(frame_id, frame, &grid.crops)
        .map_err(|source| PipelineError::Detect {
            frame_id,
            stage: Stage::Downscale,
            source,
        })?;
    let raw = project(frame, &grid.crops, out.results);
    let (detections, post_ms) = finish(raw, &grid, policy, min_confidence);
    let mut timing = TimingProfile {
        postprocess_ms: post_ms,
        ..Default::default()
    };
    fill_final_timing(&mut timing, out.timing);
    Ok(FrameResult {
        frame_id,
        detections,
        active_count: 1,
        total_count: 1,
        timing,
    })
}

pub fn run_allcrops_baseline(
    frame_id: FrameId,
    frame: &RgbImage,
    final_grid: CropSettings,
    policy: &MergePolicy,
    min_confidence: f64,
    eval: &dyn CropEvaluator,
) -> Result<FrameResult, PipelineError> {
    let grid = grid_for(frame_id, frame, final_grid)?;
    let active = ActiveSet::all(grid);
    let (raw, stage) = final_pass(frame_id, frame, &active, eval).map_err(|e| match e {
        PipelineError::Detect { frame_id, source, .. } => PipelineError::Detect {
            frame_id,
            stage: Stage::AllCrops,
            source,
        },
        other => other,
    })?;
    let (detections, post_ms) = finish(raw, &active.grid, policy, min_confidence);
    let mut timing = TimingProfile {
        postprocess_ms: post_ms,
        ..Default::default()
    };
    fill_final_timing(&mut timing, stage);
    Ok(FrameResult {
        frame_id,
        detections,
        active_count: active.active_ids.len(),
        total_count: active.grid.len(),
        timing,
    })
}
