//! Frame directories, run configuration, and result/timing files.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageDecoder, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Detection, FrameId, GroundTruth, GroundTruthError, OracleConfig};
use crate::distribution::{ClusterConfig, FrameProvider, TimingProfile};
use crate::geometry::{CropSettings, Rect};
use crate::metrics::FrameDetections;
use crate::pipeline::{FrameResult, PipelineSettings};
use crate::postprocess::MergePolicy;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("no frame_NNNNNN.ppm files in {0}")]
    Empty(PathBuf),
    #[error("frame index {index} out of range (sequence has {len} frames)")]
    OutOfRange { index: usize, len: usize },
    #[error("{path}: frame is {got:?}, sequence is {expected:?}")]
    DimensionMismatch {
        path: PathBuf,
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("{path}: cannot decode: {message}")]
    Decode { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FrameError + '_ {
    move |source| FrameError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn frame_file_name(index: FrameId) -> String {
    format!("frame_{index:06}.ppm")
}

fn parse_frame_name(name: &str) -> Option<FrameId> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".ppm")?;
    (digits.len() >= 6 && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

fn decode_ppm(path: &Path) -> Result<RgbImage, FrameError> {
    let decode = |message: String| FrameError::Decode {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| decode(e.to_string()))?;
    let img = DynamicImage::from_decoder(decoder).map_err(|e| decode(e.to_string()))?;
    Ok(img.into_rgb8())
}

fn ppm_dimensions(path: &Path) -> Result<(u32, u32), FrameError> {
    let file = File::open(path).map_err(io_err(path))?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| FrameError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(decoder.dimensions())
}

/// Writes a binary (P6) pixmap.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), FrameError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    PnmEncoder::new(&mut w)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| FrameError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    w.flush().map_err(io_err(path))
}

/// A directory of `frame_NNNNNN.ppm` files, ordered by index. The frame
/// id of each file is its numeric index.
#[derive(Debug, Clone)]
pub struct FrameSource {
    dir: PathBuf,
    frames: Vec<(FrameId, PathBuf)>,
    width: u32,
    height: u32,
}

impl FrameSource {
    /// Lists the directory and reads the first frame's header for the
    /// sequence dimensions.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, FrameError> {
        let dir = dir.as_ref().to_path_buf();
        let mut frames = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if let Some(id) = entry.file_name().to_str().and_then(parse_frame_name) {
                frames.push((id, entry.path()));
            }
        }
        frames.sort();
        let Some((_, first)) = frames.first() else {
            return Err(FrameError::Empty(dir));
        };
        let (width, height) = ppm_dimensions(first)?;
        Ok(Self {
            dir,
            frames,
            width,
            height,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.frames.iter().map(|(id, _)| *id)
    }

    pub fn load_frame(&self, index: usize) -> Result<(FrameId, RgbImage), FrameError> {
        let (id, path) = self.frames.get(index).ok_or(FrameError::OutOfRange {
            index,
            len: self.frames.len(),
        })?;
        let img = decode_ppm(path)?;
        if img.dimensions() != (self.width, self.height) {
            return Err(FrameError::DimensionMismatch {
                path: path.clone(),
                expected: (self.width, self.height),
                got: img.dimensions(),
            });
        }
        Ok((*id, img))
    }
}

impl FrameProvider for FrameSource {
    fn frame_count(&self) -> usize {
        self.len()
    }

    fn load(&self, index: usize) -> anyhow::Result<(FrameId, RgbImage)> {
        Ok(self.load_frame(index)?)
    }
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, GroundTruthError> {
    let file = File::open(path).map_err(|e| GroundTruthError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    GroundTruth::from_jsonl(BufReader::new(file))
}

// ---------------------------------------------------------------------------
// results

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectionRecord {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    class: String,
    confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct ResultRecord {
    frame_id: FrameId,
    active_count: usize,
    total_count: usize,
    detections: Vec<DetectionRecord>,
    #[serde(default)]
    timing: Option<TimingProfile>,
}

fn push_json<T: Serialize + ?Sized>(line: &mut String, v: &T) {
    line.push_str(&serde_json::to_string(v).expect("plain data serializes"));
}

/// One JSON line for a frame. Confidence is printed with exactly six
/// decimals so that the bytes depend only on the detections.
pub fn format_result_line(r: &FrameResult, embed_timing: bool) -> String {
    let mut line = format!(
        "{{\"frame_id\":{},\"active_count\":{},\"total_count\":{},\"detections\":[",
        r.frame_id, r.active_count, r.total_count
    );
    for (i, d) in r.detections.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str(&format!(
            "{{\"x\":{},\"y\":{},\"w\":{},\"h\":{},\"class\":",
            d.rect.x, d.rect.y, d.rect.w, d.rect.h
        ));
        push_json(&mut line, &d.class_label);
        line.push_str(&format!(",\"confidence\":{:.6}}}", d.confidence));
    }
    line.push(']');
    if embed_timing {
        line.push_str(",\"timing\":");
        push_json(&mut line, &r.timing);
    }
    line.push('}');
    line
}

pub fn write_results_to(results: &[FrameResult], embed_timing: bool, mut out: impl Write) -> io::Result<()> {
    for r in results {
        writeln!(out, "{}", format_result_line(r, embed_timing))?;
    }
    out.flush()
}

pub fn write_results(results: &[FrameResult], path: &Path, embed_timing: bool) -> Result<(), ResultsError> {
    let io = |source| ResultsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_results_to(results, embed_timing, BufWriter::new(file)).map_err(io)
}

/// Reads a results file back. Timing is zero unless it was embedded.
pub fn read_results(path: &Path) -> Result<Vec<FrameResult>, ResultsError> {
    let file = File::open(path).map_err(|source| ResultsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let parse = |message: String| ResultsError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResultRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let detections = rec
            .detections
            .into_iter()
            .map(|d| {
                Ok(Detection {
                    rect: Rect::try_new(d.x, d.y, d.w, d.h).map_err(|e| parse(e.to_string()))?,
                    class_label: d.class,
                    confidence: d.confidence,
                })
            })
            .collect::<Result<_, ResultsError>>()?;
        out.push(FrameResult {
            frame_id: rec.frame_id,
            detections,
            active_count: rec.active_count,
            total_count: rec.total_count,
            timing: rec.timing.unwrap_or_default(),
        });
    }
    Ok(out)
}

pub fn frame_detections(results: &[FrameResult]) -> Vec<FrameDetections> {
    results
        .iter()
        .map(|r| FrameDetections {
            frame_id: r.frame_id,
            detections: r.detections.clone(),
        })
        .collect()
}

pub const TIMING_COLUMNS: [&str; 12] = [
    "frame_id",
    "io_ms",
    "attention_wait_ms",
    "client_processing_ms",
    "transfer_ms",
    "final_eval_ms",
    "postprocess_ms",
    "total_ms",
    "slowest_worker_ms",
    "workers",
    "active_count",
    "total_count",
];

pub fn write_timing_csv_to(results: &[FrameResult], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TIMING_COLUMNS)?;
    for r in results {
        let t = &r.timing;
        let ms = |v: f64| format!("{v:.3}");
        w.write_record([
            r.frame_id.to_string(),
            ms(t.io_ms),
            ms(t.attention_wait_ms),
            ms(t.client_processing_ms),
            ms(t.transfer_ms),
            ms(t.final_eval_ms),
            ms(t.postprocess_ms),
            ms(t.total_ms()),
            ms(t.slowest_worker_ms()),
            t.per_worker.len().to_string(),
            r.active_count.to_string(),
            r.total_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv(results: &[FrameResult], path: &Path) -> Result<(), ResultsError> {
    let file = File::create(path).map_err(|source| ResultsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_timing_csv_to(results, BufWriter::new(file)).map_err(|e| ResultsError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    })
}

// ---------------------------------------------------------------------------
// run configuration

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{what} {path} does not exist")]
    MissingPath { what: &'static str, path: PathBuf },
}

/// Crop settings as written in a config file or given on the command
/// line. Later sources override earlier ones field by field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOverrides {
    /// Named setting such as `"1 att, 3 fin, 50 over"`.
    pub preset: Option<String>,
    pub attention_rows: Option<u32>,
    pub final_rows: Option<u32>,
    pub overlap_px: Option<u32>,
    /// Attention-grid overlap when it differs from the final grid's.
    pub attention_overlap_px: Option<u32>,
    pub attention_margin_px: Option<i64>,
    pub temporal_window: Option<usize>,
    pub min_confidence: Option<f64>,
}

impl PipelineOverrides {
    pub fn merge(&mut self, over: &PipelineOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f.clone(); } )* };
        }
        take!(
            preset,
            attention_rows,
            final_rows,
            overlap_px,
            attention_overlap_px,
            attention_margin_px,
            temporal_window,
            min_confidence
        );
    }

    pub fn resolve(&self) -> Result<PipelineSettings, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let mut s = match &self.preset {
            Some(p) => PipelineSettings::from_preset(p).map_err(|e| invalid(&e))?,
            None => PipelineSettings::default(),
        };
        let overlap = self.overlap_px.unwrap_or(s.final_grid.overlap_px);
        let att_overlap = self.attention_overlap_px.or(self.overlap_px).unwrap_or(s.attention.overlap_px);
        s.attention = CropSettings::new(self.attention_rows.unwrap_or(s.attention.rows), att_overlap).map_err(|e| invalid(&e))?;
        s.final_grid = CropSettings::new(self.final_rows.unwrap_or(s.final_grid.rows), overlap).map_err(|e| invalid(&e))?;
        if let Some(m) = self.attention_margin_px {
            s.attention_margin_px = m;
        }
        if let Some(k) = self.temporal_window {
            s.temporal_window = k;
        }
        if let Some(c) = self.min_confidence {
            s.min_confidence = c;
        }
        s.validate().map_err(|e| invalid(&e))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    /// In-process oracle over the ground truth file.
    #[default]
    Oracle,
    /// Workers listed in the cluster section.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSection {
    pub kind: DetectorKind,
    #[serde(flatten)]
    pub oracle: OracleConfig,
    /// Fraction of oracle hits dropped at random (0 = exact oracle).
    pub miss_rate: f64,
    pub seed: u64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Oracle,
            oracle: OracleConfig::default(),
            miss_rate: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub frames: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub timing: Option<PathBuf>,
}

impl PathsSection {
    pub fn merge(&mut self, over: &PathsSection) {
        for (dst, src) in [
            (&mut self.frames, &over.frames),
            (&mut self.gt, &over.gt),
            (&mut self.results, &over.results),
            (&mut self.timing, &over.timing),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Attention pass, then the final pass over active crops only.
    #[default]
    Pipeline,
    /// The whole frame as one model-sized crop.
    Downscale,
    /// Every crop of the final grid.
    Allcrops,
}

/// Contents of a run configuration file (TOML).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: RunMode,
    pub pipeline: PipelineOverrides,
    pub postprocess: MergePolicy,
    pub detector: DetectorSection,
    pub cluster: Option<ClusterConfig>,
    pub paths: PathsSection,
    /// Include per-frame timing in the results file; makes it run-dependent.
    pub embed_timing: bool,
}

impl ConfigFile {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ConfigFile = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.paths.frames,
            &mut cfg.paths.gt,
            &mut cfg.paths.results,
            &mut cfg.paths.timing,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// A validated configuration, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub settings: PipelineSettings,
    pub policy: MergePolicy,
    pub detector: DetectorSection,
    pub cluster: Option<ClusterConfig>,
    pub frames: PathBuf,
    pub gt: Option<PathBuf>,
    pub results: PathBuf,
    pub timing: Option<PathBuf>,
    pub embed_timing: bool,
}

impl RunConfig {
    /// Checks the combined settings and that every input path exists.
    pub fn from_file(cfg: ConfigFile) -> Result<Self, ConfigError> {
        let settings = cfg.pipeline.resolve()?;
        if !(cfg.postprocess.nms_iou > 0.0 && cfg.postprocess.nms_iou <= 1.0) {
            return Err(ConfigError::Invalid("postprocess.nms_iou must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&cfg.detector.miss_rate) {
            return Err(ConfigError::Invalid("detector.miss_rate must lie in [0, 1]".into()));
        }
        let frames = cfg
            .paths
            .frames
            .ok_or_else(|| ConfigError::Invalid("paths.frames is required".into()))?;
        if !frames.is_dir() {
            return Err(ConfigError::MissingPath { what: "frame directory", path: frames });
        }
        let results = cfg
            .paths
            .results
            .ok_or_else(|| ConfigError::Invalid("paths.results is required".into()))?;
        match cfg.detector.kind {
            DetectorKind::Oracle if cfg.paths.gt.is_none() => {
                return Err(ConfigError::Invalid("the oracle detector needs paths.gt".into()));
            }
            DetectorKind::Remote => match &cfg.cluster {
                Some(c) if !c.final_workers.is_empty() => {}
                _ => return Err(ConfigError::Invalid("remote detector needs cluster.final_workers".into())),
            },
            _ => {}
        }
        if let Some(gt) = &cfg.paths.gt {
            if !gt.is_file() {
                return Err(ConfigError::MissingPath { what: "ground truth file", path: gt.clone() });
            }
        }
        Ok(Self {
            mode: cfg.mode,
            settings,
            policy: cfg.postprocess,
            detector: cfg.detector,
            cluster: cfg.cluster,
            frames,
            gt: cfg.paths.gt,
            results,
            timing: cfg.paths.timing,
            embed_timing: cfg.embed_timing,
        })
    }
}
