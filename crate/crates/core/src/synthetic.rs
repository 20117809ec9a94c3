//! Seeded synthetic scenes: flat background, filled rectangles, and the
//! matching ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{FrameId, GroundTruth, GroundTruthObject};
use crate::frameio::{frame_file_name, write_ppm, FrameError};
use crate::geometry::{build_grid, CropSettings, GridSpec, Rect};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

fn default_class() -> String {
    "person".into()
}

/// An object with a fixed size moving at constant velocity (pixels per
/// frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    #[serde(default = "default_class")]
    pub class: String,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    #[serde(default)]
    pub color: Option<[u8; 3]>,
}

/// Objects with uniformly drawn sizes, positions and velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomObjects {
    pub count: usize,
    pub min_w: i64,
    pub max_w: i64,
    pub min_h: i64,
    pub max_h: i64,
    #[serde(default)]
    pub max_speed: f64,
    #[serde(default = "default_classes")]
    pub classes: Vec<String>,
}

fn default_classes() -> Vec<String> {
    vec![default_class()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StraddleAxis {
    /// Split by a horizontal border: top and bottom fragments.
    Vertical,
    /// Split by a vertical border: left and right fragments.
    Horizontal,
}

/// A static object centred on a border between two neighbouring cells of
/// the grid built with `rows` and `overlap_px`, so that each cell sees a
/// fragment of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StraddleSpec {
    pub rows: u32,
    pub overlap_px: u32,
    pub axis: StraddleAxis,
    /// Index of the border: between cell `border` and `border + 1`.
    pub border: u32,
    /// Column (vertical axis) or row (horizontal axis) holding the object.
    pub cell: u32,
    pub w: i64,
    pub h: i64,
    #[serde(default = "default_class")]
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub background: [u8; 3],
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub random: Option<RandomObjects>,
    #[serde(default)]
    pub straddles: Vec<StraddleSpec>,
}

impl SceneSpec {
    pub fn blank(width: u32, height: u32, frames: u32) -> Self {
        Self {
            width,
            height,
            frames,
            seed: 0,
            background: [0; 3],
            objects: Vec::new(),
            random: None,
            straddles: Vec::new(),
        }
    }

    /// Reads a spec from TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse = |message: String| SceneError::Parse {
            path: path.to_path_buf(),
            message,
        };
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| parse(e.to_string()))
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return bad("width, height and frames must be positive".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.w <= 0 || o.h <= 0 {
                return bad(format!("object {i} has non-positive size"));
            }
        }
        if let Some(r) = &self.random {
            if r.min_w <= 0 || r.min_h <= 0 || r.min_w > r.max_w || r.min_h > r.max_h {
                return bad("random object sizes need 0 < min <= max".into());
            }
            if r.classes.is_empty() {
                return bad("random objects need at least one class".into());
            }
            if r.max_speed < 0.0 {
                return bad("max_speed must be >= 0".into());
            }
        }
        for (i, s) in self.straddles.iter().enumerate() {
            straddle_rect(self.width, self.height, s).map_err(|m| SceneError::Invalid(format!("straddle {i}: {m}")))?;
        }
        Ok(())
    }
}

/// Places a straddling object from the crop layout of its grid.
pub fn straddle_rect(width: u32, height: u32, s: &StraddleSpec) -> Result<Rect, String> {
    let settings = CropSettings::new(s.rows, s.overlap_px).map_err(|e| e.to_string())?;
    let grid = build_grid(width, height, settings).map_err(|e| e.to_string())?;
    straddle_in_grid(&grid, s)
}

fn cell_origin(grid: &GridSpec, row: u32, col: u32) -> Rect {
    grid.crops[(row * grid.cols + col) as usize].global_rect
}

fn straddle_in_grid(grid: &GridSpec, s: &StraddleSpec) -> Result<Rect, String> {
    if s.w <= 0 || s.h <= 0 {
        return Err("non-positive size".into());
    }
    let (along, across) = match s.axis {
        StraddleAxis::Vertical => (grid.rows, grid.cols),
        StraddleAxis::Horizontal => (grid.cols, grid.rows),
    };
    if s.border + 1 >= along || s.cell >= across {
        return Err(format!(
            "border {} / cell {} outside a {}x{} grid",
            s.border, s.cell, grid.rows, grid.cols
        ));
    }
    let (a, b) = match s.axis {
        StraddleAxis::Vertical => (cell_origin(grid, s.border, s.cell), cell_origin(grid, s.border + 1, s.cell)),
        StraddleAxis::Horizontal => (cell_origin(grid, s.cell, s.border), cell_origin(grid, s.cell, s.border + 1)),
    };
    let rect = match s.axis {
        StraddleAxis::Vertical => {
            let mid = (b.y + a.bottom()) / 2;
            Rect::new(a.x + (a.w - s.w) / 2, mid - s.h / 2, s.w, s.h)
        }
        StraddleAxis::Horizontal => {
            let mid = (b.x + a.right()) / 2;
            Rect::new(mid - s.w / 2, a.y + (a.h - s.h) / 2, s.w, s.h)
        }
    };
    if !grid.frame_rect().contains(&rect) {
        return Err("object does not fit in the frame".into());
    }
    let crosses = match s.axis {
        StraddleAxis::Vertical => rect.y < b.y && rect.bottom() > a.bottom(),
        StraddleAxis::Horizontal => rect.x < b.x && rect.right() > a.right(),
    };
    if !crosses {
        return Err("object does not extend past the overlap on both sides".into());
    }
    Ok(rect)
}

#[derive(Debug, Clone, PartialEq)]
struct Placed {
    class: String,
    x: f64,
    y: f64,
    w: i64,
    h: i64,
    vx: f64,
    vy: f64,
    color: [u8; 3],
}

impl Placed {
    fn rect_at(&self, frame: u32, bounds: &Rect) -> Option<Rect> {
        let x = (self.x + self.vx * frame as f64).round() as i64;
        let y = (self.y + self.vy * frame as f64).round() as i64;
        Rect::new(x, y, self.w, self.h).intersection(bounds)
    }
}

/// A resolved scene: every object with its trajectory and colour.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    objects: Vec<Placed>,
}

fn bright_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.gen_range(96..=255), rng.gen_range(96..=255), rng.gen_range(96..=255)]
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self, SceneError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut objects = Vec::new();
        for o in &spec.objects {
            let color = o.color.unwrap_or_else(|| bright_color(&mut rng));
            objects.push(Placed {
                class: o.class.clone(),
                x: o.x as f64,
                y: o.y as f64,
                w: o.w,
                h: o.h,
                vx: o.vx,
                vy: o.vy,
                color,
            });
        }
        for s in &spec.straddles {
            let r = straddle_rect(spec.width, spec.height, s).map_err(SceneError::Invalid)?;
            objects.push(Placed {
                class: s.class.clone(),
                x: r.x as f64,
                y: r.y as f64,
                w: r.w,
                h: r.h,
                vx: 0.0,
                vy: 0.0,
                color: bright_color(&mut rng),
            });
        }
        if let Some(r) = &spec.random {
            for _ in 0..r.count {
                let w = rng.gen_range(r.min_w..=r.max_w).min(spec.width as i64);
                let h = rng.gen_range(r.min_h..=r.max_h).min(spec.height as i64);
                let x = rng.gen_range(0..=spec.width as i64 - w);
                let y = rng.gen_range(0..=spec.height as i64 - h);
                let (vx, vy) = if r.max_speed > 0.0 {
                    (rng.gen_range(-r.max_speed..=r.max_speed), rng.gen_range(-r.max_speed..=r.max_speed))
                } else {
                    (0.0, 0.0)
                };
                let class = r.classes[rng.gen_range(0..r.classes.len())].clone();
                objects.push(Placed {
                    class,
                    x: x as f64,
                    y: y as f64,
                    w,
                    h,
                    vx,
                    vy,
                    color: bright_color(&mut rng),
                });
            }
        }
        Ok(Self { spec, objects })
    }

    fn bounds(&self) -> Rect {
        Rect::frame(self.spec.width, self.spec.height)
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = FrameId> {
        0..self.spec.frames as FrameId
    }

    /// Visible part of every object in every frame; objects that left the
    /// frame are omitted. Object ids are positions in the resolved list.
    pub fn ground_truth(&self) -> GroundTruth {
        let bounds = self.bounds();
        let mut out = Vec::new();
        for f in 0..self.spec.frames {
            for (id, o) in self.objects.iter().enumerate() {
                if let Some(rect) = o.rect_at(f, &bounds) {
                    out.push(GroundTruthObject {
                        frame_id: f as FrameId,
                        rect,
                        class_label: o.class.clone(),
                        object_id: id as u64,
                    });
                }
            }
        }
        GroundTruth::new(out)
    }

    /// Later objects are painted over earlier ones.
    pub fn render(&self, frame: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(self.spec.width, self.spec.height, Rgb(self.spec.background));
        let bounds = self.bounds();
        for o in &self.objects {
            let Some(r) = o.rect_at(frame, &bounds) else { continue };
            for y in r.y..r.bottom() {
                for x in r.x..r.right() {
                    img.put_pixel(x as u32, y as u32, Rgb(o.color));
                }
            }
        }
        img
    }

    pub fn frames(&self) -> Vec<(FrameId, RgbImage)> {
        (0..self.spec.frames).map(|f| (f as FrameId, self.render(f))).collect()
    }

    /// Writes `frame_NNNNNN.ppm` files and `gt.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SceneError> {
        let io = |source| SceneError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        for f in 0..self.spec.frames {
            write_ppm(&dir.join(frame_file_name(f as FrameId)), &self.render(f))?;
        }
        let gt_path = dir.join("gt.jsonl");
        fs::write(&gt_path, self.ground_truth().to_jsonl()).map_err(|source| SceneError::Io { path: gt_path, source })
    }
}
