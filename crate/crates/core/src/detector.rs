//! Fixed-resolution square detector contract and the ground-truth oracle
//! used in place of a neural network.
//!
//! A [`Detector`] sees one model-sized tile at a time and answers in tile
//! coordinates. The oracle does not look at pixels: it projects annotated
//! objects through the crop geometry carried by the tile.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{to_local, CropSpec, LocalRect, Rect, MODEL_SIDE};

pub type FrameId = u64;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("tile is {got_w}x{got_h}, detector expects {side}x{side}")]
    WrongTileSize { side: u32, got_w: u32, got_h: u32 },
    #[error("cannot connect to {endpoint}: {source}")]
    Connection {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("request to {endpoint} timed out")]
    Timeout { endpoint: String },
    #[error("protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("worker {endpoint} returned error {code}: {message}")]
    Worker {
        endpoint: String,
        code: String,
        message: String,
    },
}

/// Detection in global frame pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: Rect,
    #[serde(rename = "class")]
    pub class_label: String,
    pub confidence: f64,
}

/// Detection in crop-local model space, as returned by a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalDetection {
    pub rect: LocalRect,
    pub class_label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub frame_id: FrameId,
    pub rect: Rect,
    pub class_label: String,
    pub object_id: u64,
}

/// On-disk form: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtRecord {
    pub frame_id: FrameId,
    pub class: String,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub object_id: u64,
}

impl From<&GroundTruthObject> for GtRecord {
    fn from(o: &GroundTruthObject) -> Self {
        Self {
            frame_id: o.frame_id,
            class: o.class_label.clone(),
            x: o.rect.x,
            y: o.rect.y,
            w: o.rect.w,
            h: o.rect.h,
            object_id: o.object_id,
        }
    }
}

#[derive(Debug, Error)]
pub enum GroundTruthError {
    #[error("ground truth line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ground truth indexed by frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    frames: BTreeMap<FrameId, Vec<GroundTruthObject>>,
}

impl GroundTruth {
    pub fn new(objects: impl IntoIterator<Item = GroundTruthObject>) -> Self {
        let mut frames: BTreeMap<FrameId, Vec<GroundTruthObject>> = BTreeMap::new();
        for o in objects {
            frames.entry(o.frame_id).or_default().push(o);
        }
        Self { frames }
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, GroundTruthError> {
        let mut objects = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: GtRecord = serde_json::from_str(&line).map_err(|e| GroundTruthError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let rect = Rect::try_new(rec.x, rec.y, rec.w, rec.h).map_err(|e| {
                GroundTruthError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                }
            })?;
            objects.push(GroundTruthObject {
                frame_id: rec.frame_id,
                rect,
                class_label: rec.class,
                object_id: rec.object_id,
            });
        }
        Ok(Self::new(objects))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for o in self.iter() {
            out.push_str(&serde_json::to_string(&GtRecord::from(o)).expect("gt record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn frame(&self, frame_id: FrameId) -> &[GroundTruthObject] {
        self.frames.get(&frame_id).map_or(&[], Vec::as_slice)
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.frames.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &GroundTruthObject> {
        self.frames.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> BTreeSet<String> {
        self.iter().map(|o| o.class_label.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorProfile {
    pub input_side: u32,
    pub min_confidence: f64,
    pub supported_classes: BTreeSet<String>,
}

/// One model-sized tile cut from a frame, with the crop it came from.
#[derive(Debug, Clone)]
pub struct Tile {
    pub frame_id: FrameId,
    pub crop: CropSpec,
    pub image: RgbImage,
}

/// The role a fixed-resolution square detector plays in the pipeline.
///
/// Implementations must tolerate concurrent calls.
pub trait Detector: Send + Sync {
    fn profile(&self) -> DetectorProfile;

    /// Detections in tile coordinates, sorted by descending confidence.
    fn detect(&self, tile: &Tile) -> Result<Vec<LocalDetection>, DetectError>;
}

pub(crate) fn check_tile(tile: &Tile, side: u32) -> Result<(), DetectError> {
    let (w, h) = tile.image.dimensions();
    if w != side || h != side {
        return Err(DetectError::WrongTileSize {
            side,
            got_w: w,
            got_h: h,
        });
    }
    Ok(())
}

/// Cuts the crop out of `frame` and resamples it to the model side with
/// nearest-neighbour sampling. Parts of the crop outside the frame are black.
pub fn extract_tile(frame: &RgbImage, crop: &CropSpec) -> RgbImage {
    let side = MODEL_SIDE;
    let (fw, fh) = frame.dimensions();
    let src_coord = |t: u32, origin: i64, limit: u32| -> Option<u32> {
        let s = origin + ((t as f64 + 0.5) * crop.scale).floor() as i64;
        (s >= 0 && s < limit as i64).then_some(s as u32)
    };
    let xs: Vec<Option<u32>> = (0..side)
        .map(|t| src_coord(t, crop.global_rect.x, fw))
        .collect();
    let mut tile = RgbImage::new(side, side);
    let src = frame.as_raw();
    let dst_stride = side as usize * 3;
    for ty in 0..side {
        let Some(sy) = src_coord(ty, crop.global_rect.y, fh) else {
            continue;
        };
        let row_off = sy as usize * fw as usize * 3;
        let dst_row = &mut tile.as_mut()[ty as usize * dst_stride..(ty as usize + 1) * dst_stride];
        for (tx, sx) in xs.iter().enumerate() {
            if let Some(sx) = sx {
                let s = row_off + *sx as usize * 3;
                dst_row[tx * 3..tx * 3 + 3].copy_from_slice(&src[s..s + 3]);
            }
        }
    }
    tile
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Minimum fraction of an object's area inside the crop for it to be seen.
    pub visibility_threshold: f64,
    /// Objects smaller than this on the tile, in either dimension, are missed.
    pub min_size_px: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            visibility_threshold: 0.3,
            min_size_px: 8.0,
        }
    }
}

/// Deterministic stand-in detector: reports every annotated object that is
/// sufficiently visible in the crop, with confidence equal to the visible
/// area fraction.
pub fn mock_detect(
    crop: &CropSpec,
    gt: &[GroundTruthObject],
    config: &OracleConfig,
) -> Vec<LocalDetection> {
    let mut out: Vec<LocalDetection> = gt
        .iter()
        .filter_map(|o| oracle_hit(crop, o, config))
        .collect();
    // stable: equal confidences keep annotation order
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out
}

fn oracle_hit(
    crop: &CropSpec,
    object: &GroundTruthObject,
    config: &OracleConfig,
) -> Option<LocalDetection> {
    let visible = object.rect.intersection(&crop.global_rect)?;
    let fraction = visible.area() as f64 / object.rect.area() as f64;
    if fraction < config.visibility_threshold {
        return None;
    }
    let local = to_local(&visible, crop).ok()?;
    if local.w < config.min_size_px || local.h < config.min_size_px {
        return None;
    }
    Some(LocalDetection {
        rect: local,
        class_label: object.class_label.clone(),
        confidence: fraction,
    })
}

/// Oracle detector over a loaded ground truth.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    gt: GroundTruth,
    config: OracleConfig,
}

impl OracleDetector {
    pub fn new(gt: GroundTruth, config: OracleConfig) -> Self {
        Self { gt, config }
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.gt
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }
}

impl Detector for OracleDetector {
    fn profile(&self) -> DetectorProfile {
        DetectorProfile {
            input_side: MODEL_SIDE,
            min_confidence: self.config.visibility_threshold,
            supported_classes: self.gt.classes(),
        }
    }

    fn detect(&self, tile: &Tile) -> Result<Vec<LocalDetection>, DetectError> {
        check_tile(tile, MODEL_SIDE)?;
        Ok(mock_detect(&tile.crop, self.gt.frame(tile.frame_id), &self.config))
    }
}

/// Oracle that additionally misses objects at a fixed rate. The miss
/// decision depends only on `(seed, frame_id, object_id)`, so an object is
/// missed consistently in every crop of a frame regardless of call order.
#[derive(Debug, Clone)]
pub struct StochasticOracle {
    inner: OracleDetector,
    miss_rate: f64,
    seed: u64,
}

impl StochasticOracle {
    pub fn new(inner: OracleDetector, miss_rate: f64, seed: u64) -> Self {
        Self {
            inner,
            miss_rate: miss_rate.clamp(0.0, 1.0),
            seed,
        }
    }

    fn missed(&self, frame_id: FrameId, object_id: u64) -> bool {
        let key = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(frame_id.rotate_left(32))
            ^ object_id.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        ChaCha8Rng::seed_from_u64(key).gen::<f64>() < self.miss_rate
    }
}

impl Detector for StochasticOracle {
    fn profile(&self) -> DetectorProfile {
        self.inner.profile()
    }

    fn detect(&self, tile: &Tile) -> Result<Vec<LocalDetection>, DetectError> {
        check_tile(tile, MODEL_SIDE)?;
        let kept: Vec<GroundTruthObject> = self
            .inner
            .gt
            .frame(tile.frame_id)
            .iter()
            .filter(|o| !self.missed(tile.frame_id, o.object_id))
            .cloned()
            .collect();
        Ok(mock_detect(&tile.crop, &kept, &self.inner.config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::to_global;

    fn person(id: u64, rect: Rect) -> GroundTruthObject {
        GroundTruthObject {
            frame_id: 0,
            rect,
            class_label: "person".into(),
            object_id: id,
        }
    }

    fn lattice_fraction(obj: &Rect, crop: &Rect) -> f64 {
        let mut inside = 0;
        for py in obj.y..obj.bottom() {
            for px in obj.x..obj.right() {
                if crop.contains_point(px, py) {
                    inside += 1;
                }
            }
        }
        inside as f64 / obj.area() as f64
    }

    fn blank_tile(crop: CropSpec) -> Tile {
        Tile {
            frame_id: 0,
            crop,
            image: RgbImage::new(MODEL_SIDE, MODEL_SIDE),
        }
    }

    #[test]
    fn empty_scene_yields_nothing() {
        let det = OracleDetector::new(GroundTruth::default(), OracleConfig::default());
        let out = det.detect(&blank_tile(CropSpec::square(0, 0, 0, 608))).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn fully_visible_object_has_confidence_one() {
        let crop = CropSpec::square(0, 0, 0, 1216);
        let obj = person(1, Rect::new(100, 200, 60, 160));
        let out = mock_detect(&crop, &[obj.clone()], &OracleConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 1.0);
        assert_eq!(to_global(&out[0].rect, &crop, 4000, 4000), Some(obj.rect));
    }

    #[test]
    fn below_visibility_is_dropped() {
        let crop = CropSpec::square(0, 0, 0, 608);
        // 20 of 100 columns inside the crop
        let obj = person(1, Rect::new(588, 10, 100, 50));
        assert_eq!(lattice_fraction(&obj.rect, &crop.global_rect), 0.2);
        assert!(mock_detect(&crop, &[obj], &OracleConfig::default()).is_empty());
    }

    #[test]
    fn straddling_object_seen_by_both_crops() {
        let left = CropSpec::square(0, 0, 0, 608);
        let right = CropSpec::square(1, 608, 0, 608);
        let obj = person(1, Rect::new(548, 100, 100, 200));
        let cfg = OracleConfig::default();
        let a = mock_detect(&left, &[obj.clone()], &cfg);
        let b = mock_detect(&right, &[obj.clone()], &cfg);
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert_eq!(a[0].confidence, lattice_fraction(&obj.rect, &left.global_rect));
        assert_eq!(b[0].confidence, lattice_fraction(&obj.rect, &right.global_rect));
        assert!((a[0].confidence - 0.6).abs() < 1e-12);
        assert!((b[0].confidence - 0.4).abs() < 1e-12);
    }

    #[test]
    fn tiny_objects_on_tile_are_missed() {
        let crop = CropSpec::square(0, 0, 0, 3840);
        // 40 px wide at scale 6.3 is ~6 px on the tile
        let small = person(1, Rect::new(100, 100, 40, 100));
        let big = person(2, Rect::new(500, 100, 60, 100));
        let out = mock_detect(&crop, &[small, big], &OracleConfig::default());
        assert_eq!(out.len(), 1);
        assert!(out[0].rect.w >= 8.0);
    }

    #[test]
    fn outputs_sorted_and_inside_tile() {
        let crop = CropSpec::square(0, 0, 0, 608);
        let objs = vec![
            person(1, Rect::new(560, 0, 100, 100)),
            person(2, Rect::new(10, 10, 50, 50)),
            person(3, Rect::new(0, 540, 40, 100)),
        ];
        let out = mock_detect(&crop, &objs, &OracleConfig::default());
        assert!(out.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        assert!(out.iter().all(|d| d.rect.is_valid()));
    }

    #[test]
    fn wrong_tile_size_rejected() {
        let det = OracleDetector::new(GroundTruth::default(), OracleConfig::default());
        let tile = Tile {
            frame_id: 0,
            crop: CropSpec::square(0, 0, 0, 608),
            image: RgbImage::new(600, 608),
        };
        assert!(matches!(det.detect(&tile), Err(DetectError::WrongTileSize { .. })));
    }

    #[test]
    fn extract_tile_nearest_neighbour() {
        let mut frame = RgbImage::new(1216, 1216);
        frame.put_pixel(2, 2, image::Rgb([255, 0, 0]));
        let tile = extract_tile(&frame, &CropSpec::square(0, 0, 0, 1216));
        assert_eq!(tile.dimensions(), (608, 608));
        // tile pixel 1 samples source floor(1.5 * 2) = 3, pixel 0 samples 1
        assert_eq!(tile.get_pixel(1, 1).0, [0, 0, 0]);
        frame.put_pixel(3, 3, image::Rgb([0, 255, 0]));
        let tile = extract_tile(&frame, &CropSpec::square(0, 0, 0, 1216));
        assert_eq!(tile.get_pixel(1, 1).0, [0, 255, 0]);
        // padding outside a small frame stays black
        let small = RgbImage::from_pixel(100, 100, image::Rgb([9, 9, 9]));
        let tile = extract_tile(&small, &CropSpec::square(0, 0, 0, 608));
        assert_eq!(tile.get_pixel(50, 50).0, [9, 9, 9]);
        assert_eq!(tile.get_pixel(300, 50).0, [0, 0, 0]);
    }

    #[test]
    fn gt_jsonl_round_trip() {
        let text = "{\"frame_id\":0,\"class\":\"person\",\"x\":1,\"y\":2,\"w\":3,\"h\":4,\"object_id\":7}\n\
                    {\"frame_id\":2,\"class\":\"car\",\"x\":10,\"y\":20,\"w\":30,\"h\":40,\"object_id\":8}\n";
        let gt = GroundTruth::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!(gt.len(), 2);
        assert_eq!(gt.frame(2)[0].rect, Rect::new(10, 20, 30, 40));
        assert!(gt.frame(1).is_empty());
        assert_eq!(gt.to_jsonl(), text);
        let bad = "{\"frame_id\":0,\"class\":\"person\",\"x\":1,\"y\":2,\"w\":0,\"h\":4,\"object_id\":7}\n";
        assert!(matches!(
            GroundTruth::from_jsonl(bad.as_bytes()),
            Err(GroundTruthError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn stochastic_oracle_is_seeded() {
        let objs: Vec<_> = (0..50)
            .map(|i| person(i, Rect::new(10 * i as i64, 10, 9, 30)))
            .collect();
        let gt = GroundTruth::new(objs);
        let base = OracleDetector::new(gt, OracleConfig { min_size_px: 1.0, ..Default::default() });
        let tile = blank_tile(CropSpec::square(0, 0, 0, 608));
        let a = StochasticOracle::new(base.clone(), 0.5, 3).detect(&tile).unwrap();
        let b = StochasticOracle::new(base.clone(), 0.5, 3).detect(&tile).unwrap();
        assert_eq!(a, b);
        assert!(a.len() > 5 && a.len() < 45);
        let none = StochasticOracle::new(base.clone(), 0.0, 3).detect(&tile).unwrap();
        assert_eq!(none, base.detect(&tile).unwrap());
    }
}
