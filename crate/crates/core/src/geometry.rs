//! Rectangle arithmetic, crop-grid construction and the transforms between
//! global frame pixels and the detector's square model space.
//!
//! Global boxes are integer [`Rect`]s. Boxes in model space are
//! [`LocalRect`]s (f64); rounding happens only when projecting back to the
//! frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side of the square detector input, in pixels.
pub const MODEL_SIDE: u32 = 608;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("rect must have positive size, got {w}x{h}")]
    EmptyRect { w: i64, h: i64 },
    #[error("rows must be >= 1")]
    ZeroRows,
    #[error("overlap {0} px must be below the model side {MODEL_SIDE}")]
    OverlapTooLarge(u32),
    #[error("rect {rect:?} does not intersect crop {crop_id}")]
    NoIntersection { rect: Rect, crop_id: usize },
    #[error("frame must be at least 1x1, got {0}x{1}")]
    EmptyFrame(u32, u32),
}

/// Axis-aligned box in global frame pixels. `w` and `h` are always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawRect")]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

#[derive(Deserialize)]
struct RawRect {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl TryFrom<RawRect> for Rect {
    type Error = GeometryError;

    fn try_from(r: RawRect) -> Result<Self, Self::Error> {
        Rect::try_new(r.x, r.y, r.w, r.h)
    }
}

impl Rect {
    /// Panics on non-positive size; use [`Rect::try_new`] for untrusted input.
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self::try_new(x, y, w, h).expect("invalid rect")
    }

    pub fn try_new(x: i64, y: i64, w: i64, h: i64) -> Result<Self, GeometryError> {
        if w <= 0 || h <= 0 {
            return Err(GeometryError::EmptyRect { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds from exclusive corner coordinates; `None` if empty.
    pub fn from_corners(x0: i64, y0: i64, x1: i64, y1: i64) -> Option<Self> {
        Self::try_new(x0, y0, x1 - x0, y1 - y0).ok()
    }

    pub fn frame(w: u32, h: u32) -> Self {
        Self::new(0, 0, w as i64, h as i64)
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        Rect::from_corners(
            self.x.max(other.x),
            self.y.max(other.y),
            self.right().min(other.right()),
            self.bottom().min(other.bottom()),
        )
    }

    pub fn intersection_area(&self, other: &Rect) -> i64 {
        self.intersection(other).map_or(0, |r| r.area())
    }

    /// Smallest rect containing both.
    pub fn union(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x.min(other.x),
            self.y.min(other.y),
            self.right().max(other.right()) - self.x.min(other.x),
            self.bottom().max(other.bottom()) - self.y.min(other.y),
        )
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn contains_point(&self, px: i64, py: i64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// Grows the rect by `margin` on every side, then clips to `bounds`.
    pub fn dilate(&self, margin: i64, bounds: &Rect) -> Option<Rect> {
        Rect::from_corners(
            self.x - margin,
            self.y - margin,
            self.right() + margin,
            self.bottom() + margin,
        )?
        .intersection(bounds)
    }
}

/// True iff the intersection has positive area; touching edges do not count.
pub fn intersects(a: &Rect, b: &Rect) -> bool {
    a.intersection(b).is_some()
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Box in the detector's square model space, `[0, MODEL_SIDE]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl LocalRect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        let side = MODEL_SIDE as f64;
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= side + 1e-9
            && self.y + self.h <= side + 1e-9
    }
}

/// Grid parameterization: number of rows and overlap between neighbouring
/// cells, measured in model space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSettings")]
pub struct CropSettings {
    pub rows: u32,
    pub overlap_px: u32,
}

#[derive(Deserialize)]
struct RawSettings {
    rows: u32,
    overlap_px: u32,
}

impl TryFrom<RawSettings> for CropSettings {
    type Error = GeometryError;

    fn try_from(r: RawSettings) -> Result<Self, Self::Error> {
        CropSettings::new(r.rows, r.overlap_px)
    }
}

impl CropSettings {
    pub fn new(rows: u32, overlap_px: u32) -> Result<Self, GeometryError> {
        if rows == 0 {
            return Err(GeometryError::ZeroRows);
        }
        if overlap_px >= MODEL_SIDE {
            return Err(GeometryError::OverlapTooLarge(overlap_px));
        }
        Ok(Self { rows, overlap_px })
    }

    fn stride(&self) -> u64 {
        (MODEL_SIDE - self.overlap_px) as u64
    }

    /// Model-space extent covered by `n` cells laid out along one axis.
    fn span(&self, n: u64) -> u64 {
        n * self.stride() + self.overlap_px as u64
    }
}

/// Side of one square crop in frame pixels, rounded half-up.
///
/// The frame height is split into `rows` model-sized cells overlapping by
/// `overlap_px` model pixels, so `frame_h` maps onto
/// `608 * rows - overlap * (rows - 1)` model pixels. Never less than
/// `ceil(frame_h / rows)`, so the rows always cover the frame.
pub fn crop_side_px(frame_h: u32, settings: CropSettings) -> u32 {
    let num = frame_h as u64 * MODEL_SIDE as u64;
    let den = settings.span(settings.rows as u64);
    // round half up on the exact rational
    let side = (2 * num + den) / (2 * den);
    side.max((frame_h as u64).div_ceil(settings.rows as u64)).max(1) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub crop_id: usize,
    pub row: u32,
    pub col: u32,
    pub global_rect: Rect,
    /// Frame pixels per model pixel.
    pub scale: f64,
}

impl CropSpec {
    /// A crop of arbitrary square side anchored at `(x, y)`.
    pub fn square(crop_id: usize, x: i64, y: i64, side: u32) -> Self {
        Self {
            crop_id,
            row: 0,
            col: 0,
            global_rect: Rect::new(x, y, side as i64, side as i64),
            scale: side as f64 / MODEL_SIDE as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub frame_w: u32,
    pub frame_h: u32,
    pub settings: CropSettings,
    pub crop_side: u32,
    pub rows: u32,
    pub cols: u32,
    pub crops: Vec<CropSpec>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    pub fn crop(&self, crop_id: usize) -> Option<&CropSpec> {
        self.crops.get(crop_id)
    }

    pub fn frame_rect(&self) -> Rect {
        Rect::frame(self.frame_w, self.frame_h)
    }
}

/// Minimal number of cells of `side` frame pixels needed along an axis of
/// `extent` frame pixels.
fn cells_needed(extent: u32, side: u32, settings: CropSettings) -> u32 {
    let target = extent as u64 * MODEL_SIDE as u64;
    let mut n = 1u64;
    while settings.span(n) * (side as u64) < target {
        n += 1;
    }
    n as u32
}

/// Origins along one axis: cells at model-space stride, the last one pushed
/// flush with the far edge, and earlier ones pulled forward where rounding
/// would leave a gap.
fn axis_origins(n: u32, extent: u32, side: u32, settings: CropSettings) -> Vec<i64> {
    let stride = settings.stride() as f64 * side as f64 / MODEL_SIDE as f64;
    let far = (extent as i64 - side as i64).max(0);
    let mut xs: Vec<i64> = (0..n)
        .map(|i| {
            if i + 1 == n {
                far
            } else {
                ((i as f64 * stride).round() as i64).min(far)
            }
        })
        .collect();
    for i in (0..xs.len().saturating_sub(1)).rev() {
        xs[i] = xs[i].max(xs[i + 1] - side as i64);
    }
    xs
}

pub fn build_grid(
    frame_w: u32,
    frame_h: u32,
    settings: CropSettings,
) -> Result<GridSpec, GeometryError> {
    if frame_w == 0 || frame_h == 0 {
        return Err(GeometryError::EmptyFrame(frame_w, frame_h));
    }
    let side = crop_side_px(frame_h, settings);
    let rows = settings.rows;
    let cols = cells_needed(frame_w, side, settings);
    let ys = axis_origins(rows, frame_h, side, settings);
    let xs = axis_origins(cols, frame_w, side, settings);

    let mut crops = Vec::with_capacity((rows * cols) as usize);
    for (row, &y) in ys.iter().enumerate() {
        for (col, &x) in xs.iter().enumerate() {
            let mut crop = CropSpec::square(crops.len(), x, y, side);
            crop.row = row as u32;
            crop.col = col as u32;
            crops.push(crop);
        }
    }
    Ok(GridSpec {
        frame_w,
        frame_h,
        settings,
        crop_side: side,
        rows,
        cols,
        crops,
    })
}

/// Projects the part of `r` inside the crop into model space.
pub fn to_local(r: &Rect, crop: &CropSpec) -> Result<LocalRect, GeometryError> {
    let clipped = r
        .intersection(&crop.global_rect)
        .ok_or(GeometryError::NoIntersection {
            rect: *r,
            crop_id: crop.crop_id,
        })?;
    let side = MODEL_SIDE as f64;
    let x0 = ((clipped.x - crop.global_rect.x) as f64 / crop.scale).clamp(0.0, side);
    let y0 = ((clipped.y - crop.global_rect.y) as f64 / crop.scale).clamp(0.0, side);
    let x1 = ((clipped.right() - crop.global_rect.x) as f64 / crop.scale).clamp(0.0, side);
    let y1 = ((clipped.bottom() - crop.global_rect.y) as f64 / crop.scale).clamp(0.0, side);
    Ok(LocalRect::new(x0, y0, x1 - x0, y1 - y0))
}

/// Projects a model-space box back to frame pixels, clipped to the frame.
/// `None` when the box lies entirely in padding outside the frame.
pub fn to_global(r: &LocalRect, crop: &CropSpec, frame_w: u32, frame_h: u32) -> Option<Rect> {
    let ox = crop.global_rect.x;
    let oy = crop.global_rect.y;
    let x0 = ox + (r.x * crop.scale).round() as i64;
    let y0 = oy + (r.y * crop.scale).round() as i64;
    let x1 = (ox + ((r.x + r.w) * crop.scale).round() as i64).max(x0 + 1);
    let y1 = (oy + ((r.y + r.h) * crop.scale).round() as i64).max(y0 + 1);
    Rect::from_corners(x0, y0, x1, y1)?.intersection(&Rect::frame(frame_w, frame_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lattice_iou(a: &Rect, b: &Rect) -> f64 {
        let (mut inter, mut uni) = (0i64, 0i64);
        let x0 = a.x.min(b.x);
        let y0 = a.y.min(b.y);
        let x1 = a.right().max(b.right());
        let y1 = a.bottom().max(b.bottom());
        for py in y0..y1 {
            for px in x0..x1 {
                let ia = a.contains_point(px, py);
                let ib = b.contains_point(px, py);
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    uni += 1;
                }
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_examples() {
        let a = Rect::new(3, 4, 10, 7);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Rect::new(100, 100, 5, 5)), 0.0);
        let v = iou(&Rect::new(0, 0, 2, 2), &Rect::new(1, 1, 2, 2));
        assert_eq!(v, lattice_iou(&Rect::new(0, 0, 2, 2), &Rect::new(1, 1, 2, 2)));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn intersects_examples() {
        assert!(!intersects(&Rect::new(0, 0, 5, 5), &Rect::new(5, 0, 5, 5)));
        assert!(intersects(&Rect::new(0, 0, 10, 10), &Rect::new(2, 2, 3, 3)));
        assert!(intersects(&Rect::new(0, 0, 5, 5), &Rect::new(4, 4, 5, 5)));
    }

    #[test]
    fn rejects_degenerate_rects() {
        assert!(Rect::try_new(0, 0, 0, 5).is_err());
        assert!(serde_json::from_str::<Rect>(r#"{"x":0,"y":0,"w":3,"h":-1}"#).is_err());
    }

    #[test]
    fn settings_validation() {
        assert_eq!(CropSettings::new(0, 20), Err(GeometryError::ZeroRows));
        assert!(CropSettings::new(2, 608).is_err());
        assert!(CropSettings::new(2, 607).is_ok());
    }

    #[test]
    fn crop_side_table_values() {
        let s = |r| CropSettings::new(r, 20).unwrap();
        assert_eq!(crop_side_px(2160, s(2)), 1098);
        assert_eq!(crop_side_px(2160, s(6)), 370);
        assert_eq!(crop_side_px(4320, s(3)), 1472);
        assert_eq!(crop_side_px(608, s(1)), 608);
    }

    #[test]
    fn grid_shapes() {
        for (rows, r, c) in [(1, 1, 2), (2, 2, 4), (6, 6, 11)] {
            let g = build_grid(3840, 2160, CropSettings::new(rows, 20).unwrap()).unwrap();
            assert_eq!((g.rows, g.cols), (r, c));
            assert_eq!(g.crops.len(), (r * c) as usize);
        }
        let g = build_grid(608, 608, CropSettings::new(1, 0).unwrap()).unwrap();
        assert_eq!((g.rows, g.cols), (1, 1));
        assert_eq!(g.crops[0].global_rect, Rect::frame(608, 608));
        assert_eq!(g.crops[0].scale, 1.0);
    }

    #[test]
    fn last_column_is_flush_with_frame() {
        let g = build_grid(3840, 2160, CropSettings::new(3, 20).unwrap()).unwrap();
        let last = g.crops.last().unwrap();
        assert_eq!(last.global_rect.right(), 3840);
        assert_eq!(last.global_rect.bottom(), 2160);
    }

    #[test]
    fn local_projection_examples() {
        let crop = CropSpec::square(0, 100, 100, 1216);
        let l = to_local(&Rect::new(100, 100, 608, 608), &crop).unwrap();
        assert_eq!(l, LocalRect::new(0.0, 0.0, 304.0, 304.0));
        let full = to_local(&crop.global_rect, &crop).unwrap();
        assert_eq!(full, LocalRect::new(0.0, 0.0, 608.0, 608.0));
        assert_eq!(to_global(&full, &crop, 4000, 4000), Some(crop.global_rect));
        assert!(to_local(&Rect::new(0, 0, 50, 50), &crop).is_err());

        let origin = CropSpec::square(0, 0, 0, 1216);
        let g = to_global(&LocalRect::new(10.0, 10.0, 20.0, 20.0), &origin, 4000, 4000);
        assert_eq!(g, Some(Rect::new(20, 20, 40, 40)));
    }

    #[test]
    fn to_global_clips_padding() {
        // crop hanging off the right edge of a 500 px frame
        let crop = CropSpec::square(0, 0, 0, 608);
        let r = to_global(&LocalRect::new(450.0, 0.0, 100.0, 10.0), &crop, 500, 500);
        assert_eq!(r, Some(Rect::new(450, 0, 50, 10)));
        assert_eq!(to_global(&LocalRect::new(520.0, 0.0, 50.0, 10.0), &crop, 500, 500), None);
    }

    fn coverage_holds(g: &GridSpec) -> bool {
        // coverage is separable: every column and every row index is covered
        let xs_ok = (0..g.frame_w as i64).all(|px| {
            g.crops
                .iter()
                .any(|c| px >= c.global_rect.x && px < c.global_rect.right())
        });
        let ys_ok = (0..g.frame_h as i64).all(|py| {
            g.crops
                .iter()
                .any(|c| py >= c.global_rect.y && py < c.global_rect.bottom())
        });
        xs_ok && ys_ok
    }

    proptest! {
        #[test]
        fn iou_matches_lattice(ax in 0i64..30, ay in 0i64..30, aw in 1i64..20, ah in 1i64..20,
                               bx in 0i64..30, by in 0i64..30, bw in 1i64..20, bh in 1i64..20) {
            let a = Rect::new(ax, ay, aw, ah);
            let b = Rect::new(bx, by, bw, bh);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((v - lattice_iou(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn grid_covers_and_is_minimal(w in 1u32..5000, h in 1u32..3000, rows in 1u32..7, o in 0u32..100) {
            let s = CropSettings::new(rows, o).unwrap();
            let g = build_grid(w, h, s).unwrap();
            prop_assert_eq!(g.crops.len(), (g.rows * g.cols) as usize);
            prop_assert!(coverage_holds(&g));
            for c in &g.crops {
                prop_assert!((c.global_rect.w - c.global_rect.h).abs() <= 1);
                prop_assert!(c.global_rect.x >= 0 && c.global_rect.y >= 0);
            }
            if g.cols > 1 {
                // the first cols-1 columns at model stride cannot reach the right edge
                let stride = (MODEL_SIDE - o) as f64 * g.crop_side as f64 / MODEL_SIDE as f64;
                let reach = (g.cols - 2) as f64 * stride + g.crop_side as f64;
                prop_assert!(reach < w as f64);
            }
        }

        #[test]
        fn local_global_round_trip(side in 100u32..3000, cx in 0i64..500, cy in 0i64..500,
                                   fx in 0.0f64..0.9, fy in 0.0f64..0.9, fw in 0.01f64..0.5, fh in 0.01f64..0.5) {
            let crop = CropSpec::square(0, cx, cy, side);
            let s = side as f64;
            let r = Rect::new(
                cx + (fx * s) as i64,
                cy + (fy * s) as i64,
                ((fw * s) as i64).max(1),
                ((fh * s) as i64).max(1),
            );
            let r = r.intersection(&crop.global_rect).unwrap();
            let l = to_local(&r, &crop).unwrap();
            prop_assert!(l.is_valid());
            let back = to_global(&l, &crop, 10_000, 10_000).unwrap();
            prop_assert!((back.x - r.x).abs() <= 1 && (back.y - r.y).abs() <= 1);
            prop_assert!((back.right() - r.right()).abs() <= 1 && (back.bottom() - r.bottom()).abs() <= 1);
        }
    }
}
