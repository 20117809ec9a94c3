//! Duplicate suppression and merging of objects cut by crop borders.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::geometry::{iou, CropSpec, GridSpec, Rect};

/// A global detection with the final-grid crops it was seen in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub detection: Detection,
    /// Sorted, non-empty.
    pub crop_ids: Vec<usize>,
}

impl Candidate {
    pub fn new(detection: Detection, crop_id: usize) -> Self {
        Self {
            detection,
            crop_ids: vec![crop_id],
        }
    }
}

impl AsRef<Detection> for Candidate {
    fn as_ref(&self) -> &Detection {
        &self.detection
    }
}

impl AsRef<Detection> for Detection {
    fn as_ref(&self) -> &Detection {
        self
    }
}

/// Directions along which fragments of a class may be joined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeAxis {
    /// Only across horizontal borders (fragments stacked vertically).
    Vertical,
    Horizontal,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsScope {
    #[default]
    Global,
    PerCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergePolicy {
    pub nms_iou: f64,
    pub vertical_gap_px: i64,
    pub horizontal_alignment_tolerance_px: i64,
    pub mergeable_classes: BTreeMap<String, MergeAxis>,
    pub merge_before_nms: bool,
    pub nms_scope: NmsScope,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            nms_iou: 0.45,
            vertical_gap_px: 40,
            horizontal_alignment_tolerance_px: 30,
            mergeable_classes: BTreeMap::from([("person".to_string(), MergeAxis::Vertical)]),
            merge_before_nms: false,
            nms_scope: NmsScope::Global,
        }
    }
}

fn by_confidence<T: AsRef<Detection>>(items: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .as_ref()
            .confidence
            .total_cmp(&items[a].as_ref().confidence)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy per-class NMS. Output is ordered by confidence, ties by input
/// position.
pub fn nms<T: AsRef<Detection> + Clone>(items: &[T], iou_threshold: f64) -> Vec<T> {
    let mut kept: Vec<usize> = Vec::new();
    for i in by_confidence(items) {
        let d = items[i].as_ref();
        let suppressed = kept.iter().any(|&k| {
            let other = items[k].as_ref();
            other.class_label == d.class_label && iou(&other.rect, &d.rect) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| items[i].clone()).collect()
}

/// NMS within each originating crop only.
pub fn nms_per_crop(items: &[Candidate], iou_threshold: f64) -> Vec<Candidate> {
    let mut groups: BTreeMap<&[usize], Vec<Candidate>> = BTreeMap::new();
    for c in items {
        groups.entry(c.crop_ids.as_slice()).or_default().push(c.clone());
    }
    let out: Vec<Candidate> = groups
        .values()
        .flat_map(|g| nms(g, iou_threshold))
        .collect();
    by_confidence(&out).into_iter().map(|i| out[i].clone()).collect()
}

fn aligned(a: i64, a_end: i64, b: i64, b_end: i64, tolerance: i64) -> bool {
    (a - b).abs() <= tolerance && (a_end - b_end).abs() <= tolerance
}

/// `upper` comes from crop `cu`, `lower` from `cl` directly below it.
fn joins_vertically(upper: &Rect, cu: &CropSpec, lower: &Rect, cl: &CropSpec, p: &MergePolicy) -> bool {
    upper.bottom() >= cu.global_rect.bottom() - p.vertical_gap_px
        && lower.y <= cl.global_rect.y + p.vertical_gap_px
        && aligned(upper.x, upper.right(), lower.x, lower.right(), p.horizontal_alignment_tolerance_px)
}

fn joins_horizontally(left: &Rect, cl: &CropSpec, right: &Rect, cr: &CropSpec, p: &MergePolicy) -> bool {
    left.right() >= cl.global_rect.right() - p.vertical_gap_px
        && right.x <= cr.global_rect.x + p.vertical_gap_px
        && aligned(left.y, left.bottom(), right.y, right.bottom(), p.horizontal_alignment_tolerance_px)
}

fn mergeable(a: &Candidate, b: &Candidate, grid: &GridSpec, policy: &MergePolicy) -> bool {
    if a.detection.class_label != b.detection.class_label {
        return false;
    }
    let Some(&axis) = policy.mergeable_classes.get(&a.detection.class_label) else {
        return false;
    };
    let (ra, rb) = (&a.detection.rect, &b.detection.rect);
    for ca in a.crop_ids.iter().filter_map(|&id| grid.crop(id)) {
        for cb in b.crop_ids.iter().filter_map(|&id| grid.crop(id)) {
            let vertical = matches!(axis, MergeAxis::Vertical | MergeAxis::Both) && ca.col == cb.col;
            if vertical && ca.row + 1 == cb.row && joins_vertically(ra, ca, rb, cb, policy) {
                return true;
            }
            if vertical && cb.row + 1 == ca.row && joins_vertically(rb, cb, ra, ca, policy) {
                return true;
            }
            let horizontal = matches!(axis, MergeAxis::Horizontal | MergeAxis::Both) && ca.row == cb.row;
            if horizontal && ca.col + 1 == cb.col && joins_horizontally(ra, ca, rb, cb, policy) {
                return true;
            }
            if horizontal && cb.col + 1 == ca.col && joins_horizontally(rb, cb, ra, ca, policy) {
                return true;
            }
        }
    }
    false
}

/// Joins fragments of one object seen on both sides of a crop border into
/// their union box, repeating until no pair qualifies.
pub fn merge_split(dets: Vec<Candidate>, grid: &GridSpec, policy: &MergePolicy) -> Vec<Candidate> {
    let mut items = dets;
    'outer: loop {
        for i in 0..items.len() {
            for j in i + 1..items.len() {
                if mergeable(&items[i], &items[j], grid, policy) {
                    let b = items.remove(j);
                    let a = &mut items[i];
                    a.detection.rect = a.detection.rect.union(&b.detection.rect);
                    a.detection.confidence = a.detection.confidence.max(b.detection.confidence);
                    a.crop_ids.extend(b.crop_ids);
                    a.crop_ids.sort_unstable();
                    a.crop_ids.dedup();
                    continue 'outer;
                }
            }
        }
        return items;
    }
}

fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.rect.cmp(&b.rect))
        .then_with(|| a.class_label.cmp(&b.class_label))
}

/// NMS and border merging in the configured order. Output is sorted by
/// descending confidence, then rect.
pub fn postprocess(raw: Vec<Candidate>, grid: &GridSpec, policy: &MergePolicy) -> Vec<Detection> {
    let suppress = |c: &[Candidate]| match policy.nms_scope {
        NmsScope::Global => nms(c, policy.nms_iou),
        NmsScope::PerCrop => nms_per_crop(c, policy.nms_iou),
    };
    let out = if policy.merge_before_nms {
        suppress(&merge_split(raw, grid, policy))
    } else {
        merge_split(suppress(&raw), grid, policy)
    };
    let mut dets: Vec<Detection> = out.into_iter().map(|c| c.detection).collect();
    dets.sort_by(canonical_order);
    dets
}
