//! PASCAL VOC style matching and average precision, plus per-frame object
//! counts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Detection, FrameId, GroundTruth, GroundTruthObject};
use crate::geometry::iou;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("average precision is undefined without ground truth objects")]
    NoGroundTruth,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub detection: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub assignment: Vec<Assignment>,
    /// Per detection, in input order: whether it was a true positive.
    pub is_tp: Vec<bool>,
}

/// Detection indices by descending confidence, ties by input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Greedy VOC matching within one frame: in descending confidence, each
/// detection claims the unmatched same-class object with the highest IoU,
/// if that IoU reaches the threshold.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthObject], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult {
        is_tp: vec![false; dets.len()],
        ..Default::default()
    };
    for i in ranked(dets) {
        let d = &dets[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, o)| !taken[*g] && o.class_label == d.class_label)
            .map(|(g, o)| (g, iou(&d.rect, &o.rect)))
            .fold(None, |best: Option<(usize, f64)>, (g, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((g, v)),
            });
        match best {
            Some((g, v)) if v >= iou_threshold && v > 0.0 => {
                taken[g] = true;
                result.is_tp[i] = true;
                result.true_positives += 1;
                result.assignment.push(Assignment { detection: i, gt: g, iou: v });
            }
            _ => result.false_positives += 1,
        }
    }
    result.false_negatives = gts.len() - result.true_positives;
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Area under the monotone precision envelope.
    #[default]
    Continuous,
    ElevenPoint,
}

/// AP from a ranked list of hit flags and the number of positives.
pub fn ap_from_ranking(hits: &[bool], positives: usize, method: ApMethod) -> Result<f64, MetricsError> {
    if positives == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    Ok(match method {
        ApMethod::Continuous => {
            let mut mrec = vec![0.0];
            mrec.extend(&recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend(&precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(rc, _)| **rc >= r)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// Detections of one frame, for multi-frame evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_id: FrameId,
    pub detections: Vec<Detection>,
}

/// VOC AP over all frames with one global confidence ranking.
/// `class = None` pools all classes (matching is still class-aware).
pub fn average_precision(
    frames: &[FrameDetections],
    gt: &GroundTruth,
    iou_threshold: f64,
    class: Option<&str>,
    method: ApMethod,
) -> Result<f64, MetricsError> {
    let keep = |label: &str| class.is_none_or(|c| c == label);
    let positives = gt.iter().filter(|o| keep(&o.class_label)).count();
    let mut scored: Vec<(f64, FrameId, usize, bool)> = Vec::new();
    for f in frames {
        let dets: Vec<Detection> = f.detections.iter().filter(|d| keep(&d.class_label)).cloned().collect();
        let gts: Vec<GroundTruthObject> = gt.frame(f.frame_id).iter().filter(|o| keep(&o.class_label)).cloned().collect();
        let m = match_detections(&dets, &gts, iou_threshold);
        for (i, d) in dets.iter().enumerate() {
            scored.push((d.confidence, f.frame_id, i, m.is_tp[i]));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let hits: Vec<bool> = scored.iter().map(|s| s.3).collect();
    ap_from_ranking(&hits, positives, method)
}

fn threshold_key(t: f64) -> String {
    format!("ap{}", (t * 100.0).round() as u32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub per_class: BTreeMap<String, f64>,
}

/// AP at each threshold, keyed `ap25`, `ap50`, `ap75`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub thresholds: BTreeMap<String, ThresholdReport>,
}

impl ApReport {
    pub fn ap(&self, threshold: f64) -> Option<f64> {
        self.thresholds.get(&threshold_key(threshold)).map(|r| r.ap)
    }

    pub fn ap25(&self) -> Option<f64> {
        self.ap(0.25)
    }

    pub fn ap50(&self) -> Option<f64> {
        self.ap(0.5)
    }

    pub fn ap75(&self) -> Option<f64> {
        self.ap(0.75)
    }
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

pub fn ap_report(
    frames: &[FrameDetections],
    gt: &GroundTruth,
    thresholds: &[f64],
    method: ApMethod,
) -> Result<ApReport, MetricsError> {
    let classes: BTreeSet<String> = gt.classes();
    let mut out = BTreeMap::new();
    for &t in thresholds {
        let ap = average_precision(frames, gt, t, None, method)?;
        let mut per_class = BTreeMap::new();
        for c in &classes {
            per_class.insert(c.clone(), average_precision(frames, gt, t, Some(c), method)?);
        }
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for f in frames {
            let m = match_detections(&f.detections, gt.frame(f.frame_id), t);
            tp += m.true_positives;
            fp += m.false_positives;
            fneg += m.false_negatives;
        }
        out.insert(
            threshold_key(t),
            ThresholdReport {
                ap,
                true_positives: tp,
                false_positives: fp,
                false_negatives: fneg,
                per_class,
            },
        );
    }
    Ok(ApReport { thresholds: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub frame_id: FrameId,
    pub detected_count: usize,
    pub gt_count: usize,
}

pub fn count_report(frames: &[FrameDetections], gt: &GroundTruth) -> Vec<CountRow> {
    frames
        .iter()
        .map(|f| CountRow {
            frame_id: f.frame_id,
            detected_count: f.detections.len(),
            gt_count: gt.frame(f.frame_id).len(),
        })
        .collect()
}

pub fn write_count_csv(rows: &[CountRow], out: impl Write) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;
    use proptest::prelude::*;

    fn det(x: i64, y: i64, w: i64, h: i64, c: f64) -> Detection {
        Detection {
            rect: Rect::new(x, y, w, h),
            class_label: "person".into(),
            confidence: c,
        }
    }

    fn obj(id: u64, frame_id: FrameId, x: i64, y: i64, w: i64, h: i64) -> GroundTruthObject {
        GroundTruthObject {
            frame_id,
            rect: Rect::new(x, y, w, h),
            class_label: "person".into(),
            object_id: id,
        }
    }

    /// Maximum number of one-to-one pairs with IoU >= threshold, by
    /// exhaustive search.
    fn brute_force_max_tp(dets: &[Detection], gts: &[GroundTruthObject], thr: f64) -> usize {
        fn go(i: usize, dets: &[Detection], gts: &[GroundTruthObject], used: &mut Vec<bool>, thr: f64) -> usize {
            if i == dets.len() {
                return 0;
            }
            let mut best = go(i + 1, dets, gts, used, thr);
            for g in 0..gts.len() {
                if !used[g] && iou(&dets[i].rect, &gts[g].rect) >= thr {
                    used[g] = true;
                    best = best.max(1 + go(i + 1, dets, gts, used, thr));
                    used[g] = false;
                }
            }
            best
        }
        go(0, dets, gts, &mut vec![false; gts.len()], thr)
    }

    #[test]
    fn match_examples() {
        let gts = vec![obj(0, 0, 0, 0, 10, 10), obj(1, 0, 50, 50, 10, 10)];
        let perfect = vec![det(0, 0, 10, 10, 0.9), det(50, 50, 10, 10, 0.8)];
        let m = match_detections(&perfect, &gts, 0.5);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (2, 0, 0));
        let m = match_detections(&[], &gts, 0.5);
        assert_eq!(m.false_negatives, 2);
        let dup = vec![det(0, 0, 10, 10, 0.9), det(1, 0, 10, 10, 0.8)];
        let m = match_detections(&dup, &gts[..1], 0.5);
        assert_eq!((m.true_positives, m.false_positives), (1, 1));
        assert_eq!(m.true_positives, brute_force_max_tp(&dup, &gts[..1], 0.5));
    }

    #[test]
    fn hand_computed_pr_curves() {
        // 1 TP then 1 FP over 2 GT: recall 0.5 at precision 1
        assert_eq!(ap_from_ranking(&[true, false], 2, ApMethod::Continuous).unwrap(), 0.5);
        assert_eq!(ap_from_ranking(&[true, true], 2, ApMethod::Continuous).unwrap(), 1.0);
        assert_eq!(ap_from_ranking(&[false, false], 2, ApMethod::Continuous).unwrap(), 0.0);
        // F T T over 3 GT: r=1/3 p=1/2, r=2/3 p=2/3 -> envelope 2/3 over [0, 2/3]
        let v = ap_from_ranking(&[false, true, true], 3, ApMethod::Continuous).unwrap();
        assert!((v - 4.0 / 9.0).abs() < 1e-12);
        assert!(matches!(ap_from_ranking(&[true], 0, ApMethod::Continuous), Err(MetricsError::NoGroundTruth)));
        // 11-point: T F over 2 GT -> precision 1 at recall 0..0.5 (6 points)
        let v = ap_from_ranking(&[true, false], 2, ApMethod::ElevenPoint).unwrap();
        assert!((v - 6.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn ap_over_frames() {
        let gt = GroundTruth::new(vec![obj(0, 0, 0, 0, 10, 10), obj(1, 1, 0, 0, 10, 10)]);
        let frames = vec![
            FrameDetections { frame_id: 0, detections: vec![det(0, 0, 10, 10, 0.9)] },
            FrameDetections { frame_id: 1, detections: vec![det(100, 100, 10, 10, 0.8)] },
        ];
        let ap = average_precision(&frames, &gt, 0.5, None, ApMethod::Continuous).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
        let report = ap_report(&frames, &gt, &DEFAULT_THRESHOLDS, ApMethod::Continuous).unwrap();
        assert_eq!(report.ap50(), Some(0.5));
        assert_eq!(report.thresholds["ap50"].false_negatives, 1);
        assert_eq!(report.thresholds["ap50"].per_class["person"], 0.5);
    }

    #[test]
    fn counts() {
        let gt = GroundTruth::new(vec![obj(0, 1, 0, 0, 10, 10)]);
        let frames = vec![
            FrameDetections { frame_id: 0, detections: vec![] },
            FrameDetections { frame_id: 1, detections: vec![det(0, 0, 10, 10, 1.0)] },
        ];
        let rows = count_report(&frames, &gt);
        assert_eq!(rows[0], CountRow { frame_id: 0, detected_count: 0, gt_count: 0 });
        assert_eq!(rows[1].detected_count, 1);
        let mut buf = Vec::new();
        write_count_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "frame_id,detected_count,gt_count\n0,0,0\n1,1,1\n");
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruthObject>)> {
        let rect = (0i64..40, 0i64..40, 4i64..20, 4i64..20);
        (
            prop::collection::vec((rect.clone(), 0u32..1000), 0..5),
            prop::collection::vec(rect, 0..5),
        )
            .prop_map(|(d, g)| {
                let dets = d
                    .into_iter()
                    .map(|((x, y, w, h), c)| det(x, y, w, h, c as f64 / 1000.0))
                    .collect();
                let gts = g
                    .into_iter()
                    .enumerate()
                    .map(|(i, (x, y, w, h))| obj(i as u64, 0, x, y, w, h))
                    .collect();
                (dets, gts)
            })
    }

    proptest! {
        #[test]
        fn greedy_matching_is_consistent((dets, gts) in arb_case(), thr in 0.1f64..0.9) {
            let m = match_detections(&dets, &gts, thr);
            prop_assert_eq!(m.true_positives + m.false_positives, dets.len());
            prop_assert_eq!(m.true_positives + m.false_negatives, gts.len());
            prop_assert!(m.true_positives <= brute_force_max_tp(&dets, &gts, thr));
            let g: BTreeSet<usize> = m.assignment.iter().map(|a| a.gt).collect();
            prop_assert_eq!(g.len(), m.assignment.len());
        }

        #[test]
        fn ap_monotone_in_threshold((dets, gts) in arb_case()) {
            prop_assume!(!gts.is_empty());
            let gt = GroundTruth::new(gts);
            let frames = vec![FrameDetections { frame_id: 0, detections: dets }];
            let r = ap_report(&frames, &gt, &DEFAULT_THRESHOLDS, ApMethod::Continuous).unwrap();
            let (a25, a50, a75) = (r.ap25().unwrap(), r.ap50().unwrap(), r.ap75().unwrap());
            prop_assert!((0.0..=1.0).contains(&a75));
            prop_assert!(a25 + 1e-12 >= a50 && a50 + 1e-12 >= a75);
        }

        #[test]
        fn ranking_monotonicity(hits in prop::collection::vec(prop::bool::ANY, 0..20), extra in 0usize..5) {
            let positives = hits.iter().filter(|h| **h).count() + extra + 1;
            let base = ap_from_ranking(&hits, positives, ApMethod::Continuous).unwrap();
            let mut top = vec![true];
            top.extend(&hits);
            prop_assert!(ap_from_ranking(&top, positives, ApMethod::Continuous).unwrap() + 1e-12 >= base);
            let mut bottom = hits.clone();
            bottom.push(false);
            prop_assert!((ap_from_ranking(&bottom, positives, ApMethod::Continuous).unwrap() - base).abs() < 1e-12);
        }
    }
}
