//! Frame stream with the next frame's attention computed during the current
//! frame's final pass.

use std::thread;
use std::time::Instant;

use image::RgbImage;
use thiserror::Error;

use crate::detector::FrameId;
use crate::pipeline::{attention_pass, ms_since, AttentionOutcome, CropEvaluator, FrameResult, Pipeline, PipelineSettings};

/// Random access to the frames of a sequence.
pub trait FrameProvider: Sync {
    fn frame_count(&self) -> usize;

    fn load(&self, index: usize) -> anyhow::Result<(FrameId, RgbImage)>;
}

impl FrameProvider for [(FrameId, RgbImage)] {
    fn frame_count(&self) -> usize {
        self.len()
    }

    fn load(&self, index: usize) -> anyhow::Result<(FrameId, RgbImage)> {
        self.get(index)
            .cloned()
            .ok_or_else(|| anyhow::anyhow!("frame index {index} out of range"))
    }
}

#[derive(Debug, Error)]
#[error("stream stopped at frame index {cursor}: {source}")]
pub struct StreamError {
    /// Index of the first frame without a result; resume from here.
    pub cursor: usize,
    /// Results of the frames before `cursor`.
    pub completed: Vec<FrameResult>,
    #[source]
    pub source: anyhow::Error,
}

struct Loaded {
    frame_id: FrameId,
    frame: RgbImage,
    io_ms: f64,
}

fn load(frames: &(impl FrameProvider + ?Sized), index: usize) -> anyhow::Result<Loaded> {
    let t = Instant::now();
    let (frame_id, frame) = frames.load(index)?;
    Ok(Loaded {
        frame_id,
        frame,
        io_ms: ms_since(t),
    })
}

fn load_and_attend(
    frames: &(impl FrameProvider + ?Sized),
    index: usize,
    settings: &PipelineSettings,
    eval: &dyn CropEvaluator,
) -> anyhow::Result<(Loaded, AttentionOutcome)> {
    let loaded = load(frames, index)?;
    let att = attention_pass(loaded.frame_id, &loaded.frame, settings, eval)?;
    Ok((loaded, att))
}

/// Runs the pipeline over `frames[start..]`.
///
/// With an attention evaluator, attention for frame `t + 1` (including its
/// loading) runs on it while frame `t`'s final pass runs on `final_eval`;
/// `attention_wait_ms` then records only the part not hidden behind the
/// final pass. Without one, attention runs inline on `final_eval`.
pub fn run_stream(
    frames: &(impl FrameProvider + ?Sized),
    start: usize,
    pipeline: &mut Pipeline,
    final_eval: &dyn CropEvaluator,
    attention_eval: Option<&dyn CropEvaluator>,
) -> Result<Vec<FrameResult>, StreamError> {
    let n = frames.frame_count();
    let mut results = Vec::with_capacity(n.saturating_sub(start));
    let fail = |cursor, completed, source| StreamError {
        cursor,
        completed,
        source,
    };

    let Some(att_eval) = attention_eval else {
        for i in start..n {
            let step = load(frames, i).and_then(|l| {
                let mut r = pipeline.run_frame(l.frame_id, &l.frame, final_eval)?;
                r.timing.io_ms = l.io_ms;
                Ok(r)
            });
            match step {
                Ok(r) => results.push(r),
                Err(e) => return Err(fail(i, results, e)),
            }
        }
        return Ok(results);
    };

    if start >= n {
        return Ok(results);
    }
    let t = Instant::now();
    let mut current = match load_and_attend(frames, start, &pipeline.settings, att_eval) {
        Ok(c) => c,
        Err(e) => return Err(fail(start, results, e)),
    };
    let mut wait_ms = ms_since(t) - current.0.io_ms;

    for i in start..n {
        let (loaded, att) = current;
        let settings = pipeline.settings;
        let (result, next) = thread::scope(|s| {
            let prefetch = (i + 1 < n).then(|| {
                let settings = &settings;
                s.spawn(move || load_and_attend(frames, i + 1, settings, att_eval))
            });
            let result = pipeline
                .complete(loaded.frame_id, &loaded.frame, att, wait_ms, final_eval)
                .map(|mut r| {
                    r.timing.io_ms = loaded.io_ms;
                    r
                });
            let final_done = Instant::now();
            let next = prefetch.map(|h| (h.join().expect("attention thread panicked"), ms_since(final_done)));
            (result, next)
        });
        match result {
            Ok(r) => results.push(r),
            Err(e) => return Err(fail(i, results, e.into())),
        }
        match next {
            None => break,
            Some((Ok(c), waited)) => {
                current = c;
                wait_ms = waited;
            }
            Some((Err(e), _)) => return Err(fail(i + 1, results, e)),
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Detector, GroundTruth, GroundTruthObject, OracleConfig, OracleDetector};
    use crate::geometry::Rect;
    use crate::pipeline::LocalEvaluator;
    use crate::postprocess::MergePolicy;
    use std::sync::Arc;

    fn scene() -> (Vec<(FrameId, RgbImage)>, LocalEvaluator) {
        let mut objs = Vec::new();
        for f in 0..4u64 {
            objs.push(GroundTruthObject {
                frame_id: f,
                rect: Rect::new(200 + 30 * f as i64, 300, 60, 150),
                class_label: "person".into(),
                object_id: 1,
            });
        }
        let det: Arc<dyn Detector> = Arc::new(OracleDetector::new(GroundTruth::new(objs), OracleConfig::default()));
        let frames = (0..4).map(|f| (f, RgbImage::new(1920, 1080))).collect();
        (frames, LocalEvaluator::new(det))
    }

    fn pipeline() -> Pipeline {
        Pipeline::new(PipelineSettings::from_rows(1, 2, 20).unwrap(), MergePolicy::default()).unwrap()
    }

    #[test]
    fn overlapped_stream_matches_sequential() {
        let (frames, eval) = scene();
        let seq = run_stream(frames.as_slice(), 0, &mut pipeline(), &eval, None).unwrap();
        let par = run_stream(frames.as_slice(), 0, &mut pipeline(), &eval, Some(&eval)).unwrap();
        assert_eq!(seq.len(), 4);
        let ids: Vec<_> = par.iter().map(|r| r.frame_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.detections, b.detections);
            assert_eq!(a.active_count, b.active_count);
        }
    }

    #[test]
    fn single_frame_and_resume() {
        let (frames, eval) = scene();
        let one = run_stream(&frames[..1], 0, &mut pipeline(), &eval, Some(&eval)).unwrap();
        assert_eq!(one.len(), 1);
        let tail = run_stream(frames.as_slice(), 2, &mut pipeline(), &eval, Some(&eval)).unwrap();
        assert_eq!(tail.iter().map(|r| r.frame_id).collect::<Vec<_>>(), vec![2, 3]);
    }

    struct Broken;

    impl FrameProvider for Broken {
        fn frame_count(&self) -> usize {
            3
        }

        fn load(&self, index: usize) -> anyhow::Result<(FrameId, RgbImage)> {
            anyhow::ensure!(index != 1, "disk on fire");
            Ok((index as FrameId, RgbImage::new(700, 700)))
        }
    }

    #[test]
    fn failure_reports_cursor() {
        let (_, eval) = scene();
        for att in [None, Some(&eval as &dyn CropEvaluator)] {
            let err = run_stream(&Broken, 0, &mut pipeline(), &eval, att).unwrap_err();
            assert_eq!(err.cursor, 1);
            assert_eq!(err.completed.len(), 1);
        }
    }
}
