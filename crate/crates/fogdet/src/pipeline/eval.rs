//! Evaluation of detectors and checkpoints against annotated sample sets.

use std::path::Path;

use crate::core::{Annotation, Detection, Sample};
use crate::detector::{DetectConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::evalbench::{evaluate_detections, EvalReport, EVAL_SCORE_THRESHOLD};

use super::checkpoint::load_checkpoint;
use super::config::TrainConfig;

/// Per-image detections with their ground truth, kept alongside the report
/// so callers can derive further artifacts (PR curves, overlays).
pub struct EvalRun {
    pub report: EvalReport,
    pub per_image: Vec<(Vec<Detection>, Vec<Annotation>)>,
}

/// Evaluate an arbitrary detection function over annotated samples.
///
/// Fails on an empty set and on a set with no annotations at all — scoring
/// against nothing would silently report a perfect zero.
pub fn evaluate_with<'a, F>(
    samples: impl IntoIterator<Item = &'a Sample>,
    num_classes: usize,
    iou_threshold: f64,
    mut detect: F,
) -> Result<EvalRun>
where
    F: FnMut(&Sample) -> Result<Vec<Detection>>,
{
    let mut per_image = Vec::new();
    for s in samples {
        per_image.push((detect(s)?, s.annotations.clone()));
    }
    if per_image.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if per_image.iter().all(|(_, gt)| gt.is_empty()) {
        return Err(Error::invalid("unannotated evaluation set"));
    }
    let report = evaluate_detections(&per_image, num_classes, iou_threshold)?;
    Ok(EvalRun { report, per_image })
}

/// The detection configuration used for scoring: the configured NMS and cap,
/// but with the score floor dropped to [`EVAL_SCORE_THRESHOLD`] so the
/// precision-recall curve keeps its low-confidence tail.
pub fn eval_detect_config(base: &DetectConfig) -> DetectConfig {
    DetectConfig {
        score_threshold: EVAL_SCORE_THRESHOLD,
        ..base.clone()
    }
}

/// Evaluate a model over annotated samples with an explicit detect config.
pub fn evaluate_model<'a>(
    model: &DetectorModel,
    samples: impl IntoIterator<Item = &'a Sample>,
    detect_cfg: &DetectConfig,
    iou_threshold: f64,
) -> Result<EvalRun> {
    evaluate_with(samples, model.arch.num_classes, iou_threshold, |s| {
        model.detect(&s.image, detect_cfg)
    })
}

/// Rebuild the student detector from a checkpoint file.
pub fn load_model(path: &Path) -> Result<(DetectorModel, TrainConfig)> {
    let ckpt = load_checkpoint(path, None)?;
    let model = DetectorModel::from_params(ckpt.config.effective_arch(), ckpt.student_detector)?;
    Ok((model, ckpt.config))
}

/// Load a checkpoint and evaluate its student on annotated samples, using
/// the checkpoint's own detect configuration with the evaluation score
/// floor.
pub fn evaluate_checkpoint<'a>(
    path: &Path,
    samples: impl IntoIterator<Item = &'a Sample>,
    iou_threshold: f64,
) -> Result<EvalRun> {
    let (model, cfg) = load_model(path)?;
    evaluate_model(
        &model,
        samples,
        &eval_detect_config(&cfg.detect),
        iou_threshold,
    )
}

/// Pool the per-image matches into one precision-recall curve per class,
/// using the same greedy matching as the evaluation report. Classes with
/// no ground truth or no detections get an empty curve.
pub fn per_class_pr_curves(
    per_image: &[(Vec<Detection>, Vec<Annotation>)],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<Vec<Vec<(f64, f64)>>> {
    use crate::evalbench::{match_detections, pr_curve, rank_flags};
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    let mut gt_counts = vec![0usize; num_classes];
    for (dets, gts) in per_image {
        for g in gts {
            if g.category_id >= num_classes {
                return Err(Error::invalid(format!(
                    "ground-truth class {} out of range ({num_classes} classes)",
                    g.category_id
                )));
            }
            gt_counts[g.category_id] += 1;
        }
        let m = match_detections(dets, gts, iou_threshold)?;
        for (d, &tp) in dets.iter().zip(m.is_tp.iter()) {
            if d.category_id >= num_classes {
                return Err(Error::invalid(format!(
                    "detection class {} out of range ({num_classes} classes)",
                    d.category_id
                )));
            }
            scored[d.category_id].push((d.score, tp));
        }
    }
    Ok((0..num_classes)
        .map(|c| {
            if gt_counts[c] == 0 || scored[c].is_empty() {
                Vec::new()
            } else {
                pr_curve(&rank_flags(&scored[c]), gt_counts[c])
            }
        })
        .collect())
}
