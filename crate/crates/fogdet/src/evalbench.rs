//! Detection quality metrics (per-class AP, mAP, headline accuracy),
//! wall-clock detection profiling, and the comparison report against
//! published reference figures.
//!
//! Headline accuracy is defined as mAP at IoU 0.5 and labeled as such in
//! every report; AP uses all-point interpolation (the exact area under the
//! precision envelope).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::core::{box_iou, Annotation, Detection, ImagePlane};
use crate::detector::{DetectConfig, DetectorModel};
use crate::error::{Error, Result};

/// IoU threshold behind the headline accuracy number.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Score threshold used when collecting detections for evaluation: low, so
/// the precision-recall curve covers the full ranking.
pub const EVAL_SCORE_THRESHOLD: f64 = 0.05;

/// Outcome of greedily matching one image's detections against its ground
/// truth at a fixed IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// True-positive flag per detection, in input order.
    pub is_tp: Vec<bool>,
    /// Matched detection index per ground-truth box, `None` if missed.
    pub gt_match: Vec<Option<usize>>,
}

/// Greedy matching: detections in descending score order (ties keep input
/// order) each claim the highest-IoU still-unmatched ground truth of the
/// same class with IoU >= `iou_threshold`; successes are true positives,
/// everything else a false positive. Each ground truth matches at most
/// once.
pub fn match_detections(
    dets: &[Detection],
    gts: &[Annotation],
    iou_threshold: f64,
) -> Result<MatchResult> {
    if !(iou_threshold.is_finite() && (0.0..=1.0).contains(&iou_threshold)) {
        return Err(Error::invalid(format!(
            "iou threshold must lie in [0,1], got {iou_threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));

    let mut is_tp = vec![false; dets.len()];
    let mut gt_match: Vec<Option<usize>> = vec![None; gts.len()];
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_match[gi].is_some() || gt.category_id != det.category_id {
                continue;
            }
            let iou = box_iou(&det.bbox, &gt.bbox)?;
            if iou < iou_threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, _)) => iou > bi,
            };
            if better {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            is_tp[di] = true;
            gt_match[gi] = Some(di);
        }
    }
    Ok(MatchResult { is_tp, gt_match })
}

/// Order `(score, is_tp)` pairs by descending score (stable on ties) and
/// return the ranked true-positive flags — the input to
/// [`average_precision`] when pooling detections across images.
pub fn rank_flags(scored: &[(f64, bool)]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap().then(a.cmp(&b)));
    order.into_iter().map(|i| scored[i].1).collect()
}

/// Average precision from ranked true-positive flags: the exact area under
/// the precision envelope of the cumulative precision-recall curve
/// (all-point interpolation). `num_gt` = 0 means the class has no ground
/// truth and its AP is undefined.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let points = pr_curve(ranked_tp, num_gt);
    // envelope: max precision at or beyond each point's recall
    let mut env = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for k in (0..points.len()).rev() {
        running = running.max(points[k].1);
        env[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * env[k];
            prev_recall = r;
        }
    }
    Some(ap)
}

/// Cumulative (recall, precision) points along the ranking; one point per
/// detection.
pub fn pr_curve(ranked_tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut points = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &flag) in ranked_tp.iter().enumerate() {
        if flag {
            tp += 1;
        }
        points.push((tp as f64 / num_gt.max(1) as f64, tp as f64 / (k + 1) as f64));
    }
    points
}

/// Arithmetic mean of the defined per-class APs.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid(
            "mean_ap: no class has a defined AP (no ground truth at all)",
        ));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Detection-quality summary over a dataset at one IoU threshold.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// AP per class id; `None` where the class has no ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean AP over classes with at least one ground-truth box.
    pub map: f64,
    /// Headline accuracy, defined as mAP at `iou_threshold`.
    pub accuracy: f64,
    pub iou_threshold: f64,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
}

/// Match every image and pool per-class rankings into an [`EvalReport`].
pub fn evaluate_detections(
    per_image: &[(Vec<Detection>, Vec<Annotation>)],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<EvalReport> {
    if num_classes == 0 {
        return Err(Error::invalid("evaluate_detections: zero classes"));
    }
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    let mut gt_counts = vec![0usize; num_classes];
    let mut num_gt = 0;
    let mut num_detections = 0;
    for (dets, gts) in per_image {
        for d in dets {
            if d.category_id >= num_classes {
                return Err(Error::invalid(format!(
                    "detection class {} out of range ({num_classes} classes)",
                    d.category_id
                )));
            }
        }
        for g in gts {
            if g.category_id >= num_classes {
                return Err(Error::invalid(format!(
                    "ground-truth class {} out of range ({num_classes} classes)",
                    g.category_id
                )));
            }
            gt_counts[g.category_id] += 1;
        }
        num_gt += gts.len();
        num_detections += dets.len();
        let m = match_detections(dets, gts, iou_threshold)?;
        for (d, &tp) in dets.iter().zip(m.is_tp.iter()) {
            scored[d.category_id].push((d.score, tp));
        }
    }
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(&rank_flags(&scored[c]), gt_counts[c]))
        .collect();
    let map = mean_ap(&per_class_ap)?;
    Ok(EvalReport {
        per_class_ap,
        map,
        accuracy: map,
        iou_threshold,
        num_images: per_image.len(),
        num_gt,
        num_detections,
    })
}

/// Wall-clock detection latency summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimingReport {
    /// One record per image, milliseconds.
    pub latencies_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Where the numbers were measured.
    pub hardware_note: String,
}

/// Nearest-rank 95th percentile of a sorted sample.
fn percentile_95(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let rank = ((0.95 * n as f64).ceil() as usize).max(1);
    sorted[rank - 1]
}

/// Run `detect` on every image (serially, after `warmup` throwaway runs)
/// and aggregate per-image wall-clock latency. With `repeats` > 1, each
/// image's record is the mean of its repeats.
pub fn timing_benchmark(
    model: &DetectorModel,
    images: &[ImagePlane],
    cfg: &DetectConfig,
    warmup: usize,
    repeats: usize,
) -> Result<TimingReport> {
    if images.is_empty() {
        return Err(Error::invalid("timing_benchmark: empty image set"));
    }
    if repeats == 0 {
        return Err(Error::invalid("timing_benchmark: repeats must be >= 1"));
    }
    for k in 0..warmup {
        model.detect(&images[k % images.len()], cfg)?;
    }
    let mut latencies_ms = Vec::with_capacity(images.len());
    for img in images {
        let mut total = 0.0;
        for _ in 0..repeats {
            let t0 = Instant::now();
            model.detect(img, cfg)?;
            total += t0.elapsed().as_secs_f64() * 1e3;
        }
        // clock-resolution floor keeps every record strictly positive
        latencies_ms.push((total / repeats as f64).max(1e-6));
    }
    let mut sorted = latencies_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median_ms = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(TimingReport {
        mean_ms: latencies_ms.iter().sum::<f64>() / n as f64,
        median_ms,
        p95_ms: percentile_95(&sorted),
        latencies_ms,
        hardware_note: hardware_note(),
    })
}

fn hardware_note() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get().to_string())
        .unwrap_or_else(|_| "?".to_string());
    format!(
        "{} {} with {cores} logical core(s), f64 CPU inference",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// One line of the accuracy comparison: a method, its nature, its accuracy
/// in percent, and optionally a mean detection time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub nature: String,
    pub accuracy_percent: f64,
    pub timing_ms: Option<f64>,
}

impl ComparisonRow {
    pub fn validate(&self) -> Result<()> {
        if !(self.accuracy_percent.is_finite() && (0.0..=100.0).contains(&self.accuracy_percent)) {
            return Err(Error::invalid(format!(
                "accuracy must lie in [0,100], got {}",
                self.accuracy_percent
            )));
        }
        for (field, v) in [("method", &self.method), ("nature", &self.nature)] {
            if v.contains('|') || v.contains('\n') {
                return Err(Error::invalid(format!(
                    "comparison row {field} must not contain '|' or newlines"
                )));
            }
        }
        if let Some(t) = self.timing_ms {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid(format!("timing must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

fn row(method: &str, nature: &str, accuracy: f64) -> ComparisonRow {
    ComparisonRow {
        method: method.to_string(),
        nature: nature.to_string(),
        accuracy_percent: accuracy,
        timing_ms: None,
    }
}

/// Published reference figures for foggy-image detectors, as reported in
/// the FerRCNN domain-adaptation literature, with this crate's
/// configuration (FerRCNN + DA + ResNet) last.
pub fn reference_rows() -> Vec<ComparisonRow> {
    vec![
        row("DAFerRCNN", "FerRCNN + DA", 75.4),
        row("FerRCNN-OpCV", "FerRCNN + OpenCV", 78.4),
        row("FerRCNN-DpRc", "FerRCNN + DepthRecons", 82.1),
        row("FerRCNN-DA-RN", "FerRCNN + DA + ResNet", 85.2),
    ]
}

const TABLE_HEADER: &str = "Work | Nature | Accuracy (mAP@0.5) | Mean detection time (ms)";

/// Render rows as a plain-text table, in the given order. Accuracy and
/// timing values use the shortest exact decimal form, so
/// [`parse_comparison_table`] recovers the rows bit for bit.
pub fn comparison_table(rows: &[ComparisonRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("comparison_table: no rows"));
    }
    let mut out = String::new();
    out.push_str(TABLE_HEADER);
    out.push('\n');
    out.push_str(&"-".repeat(TABLE_HEADER.len()));
    out.push('\n');
    for r in rows {
        r.validate()?;
        let timing = r
            .timing_ms
            .map(|t| t.to_string())
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{} | {} | {}% | {}\n",
            r.method, r.nature, r.accuracy_percent, timing
        ));
    }
    Ok(out)
}

/// Inverse of [`comparison_table`].
pub fn parse_comparison_table(text: &str) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln < 2 || line.trim().is_empty() {
            continue; // header and separator
        }
        let parts: Vec<&str> = line.split(" | ").collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                path: "<comparison table>".to_string(),
                detail: format!("line {}: expected 4 columns, got {}", ln + 1, parts.len()),
            });
        }
        let acc = parts[2]
            .strip_suffix('%')
            .ok_or_else(|| Error::Parse {
                path: "<comparison table>".to_string(),
                detail: format!("line {}: accuracy missing '%'", ln + 1),
            })?
            .parse::<f64>()
            .map_err(|e| Error::Parse {
                path: "<comparison table>".to_string(),
                detail: format!("line {}: bad accuracy: {e}", ln + 1),
            })?;
        let timing = match parts[3].trim() {
            "-" => None,
            t => Some(t.parse::<f64>().map_err(|e| Error::Parse {
                path: "<comparison table>".to_string(),
                detail: format!("line {}: bad timing: {e}", ln + 1),
            })?),
        };
        rows.push(ComparisonRow {
            method: parts[0].to_string(),
            nature: parts[1].to_string(),
            accuracy_percent: acc,
            timing_ms: timing,
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: "<comparison table>".to_string(),
            detail: "no data rows".to_string(),
        });
    }
    Ok(rows)
}
