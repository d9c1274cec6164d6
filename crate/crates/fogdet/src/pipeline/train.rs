//! The two-phase training loop.
//!
//! Phase 1 (burn-in) trains the detector on annotated source images only.
//! Phase 2 mixes source and target in every batch (half each, rounding
//! toward source) and adds the adaptation machinery: the gradient-reversal
//! domain loss on both domains, depth supervision on source images that
//! carry depth maps, self-reconstruction of target inputs, and — for
//! target images paired with a clear twin — EMA-teacher pseudo-labels plus
//! the fog/clear consistency term.
//!
//! Everything is serial and seeded: the split, every epoch's batch order,
//! and anchor/ROI sampling each draw from their own labeled seed stream,
//! so a fixed seed reproduces the metric history bit-for-bit.

use std::io::Write as _;
use std::path::Path;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptHeads, GrlCoefficient};
use crate::core::{box_iou, validate_sample, Annotation, BBox, Sample};
use crate::detector::{
    assign_rpn_targets, encode_deltas, image_to_tensor, propose, DetectConfig, DetectorModel,
    FeatureMap,
};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_domain_loss, composite_loss_tape, consistency_loss, depth_loss,
    reconstruction_loss, regulating_term, roi_head_loss, rpn_loss, sample_rpn_anchors,
    ConsistencyInputs, LossBreakdown, RoiTarget, TapeLossParts,
};
use crate::nn::optim::{clip_global_norm, SgdMomentum};
use crate::nn::tape::{Binding, RoiSpec, Tape, TensorId};
use crate::nn::ParamSet;
use crate::pseudo::{consistency_pairs, ema_update_set, generate_pseudo_labels, TeacherState};
use crate::rng::stream_rng;

use super::checkpoint::{save_checkpoint, Checkpoint, EpochStats};
use super::config::TrainConfig;
use super::manifest::DatasetItem;

/// Name of the append-only metrics file written under the output directory.
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Anchors at or above this IoU with a ground-truth box are RPN positives.
pub const RPN_IOU_POS: f64 = 0.7;
/// Anchors strictly below this max-IoU are RPN negatives.
pub const RPN_IOU_NEG: f64 = 0.3;
/// ROI candidates at or above this IoU with a ground-truth box are foreground.
pub const ROI_FG_IOU: f64 = 0.5;
/// Jittered copies of each ground-truth box added to the ROI candidate pool
/// during training, so the second stage always sees foreground examples with
/// non-trivial regression targets even while proposals are still poor.
pub const ROI_GT_JITTER: usize = 6;
/// Maximum relative center shift applied when jittering a ground-truth box.
pub const ROI_JITTER_SHIFT: f64 = 0.15;
/// Half-width of the relative scale range applied when jittering.
pub const ROI_JITTER_SCALE: f64 = 0.15;
/// IoU floor for matching clear-view and foggy-view detections.
pub const CONSISTENCY_MATCH_IOU: f64 = 0.5;

/// One optimization step's loss record, also the metrics-file line payload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// `"burn_in"` or `"adaptation"`.
    pub phase: String,
    pub loss: LossBreakdown,
}

#[derive(Serialize)]
struct StepLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    record: &'a StepRecord,
}

/// Result of a full training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    pub steps: Vec<StepRecord>,
}

/// Assign each candidate box a second-stage target (foreground with class
/// and encoded delta at IoU ≥ [`ROI_FG_IOU`], else background) and sample a
/// class-balanced minibatch: foreground capped at `round(batch ·
/// fg_fraction)`, the rest filled with background. Selected indices are
/// sorted ascending within each group, foreground first.
pub fn sample_rois(
    candidates: &[BBox],
    gts: &[Annotation],
    batch: usize,
    fg_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<BBox>, Vec<RoiTarget>)> {
    let mut fg: Vec<(usize, RoiTarget)> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, a) in gts.iter().enumerate() {
            let iou = box_iou(c, &a.bbox)?;
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) if iou >= ROI_FG_IOU => fg.push((
                i,
                RoiTarget::Foreground {
                    class: gts[g].category_id,
                    delta: encode_deltas(c, &gts[g].bbox),
                },
            )),
            _ => bg.push(i),
        }
    }
    let n_fg = fg.len().min((batch as f64 * fg_fraction).round() as usize);
    let n_bg = bg.len().min(batch - n_fg);
    let mut fg_sel: Vec<usize> = rand::seq::index::sample(rng, fg.len(), n_fg).into_vec();
    fg_sel.sort_unstable();
    let mut bg_sel: Vec<usize> = rand::seq::index::sample(rng, bg.len(), n_bg).into_vec();
    bg_sel.sort_unstable();

    let mut rois = Vec::with_capacity(n_fg + n_bg);
    let mut targets = Vec::with_capacity(n_fg + n_bg);
    for k in fg_sel {
        let (i, ref target) = fg[k];
        rois.push(candidates[i].clone());
        targets.push(target.clone());
    }
    for k in bg_sel {
        rois.push(candidates[bg[k]].clone());
        targets.push(RoiTarget::Background);
    }
    Ok((rois, targets))
}

/// Random perturbation of a ground-truth box: center shifted by up to
/// ±[`ROI_JITTER_SHIFT`] of each side length and each side rescaled within
/// 1 ± [`ROI_JITTER_SCALE`], clamped to the image. Most copies stay above
/// [`ROI_FG_IOU`] and carry non-zero encoded deltas; the rest become hard
/// negatives.
pub fn jitter_box(b: &BBox, image_w: f64, image_h: f64, rng: &mut impl Rng) -> BBox {
    let w = b.x2 - b.x1;
    let h = b.y2 - b.y1;
    let cx = 0.5 * (b.x1 + b.x2) + rng.gen_range(-ROI_JITTER_SHIFT..=ROI_JITTER_SHIFT) * w;
    let cy = 0.5 * (b.y1 + b.y2) + rng.gen_range(-ROI_JITTER_SHIFT..=ROI_JITTER_SHIFT) * h;
    let nw = w * rng.gen_range(1.0 - ROI_JITTER_SCALE..=1.0 + ROI_JITTER_SCALE);
    let nh = h * rng.gen_range(1.0 - ROI_JITTER_SCALE..=1.0 + ROI_JITTER_SCALE);
    BBox {
        x1: (cx - 0.5 * nw).max(0.0),
        y1: (cy - 0.5 * nh).max(0.0),
        x2: (cx + 0.5 * nw).min(image_w),
        y2: (cy + 0.5 * nh).min(image_h),
    }
}

/// Supervised detection losses for one image whose backbone features are
/// already on the tape: sampled-anchor RPN losses plus sampled-ROI head
/// losses with proposals (ground truth and jittered ground truth appended
/// as extra candidates).
struct DetLosses {
    rpn_cls: TensorId,
    rpn_reg: TensorId,
    roi_cls: TensorId,
    roi_reg: TensorId,
}

#[allow(clippy::too_many_arguments)]
fn detection_losses(
    t: &mut Tape,
    model: &DetectorModel,
    bind: &Binding,
    f: &FeatureMap,
    image_w: f64,
    image_h: f64,
    anns: &[Annotation],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<DetLosses> {
    let gt_boxes: Vec<BBox> = anns.iter().map(|a| a.bbox.clone()).collect();
    let rpn = model.rpn_forward(t, bind, f)?;
    let labels = assign_rpn_targets(&rpn.anchors, &gt_boxes, RPN_IOU_POS, RPN_IOU_NEG)?;
    let sample = sample_rpn_anchors(&labels, cfg.rpn_batch, rng);
    let (rpn_cls, rpn_reg) = rpn_loss(t, &rpn, &sample, &labels, &gt_boxes)?;

    let obj = t.value(rpn.obj_logits).clone();
    let deltas = t.value(rpn.deltas).clone();
    let proposals = propose(
        &rpn.anchors,
        &obj.view().into_dimensionality().unwrap(),
        &deltas.view().into_dimensionality().unwrap(),
        image_w,
        image_h,
        model.arch.rpn_pre_nms_k,
        model.arch.rpn_post_nms_k,
        model.arch.rpn_nms_iou,
    )?;
    let mut candidates: Vec<BBox> = proposals.into_iter().map(|p| p.bbox).collect();
    candidates.extend(gt_boxes.iter().cloned());
    for g in &gt_boxes {
        for _ in 0..ROI_GT_JITTER {
            candidates.push(jitter_box(g, image_w, image_h, rng));
        }
    }
    let (rois, targets) = sample_rois(&candidates, anns, cfg.roi_batch, cfg.roi_fg_fraction, rng)?;

    let (roi_cls, roi_reg) = if rois.is_empty() {
        (t.scalar_constant(0.0), t.scalar_constant(0.0))
    } else {
        let specs: Vec<RoiSpec> = rois
            .iter()
            .map(|b| RoiSpec {
                image_index: 0,
                rect: [b.x1, b.y1, b.x2, b.y2],
            })
            .collect();
        let pooled = t.roi_max_pool(f.tensor, &specs, f.stride, model.arch.pooled_size);
        let head = model.head_forward(t, bind, pooled)?;
        roi_head_loss(t, &head, &targets, model.arch.num_classes)?
    };
    Ok(DetLosses {
        rpn_cls,
        rpn_reg,
        roi_cls,
        roi_reg,
    })
}

/// Mean of scalar tape nodes; zero constant when the list is empty.
fn mean_terms(t: &mut Tape, terms: &[TensorId]) -> TensorId {
    if terms.is_empty() {
        t.scalar_constant(0.0)
    } else {
        let w = 1.0 / terms.len() as f64;
        t.weighted_sum(terms.iter().map(|&id| (id, w)).collect())
    }
}

struct TeacherHandles {
    model: DetectorModel,
    adapt: Option<ParamSet>,
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    cfg: &TrainConfig,
    student: &mut DetectorModel,
    heads: &mut Option<AdaptHeads>,
    opt_det: &mut SgdMomentum,
    opt_adapt: &mut Option<SgdMomentum>,
    teacher: &Option<TeacherHandles>,
    source_batch: &[&DatasetItem],
    target_batch: &[&DatasetItem],
    in_burn_in: bool,
    lambda: GrlCoefficient,
    teacher_detect_cfg: &DetectConfig,
    student_detect_cfg: &DetectConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let w = cfg.weights.clone();
    let mut t = Tape::new();
    let bind_det = t.bind(&student.params, true);
    // adaptation heads stay untouched (not even bound) during burn-in
    let bind_adapt = if in_burn_in {
        None
    } else {
        heads.as_ref().map(|h| t.bind(&h.params, true))
    };

    let mut rpn_cls_terms = Vec::new();
    let mut rpn_reg_terms = Vec::new();
    let mut roi_cls_terms = Vec::new();
    let mut roi_reg_terms = Vec::new();
    let mut adv_terms = Vec::new();
    let mut depth_terms = Vec::new();
    let mut rec_terms = Vec::new();
    let mut cons_terms = Vec::new();

    for item in source_batch {
        let s = &item.sample;
        let (iw, ih) = (s.image.width() as f64, s.image.height() as f64);
        let x = image_to_tensor(&mut t, &s.image);
        let f = student.backbone_forward(&mut t, &bind_det, x)?;
        let dl = detection_losses(&mut t, student, &bind_det, &f, iw, ih, &s.annotations, cfg, rng)?;
        rpn_cls_terms.push(dl.rpn_cls);
        rpn_reg_terms.push(dl.rpn_reg);
        roi_cls_terms.push(dl.roi_cls);
        roi_reg_terms.push(dl.roi_reg);

        if let (Some(h), Some(ba)) = (heads.as_ref(), bind_adapt.as_ref()) {
            if w.w_adv > 0.0 {
                let logits = h.discriminate_domain(&mut t, ba, &f, lambda)?;
                adv_terms.push(adversarial_domain_loss(&mut t, logits, &[s.domain])?);
            }
            if w.w_depth > 0.0 {
                if let Some(d) = &s.depth {
                    let est = h.estimate_depth(&mut t, ba, &f)?;
                    depth_terms.push(depth_loss(&mut t, est.pre_log, Some(d), f.stride)?);
                }
            }
        }
    }

    for item in target_batch {
        let s = &item.sample;
        let (iw, ih) = (s.image.width() as f64, s.image.height() as f64);
        let x = image_to_tensor(&mut t, &s.image);
        let f = student.backbone_forward(&mut t, &bind_det, x)?;

        if let (Some(h), Some(ba)) = (heads.as_ref(), bind_adapt.as_ref()) {
            if w.w_adv > 0.0 {
                let logits = h.discriminate_domain(&mut t, ba, &f, lambda)?;
                adv_terms.push(adversarial_domain_loss(&mut t, logits, &[s.domain])?);
            }
            if w.w_rec > 0.0 {
                let recon = h.reconstruct_image(&mut t, ba, &f, s.image.height(), s.image.width())?;
                rec_terms.push(reconstruction_loss(&mut t, recon, &s.image)?);
            }
        }

        if w.w_cons > 0.0 {
            if let (Some(th), Some(clear)) = (teacher.as_ref(), item.clear.as_ref()) {
                let clear_dets = th.model.detect(clear, teacher_detect_cfg)?;

                // teacher pseudo-labels supervise the foggy view directly
                let pseudo = generate_pseudo_labels(&clear_dets, cfg.pseudo.confidence_threshold);
                if !pseudo.is_empty() {
                    let dl =
                        detection_losses(&mut t, student, &bind_det, &f, iw, ih, &pseudo, cfg, rng)?;
                    rpn_cls_terms.push(dl.rpn_cls);
                    rpn_reg_terms.push(dl.rpn_reg);
                    roi_cls_terms.push(dl.roi_cls);
                    roi_reg_terms.push(dl.roi_reg);
                }

                // student's own foggy detections, traced for the consistency term
                let traced =
                    student.detect_from_features(&mut t, &bind_det, &f, iw, ih, student_detect_cfg)?;
                let matches =
                    consistency_pairs(&clear_dets, &traced.detections, CONSISTENCY_MATCH_IOU)?;
                let inputs = ConsistencyInputs {
                    clear: &clear_dets,
                    foggy: &traced.detections,
                    foggy_traced: &traced.traced,
                    matches: &matches,
                    confidence_threshold: cfg.pseudo.confidence_threshold,
                    image_w: iw,
                    image_h: ih,
                };
                cons_terms.push(consistency_loss(&mut t, &inputs)?);
            }
        }
    }

    let reg = if w.reg_strength > 0.0 {
        let mut bound: Vec<(&ParamSet, &Binding)> = vec![(&student.params, &bind_det)];
        if let (Some(h), Some(ba)) = (heads.as_ref(), bind_adapt.as_ref()) {
            bound.push((&h.params, ba));
        }
        regulating_term(&mut t, &bound)
    } else {
        t.scalar_constant(0.0)
    };

    let parts = TapeLossParts {
        rpn_cls: mean_terms(&mut t, &rpn_cls_terms),
        rpn_reg: mean_terms(&mut t, &rpn_reg_terms),
        roi_cls: mean_terms(&mut t, &roi_cls_terms),
        roi_reg: mean_terms(&mut t, &roi_reg_terms),
        adv: mean_terms(&mut t, &adv_terms),
        depth: mean_terms(&mut t, &depth_terms),
        rec: mean_terms(&mut t, &rec_terms),
        cons: mean_terms(&mut t, &cons_terms),
        reg,
    };
    let (total, breakdown) = composite_loss_tape(&mut t, &parts, &w)?;

    let mut grads = t.backward(total);
    let det_grads: Vec<ArrayD<f64>> = student
        .params
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| grads.take_or_zeros(bind_det.ids[i], e.value.shape()))
        .collect();
    let mut adapt_grads: Vec<ArrayD<f64>> = match (heads.as_ref(), bind_adapt.as_ref()) {
        (Some(h), Some(ba)) => h
            .params
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| grads.take_or_zeros(ba.ids[i], e.value.shape()))
            .collect(),
        _ => Vec::new(),
    };

    // one global clip across detector and head gradients together
    let n_det = det_grads.len();
    let mut all = det_grads;
    all.append(&mut adapt_grads);
    clip_global_norm(&mut all, cfg.grad_clip);
    let adapt_grads = all.split_off(n_det);
    let det_grads = all;

    opt_det.step(&mut student.params, &det_grads);
    if !adapt_grads.is_empty() {
        if let (Some(h), Some(oa)) = (heads.as_mut(), opt_adapt.as_mut()) {
            oa.step(&mut h.params, &adapt_grads);
        }
    }
    Ok(breakdown)
}

#[allow(clippy::too_many_arguments)]
fn snapshot(
    cfg: &TrainConfig,
    epoch: usize,
    history: &[EpochStats],
    student: &DetectorModel,
    heads: &Option<AdaptHeads>,
    teacher: &Option<TeacherHandles>,
    opt_det: &SgdMomentum,
    opt_adapt: &Option<SgdMomentum>,
) -> Checkpoint {
    let teacher_state = match teacher {
        Some(th) => TeacherState {
            detector: th.model.params.clone(),
            adapt: th.adapt.clone(),
        },
        None => TeacherState::from_student(&student.params, heads.as_ref().map(|h| &h.params)),
    };
    Checkpoint {
        config: cfg.clone(),
        epoch,
        history: history.to_vec(),
        student_detector: student.params.clone(),
        student_adapt: heads.as_ref().map(|h| h.params.clone()),
        teacher: teacher_state,
        velocity_detector: opt_det.velocity().to_vec(),
        velocity_adapt: opt_adapt.as_ref().map(|o| o.velocity().to_vec()),
    }
}

/// Train the detector (and, in phase 2, the adaptation heads) on annotated
/// `source` items and unlabeled `target` items.
///
/// Adaptation runs only when it can do something: it requires
/// `adaptation_enabled`, at least one positive auxiliary weight, and a
/// non-empty target set. Otherwise every epoch is a burn-in epoch, which
/// makes "auxiliary weights all zero" and "adaptation disabled" literally
/// the same code path (and hence bit-identical trajectories).
///
/// With `out_dir` set, a checkpoint is written after every epoch
/// (`checkpoint_epoch_NNN.ckpt`, plus `checkpoint_final.ckpt` at the end)
/// and every step appends one record to `metrics.jsonl`.
pub fn train(
    cfg: &TrainConfig,
    source: &[DatasetItem],
    target: &[DatasetItem],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::invalid("source training set is empty"));
    }
    if source.iter().all(|d| d.sample.annotations.is_empty()) {
        return Err(Error::invalid("source training set has no annotations"));
    }
    for item in source.iter().chain(target.iter()) {
        let report = validate_sample(&item.sample, cfg.num_classes);
        if !report.is_ok() {
            return Err(Error::Validation {
                id: item.sample.id.clone(),
                violations: report.violations,
            });
        }
    }

    let arch = cfg.effective_arch();
    let mut init_rng = stream_rng(cfg.seed, "init/detector");
    let mut student = DetectorModel::new(arch.clone(), &mut init_rng)?;

    let w = &cfg.weights;
    let aux_on = w.w_adv > 0.0 || w.w_depth > 0.0 || w.w_rec > 0.0 || w.w_cons > 0.0;
    let adapt_active = cfg.adaptation_enabled && aux_on && !target.is_empty();

    let mut heads: Option<AdaptHeads> = if adapt_active {
        let mut arng = stream_rng(cfg.seed, "init/adapt");
        Some(AdaptHeads::new(cfg.adapt.clone(), arch.stage_channels[3], &mut arng)?)
    } else {
        None
    };

    let mut opt_det = SgdMomentum::new(&student.params, cfg.learning_rate, cfg.momentum);
    let mut opt_adapt = heads
        .as_ref()
        .map(|h| SgdMomentum::new(&h.params, cfg.learning_rate, cfg.momentum));
    let mut train_rng = stream_rng(cfg.seed, "train/sampling");

    let burn_in = if adapt_active { cfg.burn_in_epochs() } else { cfg.epochs };
    let n_src = source.len();
    let n_src_b = cfg.batch_size.div_ceil(2);
    let n_tgt_b = cfg.batch_size - n_src_b;
    let steps_p1 = n_src.div_ceil(cfg.batch_size);
    let steps_p2 = n_src.div_ceil(n_src_b);
    let total_adapt_steps = (cfg.epochs - burn_in) * steps_p2;

    let teacher_detect_cfg = DetectConfig {
        score_threshold: cfg.pseudo.confidence_threshold,
        ..cfg.detect.clone()
    };
    let student_detect_cfg = DetectConfig {
        score_threshold: cfg.consistency_student_threshold,
        ..cfg.detect.clone()
    };

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join(METRICS_FILE))?,
            )
        }
        None => None,
    };

    let mut teacher: Option<TeacherHandles> = None;
    let mut history: Vec<EpochStats> = Vec::new();
    let mut steps_log: Vec<StepRecord> = Vec::new();
    let mut adapt_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let in_burn_in = epoch <= burn_in;
        let phase = if in_burn_in { "burn_in" } else { "adaptation" };

        let mut src_order: Vec<usize> = (0..n_src).collect();
        src_order.shuffle(&mut stream_rng(cfg.seed, &format!("epoch/{epoch}/source")));
        let tgt_order: Vec<usize> = if in_burn_in {
            Vec::new()
        } else {
            let mut o: Vec<usize> = (0..target.len()).collect();
            o.shuffle(&mut stream_rng(cfg.seed, &format!("epoch/{epoch}/target")));
            o
        };

        // phase-2 entry: the teacher starts as a copy of the student
        if !in_burn_in && teacher.is_none() {
            teacher = Some(TeacherHandles {
                model: DetectorModel::from_params(arch.clone(), student.params.clone())?,
                adapt: heads.as_ref().map(|h| h.params.clone()),
            });
        }

        let (steps, src_chunk) = if in_burn_in {
            (steps_p1, cfg.batch_size)
        } else {
            (steps_p2, n_src_b)
        };

        let mut sum_total = 0.0;
        let mut sum_det = 0.0;
        for step in 1..=steps {
            let lo = (step - 1) * src_chunk;
            let hi = (lo + src_chunk).min(n_src);
            let source_batch: Vec<&DatasetItem> =
                src_order[lo..hi].iter().map(|&i| &source[i]).collect();
            let target_batch: Vec<&DatasetItem> = if in_burn_in || tgt_order.is_empty() {
                Vec::new()
            } else {
                (0..n_tgt_b)
                    .map(|k| &target[tgt_order[((step - 1) * n_tgt_b + k) % tgt_order.len()]])
                    .collect()
            };

            let lambda = if in_burn_in {
                GrlCoefficient { lambda: 0.0 }
            } else {
                let l = GrlCoefficient::warmup(adapt_step, total_adapt_steps, cfg.grl_max_lambda);
                adapt_step += 1;
                l
            };

            let breakdown = run_step(
                cfg,
                &mut student,
                &mut heads,
                &mut opt_det,
                &mut opt_adapt,
                &teacher,
                &source_batch,
                &target_batch,
                in_burn_in,
                lambda,
                &teacher_detect_cfg,
                &student_detect_cfg,
                &mut train_rng,
            )?;

            // EMA teacher update after every adaptation step
            if !in_burn_in {
                if let Some(th) = teacher.as_mut() {
                    ema_update_set(&mut th.model.params, &student.params, cfg.pseudo.ema_momentum)?;
                    if let (Some(ta), Some(h)) = (th.adapt.as_mut(), heads.as_ref()) {
                        ema_update_set(ta, &h.params, cfg.pseudo.ema_momentum)?;
                    }
                }
            }

            sum_total += breakdown.total;
            sum_det +=
                breakdown.rpn_cls + breakdown.rpn_reg + breakdown.roi_cls + breakdown.roi_reg;
            let record = StepRecord {
                epoch,
                step,
                phase: phase.to_string(),
                loss: breakdown,
            };
            if let Some(f) = metrics_file.as_mut() {
                let line = serde_json::to_string(&StepLine {
                    kind: "train_step",
                    record: &record,
                })
                .expect("step record serializes");
                writeln!(f, "{line}")?;
            }
            steps_log.push(record);
        }

        history.push(EpochStats {
            epoch,
            phase: phase.to_string(),
            steps,
            mean_total: sum_total / steps as f64,
            mean_detection: sum_det / steps as f64,
        });

        if let Some(dir) = out_dir {
            let ckpt = snapshot(
                cfg, epoch, &history, &student, &heads, &teacher, &opt_det, &opt_adapt,
            );
            save_checkpoint(&dir.join(format!("checkpoint_epoch_{epoch:03}.ckpt")), &ckpt)?;
        }
    }

    let final_ckpt = snapshot(
        cfg,
        cfg.epochs,
        &history,
        &student,
        &heads,
        &teacher,
        &opt_det,
        &opt_adapt,
    );
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint_final.ckpt"), &final_ckpt)?;
    }
    Ok(TrainOutcome {
        checkpoint: final_ckpt,
        history,
        steps: steps_log,
    })
}

/// Build the `DatasetItem` list for a plain in-memory sample list (no clear
/// twins).
pub fn items_from_samples(samples: &[Sample]) -> Vec<DatasetItem> {
    samples
        .iter()
        .map(|s| DatasetItem {
            sample: s.clone(),
            clear: None,
        })
        .collect()
}
