//! Every loss component and their composition into the regularized total
//! objective.
//!
//! Each loss has a tape form producing a differentiable scalar node; the
//! weighted composition exists both on the tape (for training) and as plain
//! arithmetic (for logging and tests), computed in the identical term order
//! so both agree bit for bit.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::mean_pool_depth;
use crate::core::{DepthMap, Detection, DomainTag, ImagePlane};
use crate::detector::{encode_deltas, BoxDelta, HeadOutput, RpnLabel, RpnOutput, TracedDet};
use crate::error::{Error, Result};
use crate::nn::tape::smooth_l1_scalar;
use crate::nn::{ParamKind, ParamSet, Tape, TensorId};
use crate::nn::tape::Binding;
use crate::pseudo::MatchedPairs;

/// Default number of anchors sampled per image for the RPN loss.
pub const RPN_BATCH_SIZE: usize = 256;

/// Coefficients of the composite objective. The detection terms carry the
/// fixed weight `w_det` = 1.0; the auxiliary terms and the regulating term
/// are configurable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    /// Weight of the four detection terms. Fixed at 1.0.
    pub w_det: f64,
    pub w_adv: f64,
    pub w_depth: f64,
    pub w_rec: f64,
    pub w_cons: f64,
    /// Coefficient of the regulating term (L2 penalty on weights).
    pub reg_strength: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_det: 1.0,
            w_adv: 0.1,
            w_depth: 0.1,
            w_rec: 0.1,
            w_cons: 0.5,
            reg_strength: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_det != 1.0 {
            return Err(Error::invalid(format!(
                "w_det is fixed at 1.0, got {}",
                self.w_det
            )));
        }
        for (name, w) in [
            ("w_adv", self.w_adv),
            ("w_depth", self.w_depth),
            ("w_rec", self.w_rec),
            ("w_cons", self.w_cons),
            ("reg_strength", self.reg_strength),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Per-component weights in breakdown order.
    fn term_weights(&self) -> [f64; 9] {
        [
            self.w_det,
            self.w_det,
            self.w_det,
            self.w_det,
            self.w_adv,
            self.w_depth,
            self.w_rec,
            self.w_cons,
            self.reg_strength,
        ]
    }
}

/// Unweighted values of the nine loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub adv: f64,
    pub depth: f64,
    pub rec: f64,
    pub cons: f64,
    pub reg: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("rpn_cls", self.rpn_cls),
            ("rpn_reg", self.rpn_reg),
            ("roi_cls", self.roi_cls),
            ("roi_reg", self.roi_reg),
            ("adv", self.adv),
            ("depth", self.depth),
            ("rec", self.rec),
            ("cons", self.cons),
            ("reg", self.reg),
        ]
    }
}

/// The component values plus the weighted total, logged once per step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub adv: f64,
    pub depth: f64,
    pub rec: f64,
    pub cons: f64,
    pub reg: f64,
    pub total: f64,
}

/// Tape nodes for the nine loss components.
#[derive(Debug, Clone, Copy)]
pub struct TapeLossParts {
    pub rpn_cls: TensorId,
    pub rpn_reg: TensorId,
    pub roi_cls: TensorId,
    pub roi_reg: TensorId,
    pub adv: TensorId,
    pub depth: TensorId,
    pub rec: TensorId,
    pub cons: TensorId,
    pub reg: TensorId,
}

impl TapeLossParts {
    fn ordered(&self) -> [TensorId; 9] {
        [
            self.rpn_cls, self.rpn_reg, self.roi_cls, self.roi_reg, self.adv, self.depth,
            self.rec, self.cons, self.reg,
        ]
    }
}

/// Mean smooth-L1 between two same-shape arrays: per element,
/// 0.5 x^2 for |x| < 1 and |x| - 0.5 otherwise, with x = pred - target.
pub fn smooth_l1(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "smooth_l1 shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| smooth_l1_scalar(p - t))
        .sum::<f64>()
        / n)
}

/// Anchor indices chosen for one image's RPN loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpnSample {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Sample up to `batch_size` anchors: positives capped at half the batch
/// (at most a 1:1 ratio), the remainder padded with negatives. Ignored
/// anchors are never selected. Chosen indices are sorted ascending.
pub fn sample_rpn_anchors(
    labels: &[RpnLabel],
    batch_size: usize,
    rng: &mut impl Rng,
) -> RpnSample {
    let pos: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, RpnLabel::Positive { .. }))
        .map(|(i, _)| i)
        .collect();
    let neg: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, RpnLabel::Negative))
        .map(|(i, _)| i)
        .collect();
    let n_pos = pos.len().min(batch_size / 2);
    let n_neg = neg.len().min(batch_size - n_pos);
    let mut positives: Vec<usize> = rand::seq::index::sample(rng, pos.len(), n_pos)
        .iter()
        .map(|k| pos[k])
        .collect();
    let mut negatives: Vec<usize> = rand::seq::index::sample(rng, neg.len(), n_neg)
        .iter()
        .map(|k| neg[k])
        .collect();
    positives.sort_unstable();
    negatives.sort_unstable();
    RpnSample { positives, negatives }
}

/// RPN objectness and box-regression losses over a sampled anchor batch.
///
/// Classification is binary cross-entropy over the sampled positives and
/// negatives; regression is mean smooth-L1 over the positives' encoded
/// offsets to their assigned ground-truth boxes. No positives means the
/// regression term is zero.
pub fn rpn_loss(
    tape: &mut Tape,
    rpn: &RpnOutput,
    sample: &RpnSample,
    labels: &[RpnLabel],
    gt_boxes: &[crate::core::BBox],
) -> Result<(TensorId, TensorId)> {
    let n_anchors = rpn.anchors.len();
    if labels.len() != n_anchors {
        return Err(Error::invalid(format!(
            "rpn_loss: {} labels for {} anchors",
            labels.len(),
            n_anchors
        )));
    }
    for &i in sample.positives.iter().chain(sample.negatives.iter()) {
        if i >= n_anchors {
            return Err(Error::invalid(format!(
                "rpn_loss: sampled anchor index {i} out of range ({n_anchors} anchors)"
            )));
        }
    }

    let n_pos = sample.positives.len();
    let n_cls = n_pos + sample.negatives.len();
    let cls = if n_cls == 0 {
        tape.scalar_constant(0.0)
    } else {
        let idx: Vec<usize> = sample
            .positives
            .iter()
            .chain(sample.negatives.iter())
            .copied()
            .collect();
        let picked = tape.gather_rows(rpn.obj_logits, idx);
        let mut targets = ArrayD::zeros(IxDyn(&[n_cls, 1]));
        for r in 0..n_pos {
            targets[[r, 0]] = 1.0;
        }
        tape.bce_with_logits(picked, targets)
    };

    let reg = if n_pos == 0 {
        tape.scalar_constant(0.0)
    } else {
        let mut target = Array2::<f64>::zeros((n_pos, 4));
        for (r, &i) in sample.positives.iter().enumerate() {
            let gt_index = match labels[i] {
                RpnLabel::Positive { gt_index } => gt_index,
                _ => {
                    return Err(Error::invalid(format!(
                        "rpn_loss: sampled positive {i} is not labeled positive"
                    )))
                }
            };
            let gt = gt_boxes.get(gt_index).ok_or_else(|| {
                Error::invalid(format!("rpn_loss: gt index {gt_index} out of range"))
            })?;
            let d = encode_deltas(&rpn.anchors[i].bbox, gt);
            target[[r, 0]] = d.tx;
            target[[r, 1]] = d.ty;
            target[[r, 2]] = d.tw;
            target[[r, 3]] = d.th;
        }
        let picked = tape.gather_rows(rpn.deltas, sample.positives.clone());
        tape.smooth_l1_mean(picked, target.into_dyn())
    };
    Ok((cls, reg))
}

/// Per-ROI supervision for the second stage.
#[derive(Debug, Clone, PartialEq)]
pub enum RoiTarget {
    Background,
    Foreground { class: usize, delta: BoxDelta },
}

/// Second-stage classification and refinement losses.
///
/// Classification is cross-entropy over `num_classes + 1` (background
/// last); regression is mean smooth-L1 on the matched class's refinement
/// row, foreground ROIs only. An all-background batch yields zero
/// regression.
pub fn roi_head_loss(
    tape: &mut Tape,
    head: &HeadOutput,
    targets: &[RoiTarget],
    num_classes: usize,
) -> Result<(TensorId, TensorId)> {
    let shape = tape.value(head.cls_logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != num_classes + 1 {
        return Err(Error::invalid(format!(
            "roi_head_loss: logits shape {shape:?} does not match {} classes",
            num_classes + 1
        )));
    }
    let rows = shape[0];
    if targets.len() != rows {
        return Err(Error::invalid(format!(
            "roi_head_loss: {} targets for {rows} ROIs",
            targets.len()
        )));
    }

    let mut labels = Vec::with_capacity(rows);
    let mut fg: Vec<(usize, usize, BoxDelta)> = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        match t {
            RoiTarget::Background => labels.push(num_classes),
            RoiTarget::Foreground { class, delta } => {
                if *class >= num_classes {
                    return Err(Error::invalid(format!(
                        "roi_head_loss: foreground class {class} out of range"
                    )));
                }
                labels.push(*class);
                fg.push((i, *class, *delta));
            }
        }
    }
    let cls = tape.softmax_ce(head.cls_logits, labels);

    let reg = if fg.is_empty() {
        tape.scalar_constant(0.0)
    } else {
        // (R, 4K) seen as (R*K, 4): ROI i's class-c row lands at i*K + c.
        let per_class = tape.reshape(head.box_deltas, &[rows * num_classes, 4]);
        let idx: Vec<usize> = fg.iter().map(|(i, c, _)| i * num_classes + c).collect();
        let picked = tape.gather_rows(per_class, idx);
        let mut target = Array2::<f64>::zeros((fg.len(), 4));
        for (r, (_, _, d)) in fg.iter().enumerate() {
            target[[r, 0]] = d.tx;
            target[[r, 1]] = d.ty;
            target[[r, 2]] = d.tw;
            target[[r, 3]] = d.th;
        }
        tape.smooth_l1_mean(picked, target.into_dyn())
    };
    Ok((cls, reg))
}

/// Binary cross-entropy on per-image domain logits, target 1 for the
/// target (foggy) domain. The gradient reversal sits in the discriminator's
/// forward pass, so the backbone ascends this loss while the discriminator
/// descends it.
pub fn adversarial_domain_loss(
    tape: &mut Tape,
    logits: TensorId,
    tags: &[DomainTag],
) -> Result<TensorId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != 1 || shape[0] != tags.len() {
        return Err(Error::invalid(format!(
            "adversarial_domain_loss: logits shape {shape:?} for {} tags",
            tags.len()
        )));
    }
    let mut targets = ArrayD::zeros(IxDyn(&[tags.len(), 1]));
    for (i, t) in tags.iter().enumerate() {
        targets[[i, 0]] = match t {
            DomainTag::Target => 1.0,
            DomainTag::Source => 0.0,
        };
    }
    Ok(tape.bce_with_logits(logits, targets))
}

/// Mean absolute error in log-depth space against the mean-pooled ground
/// truth. `pre_log` is the depth head's pre-exponential output, i.e. the
/// log of the predicted depth, so the loss is mean |ln p - ln d|. A sample
/// without depth ground truth contributes zero.
pub fn depth_loss(
    tape: &mut Tape,
    pre_log: TensorId,
    gt: Option<&DepthMap>,
    stride: usize,
) -> Result<TensorId> {
    let Some(gt) = gt else {
        return Ok(tape.scalar_constant(0.0));
    };
    let shape = tape.value(pre_log).shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
        return Err(Error::invalid(format!(
            "depth_loss: expected (1,1,hf,wf) prediction, got {shape:?}"
        )));
    }
    let pooled = mean_pool_depth(gt, shape[2], shape[3], stride)?;
    let target = pooled
        .mapv(f64::ln)
        .insert_axis(Axis(0))
        .insert_axis(Axis(0))
        .into_dyn();
    Ok(tape.l1_mean(pre_log, target))
}

/// Mean absolute error between the reconstruction and the original image.
pub fn reconstruction_loss(
    tape: &mut Tape,
    reconstructed: TensorId,
    original: &ImagePlane,
) -> Result<TensorId> {
    let want = [1, 3, original.height(), original.width()];
    let shape = tape.value(reconstructed).shape().to_vec();
    if shape != want {
        return Err(Error::invalid(format!(
            "reconstruction_loss: shape {shape:?} does not match image {want:?}"
        )));
    }
    let target = original.pixels().clone().insert_axis(Axis(0)).into_dyn();
    Ok(tape.l1_mean(reconstructed, target))
}

/// Inputs to [`consistency_loss`]: the clear-view detections (from the
/// teacher, plain values) and the foggy-view detections (from the student,
/// with tape handles), matched by [`crate::pseudo::consistency_pairs`].
pub struct ConsistencyInputs<'a> {
    pub clear: &'a [Detection],
    pub foggy: &'a [Detection],
    /// Tape handles parallel to `foggy`.
    pub foggy_traced: &'a [TracedDet],
    pub matches: &'a MatchedPairs,
    /// Unmatched clear detections at or above this score incur the penalty.
    pub confidence_threshold: f64,
    pub image_w: f64,
    pub image_h: f64,
}

/// Consistency between the two views of one scene: per matched pair, mean
/// smooth-L1 between size-normalized boxes plus cross-entropy from the
/// foggy-view class distribution to the clear-view predicted class; per
/// unmatched clear detection at or above the confidence threshold, a fixed
/// penalty of 1.0. The sum is divided by the number of contributing items;
/// no pairs and no confident unmatched detections yield zero.
pub fn consistency_loss(tape: &mut Tape, inp: &ConsistencyInputs) -> Result<TensorId> {
    if inp.foggy_traced.len() != inp.foggy.len() {
        return Err(Error::invalid(
            "consistency_loss: traced handles do not match foggy detections",
        ));
    }
    if inp.image_w <= 0.0 || inp.image_h <= 0.0 {
        return Err(Error::invalid("consistency_loss: image size must be positive"));
    }
    let confident_unmatched = inp
        .matches
        .unmatched_clear
        .iter()
        .filter(|&&i| {
            inp.clear
                .get(i)
                .map(|d| d.score >= inp.confidence_threshold)
                .unwrap_or(false)
        })
        .count();
    let n = inp.matches.pairs.len() + confident_unmatched;
    if n == 0 {
        return Ok(tape.scalar_constant(0.0));
    }
    let inv_n = 1.0 / n as f64;

    let mut terms: Vec<(TensorId, f64)> = Vec::new();
    for &(ci, fj) in &inp.matches.pairs {
        let clear = inp
            .clear
            .get(ci)
            .ok_or_else(|| Error::invalid("consistency_loss: pair index out of range"))?;
        let traced = inp
            .foggy_traced
            .get(fj)
            .ok_or_else(|| Error::invalid("consistency_loss: pair index out of range"))?;
        let b = &clear.bbox;
        let target = ndarray::arr2(&[[
            b.x1 / inp.image_w,
            b.y1 / inp.image_h,
            b.x2 / inp.image_w,
            b.y2 / inp.image_h,
        ]])
        .into_dyn();
        let box_term = tape.smooth_l1_mean(traced.box_norm, target);
        let n_logits = tape.value(traced.logits_row).shape()[1];
        if clear.category_id >= n_logits {
            return Err(Error::invalid(format!(
                "consistency_loss: class {} out of range for {n_logits} logits",
                clear.category_id
            )));
        }
        let cls_term = tape.softmax_ce(traced.logits_row, vec![clear.category_id]);
        terms.push((box_term, inv_n));
        terms.push((cls_term, inv_n));
    }
    let penalty = tape.scalar_constant(confident_unmatched as f64 * inv_n);
    terms.push((penalty, 1.0));
    Ok(tape.weighted_sum(terms))
}

/// Half the squared L2 norm of every `Weight`-kind parameter across the
/// given bound sets; biases contribute nothing.
pub fn regulating_term(tape: &mut Tape, bound: &[(&ParamSet, &Binding)]) -> TensorId {
    let mut terms: Vec<(TensorId, f64)> = Vec::new();
    for (set, binding) in bound {
        for (pid, entry) in set.entries().iter().enumerate() {
            if entry.kind == ParamKind::Weight {
                let t = tape.sq_norm_half(binding.ids[pid]);
                terms.push((t, 1.0));
            }
        }
    }
    if terms.is_empty() {
        tape.scalar_constant(0.0)
    } else {
        tape.weighted_sum(terms)
    }
}

/// Weighted composition of the nine components into the training total:
/// detection terms at weight 1, auxiliary terms at their configured
/// weights, plus the regulating term. Terms are accumulated in breakdown
/// order.
pub fn composite_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite loss component {name}: {v}"
            )));
        }
        if v < 0.0 {
            return Err(Error::invalid(format!("negative loss component {name}: {v}")));
        }
    }
    let w = weights.term_weights();
    let mut total = 0.0;
    for (k, (_, v)) in parts.named().iter().enumerate() {
        total += w[k] * v;
    }
    Ok(LossBreakdown {
        rpn_cls: parts.rpn_cls,
        rpn_reg: parts.rpn_reg,
        roi_cls: parts.roi_cls,
        roi_reg: parts.roi_reg,
        adv: parts.adv,
        depth: parts.depth,
        rec: parts.rec,
        cons: parts.cons,
        reg: parts.reg,
        total,
    })
}

/// Tape form of [`composite_loss`]: the returned node carries the same
/// total (identical accumulation order) and backpropagates into every
/// component.
pub fn composite_loss_tape(
    tape: &mut Tape,
    parts: &TapeLossParts,
    weights: &LossWeights,
) -> Result<(TensorId, LossBreakdown)> {
    let ids = parts.ordered();
    let mut vals = [0.0; 9];
    for (k, id) in ids.iter().enumerate() {
        let v = tape.value(*id);
        if v.len() != 1 {
            return Err(Error::invalid("composite_loss: components must be scalars"));
        }
        vals[k] = v[IxDyn(&[])];
    }
    let parts_v = LossParts {
        rpn_cls: vals[0],
        rpn_reg: vals[1],
        roi_cls: vals[2],
        roi_reg: vals[3],
        adv: vals[4],
        depth: vals[5],
        rec: vals[6],
        cons: vals[7],
        reg: vals[8],
    };
    let breakdown = composite_loss(&parts_v, weights)?;
    let w = weights.term_weights();
    let total = tape.weighted_sum(ids.iter().copied().zip(w).collect());
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::BBox;
    use crate::detector::{generate_anchors, RpnLabel};
    use crate::nn::ParamSet;
    use ndarray::{arr2, ArrayD};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, t: TensorId) -> f64 {
        tape.value(t)[IxDyn(&[])]
    }

    #[test]
    fn smooth_l1_reference_points() {
        let p = |v: f64| ArrayD::from_elem(IxDyn(&[1]), v);
        assert_eq!(smooth_l1(&p(3.0), &p(3.0)).unwrap(), 0.0);
        assert_eq!(smooth_l1(&p(0.5), &p(0.0)).unwrap(), 0.125);
        assert_eq!(smooth_l1(&p(2.0), &p(0.0)).unwrap(), 1.5);
        assert!(smooth_l1(&p(0.0), &ArrayD::zeros(IxDyn(&[2]))).is_err());
    }

    #[test]
    fn smooth_l1_c1_at_kink() {
        // value agrees from both branches at |x| = 1 ...
        assert_eq!(smooth_l1_scalar(1.0), 0.5);
        assert!((0.5 * 1.0f64 * 1.0 - (1.0f64 - 0.5)).abs() == 0.0);
        // ... and so do the one-sided derivatives.
        let h = 1e-7;
        let left = (smooth_l1_scalar(1.0) - smooth_l1_scalar(1.0 - h)) / h;
        let right = (smooth_l1_scalar(1.0 + h) - smooth_l1_scalar(1.0)) / h;
        assert!((left - 1.0).abs() < 1e-6, "left derivative {left}");
        assert!((right - 1.0).abs() < 1e-6, "right derivative {right}");
    }

    fn label_set(pos: usize, neg: usize, ignore: usize) -> Vec<RpnLabel> {
        let mut labels = Vec::new();
        for _ in 0..pos {
            labels.push(RpnLabel::Positive { gt_index: 0 });
        }
        for _ in 0..neg {
            labels.push(RpnLabel::Negative);
        }
        for _ in 0..ignore {
            labels.push(RpnLabel::Ignore);
        }
        labels
    }

    #[test]
    fn rpn_sampling_caps_and_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // plenty of both: 1:1 at half the batch each
        let s = sample_rpn_anchors(&label_set(300, 300, 50), 256, &mut rng);
        assert_eq!(s.positives.len(), 128);
        assert_eq!(s.negatives.len(), 128);
        // few positives: pad with negatives to the full batch
        let s = sample_rpn_anchors(&label_set(10, 500, 0), 256, &mut rng);
        assert_eq!(s.positives.len(), 10);
        assert_eq!(s.negatives.len(), 246);
        // ignored anchors are never sampled
        let s = sample_rpn_anchors(&label_set(0, 0, 40), 256, &mut rng);
        assert!(s.positives.is_empty() && s.negatives.is_empty());
        // scarce anchors: take what exists
        let s = sample_rpn_anchors(&label_set(2, 3, 0), 256, &mut rng);
        assert_eq!((s.positives.len(), s.negatives.len()), (2, 3));
        // deterministic under the same seed
        let a = sample_rpn_anchors(&label_set(50, 50, 0), 32, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_rpn_anchors(&label_set(50, 50, 0), 32, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    /// Two-anchor RPN output with chosen logits/deltas as leaves.
    fn tiny_rpn(tape: &mut Tape, obj: [f64; 2], deltas: [[f64; 4]; 2]) -> RpnOutput {
        let anchors = generate_anchors(1, 2, 16, &[16.0], &[1.0]).unwrap();
        assert_eq!(anchors.len(), 2);
        let obj_logits = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 1]), obj.to_vec()).unwrap(),
            true,
        );
        let d = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 4]), deltas.concat()).unwrap(),
            true,
        );
        RpnOutput {
            obj_logits,
            deltas: d,
            anchors,
        }
    }

    #[test]
    fn rpn_perfect_objectness_and_matching_delta() {
        let mut tape = Tape::new();
        let labels = vec![RpnLabel::Positive { gt_index: 0 }, RpnLabel::Negative];
        let gt = vec![BBox::new(0.0, 0.0, 18.0, 18.0).unwrap()];
        let anchors = generate_anchors(1, 2, 16, &[16.0], &[1.0]).unwrap();
        let want = encode_deltas(&anchors[0].bbox, &gt[0]);
        let rpn = tiny_rpn(
            &mut tape,
            [40.0, -40.0],
            [[want.tx, want.ty, want.tw, want.th], [9.0, 9.0, 9.0, 9.0]],
        );
        let sample = RpnSample {
            positives: vec![0],
            negatives: vec![1],
        };
        let (cls, reg) = rpn_loss(&mut tape, &rpn, &sample, &labels, &gt).unwrap();
        assert!(scalar(&tape, cls) < 1e-12, "cls {}", scalar(&tape, cls));
        assert_eq!(scalar(&tape, reg), 0.0);
    }

    #[test]
    fn rpn_no_positives_zero_reg() {
        let mut tape = Tape::new();
        let labels = vec![RpnLabel::Negative, RpnLabel::Negative];
        let rpn = tiny_rpn(&mut tape, [0.0, 0.0], [[0.0; 4], [0.0; 4]]);
        let sample = RpnSample {
            positives: vec![],
            negatives: vec![0, 1],
        };
        let (cls, reg) = rpn_loss(&mut tape, &rpn, &sample, &labels, &[]).unwrap();
        // logit 0 against target 0 is ln 2
        assert!((scalar(&tape, cls) - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(scalar(&tape, reg), 0.0);
    }

    fn head_from(tape: &mut Tape, logits: Array2<f64>, deltas: Array2<f64>) -> HeadOutput {
        HeadOutput {
            cls_logits: tape.leaf(logits.into_dyn(), true),
            box_deltas: tape.leaf(deltas.into_dyn(), true),
        }
    }

    #[test]
    fn roi_uniform_scores_give_ln_k_plus_one() {
        let mut tape = Tape::new();
        // 7 columns = 6 classes + background, uniform logits
        let head = head_from(&mut tape, Array2::zeros((1, 7)), Array2::zeros((1, 24)));
        let (cls, reg) = roi_head_loss(&mut tape, &head, &[RoiTarget::Background], 6).unwrap();
        assert!((scalar(&tape, cls) - 7.0f64.ln()).abs() < 1e-12);
        assert_eq!(scalar(&tape, reg), 0.0, "background contributes no reg");
    }

    #[test]
    fn roi_confident_correct_class_near_zero_cls() {
        let mut tape = Tape::new();
        let mut logits = Array2::zeros((1, 7));
        logits[[0, 2]] = 60.0;
        let head = head_from(&mut tape, logits, Array2::zeros((1, 24)));
        let t = RoiTarget::Foreground {
            class: 2,
            delta: BoxDelta {
                tx: 0.0,
                ty: 0.0,
                tw: 0.0,
                th: 0.0,
            },
        };
        let (cls, reg) = roi_head_loss(&mut tape, &head, &[t], 6).unwrap();
        assert!(scalar(&tape, cls) < 1e-12);
        assert_eq!(scalar(&tape, reg), 0.0);
    }

    #[test]
    fn roi_reg_reads_matched_class_columns_only() {
        let mut tape = Tape::new();
        // 2 ROIs, 2 classes: 8 delta columns per ROI. Only ROI 0 / class 1's
        // block (cols 4..8) matches the target; everything else is garbage.
        let mut deltas = Array2::from_elem((2, 8), 9.9);
        let want = BoxDelta {
            tx: 0.25,
            ty: -0.5,
            tw: 0.1,
            th: -0.1,
        };
        deltas[[0, 4]] = want.tx;
        deltas[[0, 5]] = want.ty;
        deltas[[0, 6]] = want.tw;
        deltas[[0, 7]] = want.th;
        let head = head_from(&mut tape, Array2::zeros((2, 3)), deltas);
        let targets = vec![
            RoiTarget::Foreground {
                class: 1,
                delta: want,
            },
            RoiTarget::Background,
        ];
        let (_, reg) = roi_head_loss(&mut tape, &head, &targets, 2).unwrap();
        assert_eq!(scalar(&tape, reg), 0.0);
    }

    #[test]
    fn roi_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let head = head_from(&mut tape, Array2::zeros((1, 7)), Array2::zeros((1, 24)));
        assert!(roi_head_loss(&mut tape, &head, &[], 6).is_err());
        assert!(roi_head_loss(&mut tape, &head, &[RoiTarget::Background], 5).is_err());
        let fg = RoiTarget::Foreground {
            class: 6,
            delta: BoxDelta {
                tx: 0.0,
                ty: 0.0,
                tw: 0.0,
                th: 0.0,
            },
        };
        assert!(roi_head_loss(&mut tape, &head, &[fg], 6).is_err());
    }

    #[test]
    fn adversarial_zero_logit_is_ln_two() {
        let mut tape = Tape::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1])), true);
        let loss = adversarial_domain_loss(&mut tape, logits, &[DomainTag::Target]).unwrap();
        assert!((scalar(&tape, loss) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adversarial_perfect_batch_near_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![40.0, -40.0]).unwrap(),
            true,
        );
        let loss =
            adversarial_domain_loss(&mut tape, logits, &[DomainTag::Target, DomainTag::Source])
                .unwrap();
        assert!(scalar(&tape, loss) < 1e-12);
    }

    #[test]
    fn adversarial_mixed_batch_matches_hand_formula() {
        let z = 0.7;
        let mut tape = Tape::new();
        let logits = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![z, -z]).unwrap(),
            true,
        );
        let loss =
            adversarial_domain_loss(&mut tape, logits, &[DomainTag::Target, DomainTag::Source])
                .unwrap();
        // -ln sigma(z) for the target image, -ln(1 - sigma(-z)) for the source
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let hand = 0.5 * (-(sig(z).ln()) + -(1.0 - sig(-z)).ln());
        assert!((scalar(&tape, loss) - hand).abs() < 1e-12);
        assert!(adversarial_domain_loss(&mut tape, logits, &[DomainTag::Source]).is_err());
    }

    #[test]
    fn depth_loss_zero_when_exact_and_one_when_scaled_by_e() {
        let gt = DepthMap::constant(8, 8, 4.0).unwrap();
        let ln4 = 4.0f64.ln();
        let mut tape = Tape::new();
        let exact = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), ln4), true);
        let l = depth_loss(&mut tape, exact, Some(&gt), 4).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-12);

        let scaled = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), ln4 + 1.0), true);
        let l = depth_loss(&mut tape, scaled, Some(&gt), 4).unwrap();
        assert!((scalar(&tape, l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_missing_gt_is_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])), true);
        let l = depth_loss(&mut tape, p, None, 4).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    #[test]
    fn reconstruction_loss_values_and_shape_check() {
        let img = ImagePlane::constant(32, 32, 0.75).unwrap();
        let mut tape = Tape::new();
        let same = tape.leaf(
            img.pixels().clone().insert_axis(Axis(0)).into_dyn(),
            true,
        );
        let l = reconstruction_loss(&mut tape, same, &img).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);

        let half = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 3, 32, 32]), 0.5), true);
        let l = reconstruction_loss(&mut tape, half, &img).unwrap();
        assert_eq!(scalar(&tape, l), 0.25);

        let wrong = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 16, 32])), true);
        assert!(matches!(
            reconstruction_loss(&mut tape, wrong, &img),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn reconstruction_loss_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plane = |r: &mut ChaCha8Rng| {
            ImagePlane::new(ndarray::Array3::from_shape_fn((3, 32, 32), |_| {
                r.gen_range(0.0..1.0)
            }))
            .unwrap()
        };
        let a = plane(&mut rng);
        let b = plane(&mut rng);
        let mut tape = Tape::new();
        let ta = tape.leaf(a.pixels().clone().insert_axis(Axis(0)).into_dyn(), false);
        let tb = tape.leaf(b.pixels().clone().insert_axis(Axis(0)).into_dyn(), false);
        let lab = reconstruction_loss(&mut tape, ta, &b).unwrap();
        let lba = reconstruction_loss(&mut tape, tb, &a).unwrap();
        assert_eq!(scalar(&tape, lab).to_bits(), scalar(&tape, lba).to_bits());
    }

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, class: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            category_id: class,
            score,
        }
    }

    fn traced(tape: &mut Tape, boxes_norm: [f64; 4], hot: usize, margin: f64) -> TracedDet {
        let mut logits = Array2::zeros((1, 7));
        logits[[0, hot]] = margin;
        TracedDet {
            logits_row: tape.leaf(logits.into_dyn(), true),
            box_norm: tape.leaf(arr2(&[boxes_norm]).into_dyn(), true),
        }
    }

    #[test]
    fn consistency_empty_views_zero() {
        let mut tape = Tape::new();
        let matches = crate::pseudo::consistency_pairs(&[], &[], 0.5).unwrap();
        let l = consistency_loss(
            &mut tape,
            &ConsistencyInputs {
                clear: &[],
                foggy: &[],
                foggy_traced: &[],
                matches: &matches,
                confidence_threshold: 0.8,
                image_w: 100.0,
                image_h: 100.0,
            },
        )
        .unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    #[test]
    fn consistency_single_pair_matches_hand_value() {
        // clear (10,10,30,30) vs foggy (12,10,32,30) in a 100x100 image:
        // normalized offsets (0.02, 0, 0.02, 0), smooth_l1 mean
        // = (0.5*4e-4 * 2) / 4 = 1e-4; class term ~ 0 at +200 margin.
        let clear = vec![det(10.0, 10.0, 30.0, 30.0, 3, 0.9)];
        let foggy = vec![det(12.0, 10.0, 32.0, 30.0, 3, 0.85)];
        let matches = crate::pseudo::consistency_pairs(&clear, &foggy, 0.5).unwrap();
        assert_eq!(matches.pairs, vec![(0, 0)]);
        let mut tape = Tape::new();
        let tr = vec![traced(&mut tape, [0.12, 0.10, 0.32, 0.30], 3, 200.0)];
        let l = consistency_loss(
            &mut tape,
            &ConsistencyInputs {
                clear: &clear,
                foggy: &foggy,
                foggy_traced: &tr,
                matches: &matches,
                confidence_threshold: 0.8,
                image_w: 100.0,
                image_h: 100.0,
            },
        )
        .unwrap();
        assert!((scalar(&tape, l) - 1e-4).abs() < 1e-12, "got {}", scalar(&tape, l));
    }

    #[test]
    fn consistency_identical_lists_zero_box_term() {
        let dets = vec![det(10.0, 10.0, 30.0, 30.0, 1, 0.9)];
        let matches = crate::pseudo::consistency_pairs(&dets, &dets, 0.5).unwrap();
        let mut tape = Tape::new();
        let tr = vec![traced(&mut tape, [0.10, 0.10, 0.30, 0.30], 1, 200.0)];
        let l = consistency_loss(
            &mut tape,
            &ConsistencyInputs {
                clear: &dets,
                foggy: &dets,
                foggy_traced: &tr,
                matches: &matches,
                confidence_threshold: 0.8,
                image_w: 100.0,
                image_h: 100.0,
            },
        )
        .unwrap();
        assert!(scalar(&tape, l) < 1e-12);
    }

    #[test]
    fn consistency_unmatched_confident_clear_penalized() {
        // one clear detection above tau, nothing in the foggy view
        let clear = vec![
            det(10.0, 10.0, 30.0, 30.0, 1, 0.9),
            det(50.0, 50.0, 70.0, 70.0, 2, 0.3), // below tau: no penalty
        ];
        let matches = crate::pseudo::consistency_pairs(&clear, &[], 0.5).unwrap();
        let mut tape = Tape::new();
        let l = consistency_loss(
            &mut tape,
            &ConsistencyInputs {
                clear: &clear,
                foggy: &[],
                foggy_traced: &[],
                matches: &matches,
                confidence_threshold: 0.8,
                image_w: 100.0,
                image_h: 100.0,
            },
        )
        .unwrap();
        // one contributing item, penalty 1.0, mean over 1
        assert_eq!(scalar(&tape, l), 1.0);
    }

    #[test]
    fn regulating_term_weights_only() {
        let mut set = ParamSet::new();
        set.add(
            "layer.w",
            ParamKind::Weight,
            ArrayD::from_elem(IxDyn(&[1]), 2.0),
        );
        set.add(
            "layer.b",
            ParamKind::Bias,
            ArrayD::from_elem(IxDyn(&[1]), 100.0),
        );
        let mut tape = Tape::new();
        let binding = tape.bind(&set, true);
        let reg = regulating_term(&mut tape, &[(&set, &binding)]);
        assert_eq!(scalar(&tape, reg), 2.0, "half of 2^2, bias excluded");

        let empty = ParamSet::new();
        let mut tape2 = Tape::new();
        let b2 = tape2.bind(&empty, true);
        let reg2 = regulating_term(&mut tape2, &[(&empty, &b2)]);
        assert_eq!(scalar(&tape2, reg2), 0.0);
    }

    #[test]
    fn regulating_term_quadratic_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut set = ParamSet::new();
        let vals: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        set.add(
            "w",
            ParamKind::Weight,
            ArrayD::from_shape_vec(IxDyn(&[20]), vals.clone()).unwrap(),
        );
        let mut doubled = set.clone();
        doubled.value_mut(0).mapv_inplace(|v| 2.0 * v);

        let mut t1 = Tape::new();
        let b1 = t1.bind(&set, false);
        let r1 = regulating_term(&mut t1, &[(&set, &b1)]);
        let mut t2 = Tape::new();
        let b2 = t2.bind(&doubled, false);
        let r2 = regulating_term(&mut t2, &[(&doubled, &b2)]);
        // scaling by 2 is exact in binary floating point
        assert_eq!((4.0 * scalar(&t1, r1)).to_bits(), scalar(&t2, r2).to_bits());
    }

    fn example_parts() -> LossParts {
        LossParts {
            rpn_cls: 1.0,
            rpn_reg: 0.5,
            roi_cls: 2.0,
            roi_reg: 0.5,
            adv: 0.6931,
            depth: 1.0,
            rec: 0.25,
            cons: 0.2,
            reg: 10.0,
        }
    }

    #[test]
    fn composite_frozen_example() {
        let b = composite_loss(&example_parts(), &LossWeights::default()).unwrap();
        // 4 + .1*.6931 + .1*1 + .1*.25 + .5*.2 + 1e-4*10
        assert!((b.total - 4.29531).abs() < 1e-10, "total {}", b.total);
        assert_eq!(b.rpn_cls, 1.0);
        assert_eq!(b.reg, 10.0);
    }

    #[test]
    fn composite_zero_aux_weights_reduce_to_detection() {
        let w = LossWeights {
            w_adv: 0.0,
            w_depth: 0.0,
            w_rec: 0.0,
            w_cons: 0.0,
            reg_strength: 0.0,
            ..LossWeights::default()
        };
        let b = composite_loss(&example_parts(), &w).unwrap();
        assert_eq!(b.total, 4.0);
    }

    #[test]
    fn composite_rejects_bad_inputs() {
        let neg_w = LossWeights {
            w_adv: -0.1,
            ..LossWeights::default()
        };
        assert!(matches!(
            composite_loss(&example_parts(), &neg_w),
            Err(Error::InvalidArgument(_))
        ));
        let fixed = LossWeights {
            w_det: 2.0,
            ..LossWeights::default()
        };
        assert!(composite_loss(&example_parts(), &fixed).is_err());

        let mut parts = example_parts();
        parts.adv = f64::NAN;
        match composite_loss(&parts, &LossWeights::default()) {
            Err(Error::NumericFailure(msg)) => assert!(msg.contains("adv"), "{msg}"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
        parts.adv = -0.5;
        assert!(composite_loss(&parts, &LossWeights::default()).is_err());
    }

    #[test]
    fn composite_tape_agrees_bitwise_with_plain() {
        let parts = example_parts();
        let mut tape = Tape::new();
        let ids = TapeLossParts {
            rpn_cls: tape.leaf(ArrayD::from_elem(IxDyn(&[]), parts.rpn_cls), true),
            rpn_reg: tape.leaf(ArrayD::from_elem(IxDyn(&[]), parts.rpn_reg), true),
            roi_cls: tape.leaf(ArrayD::from_elem(IxDyn(&[]), parts.roi_cls), true),
            roi_reg: tape.leaf(ArrayD::from_elem(IxDyn(&[]), parts.roi_reg), true),
            adv: tape.leaf(ArrayD::from_elem(IxDyn(&[]), parts.adv), true),
            depth: tape.leaf(ArrayD::from_elem(IxDyn(&[]), parts.depth), true),
            rec: tape.leaf(ArrayD::from_elem(IxDyn(&[]), parts.rec), true),
            cons: tape.leaf(ArrayD::from_elem(IxDyn(&[]), parts.cons), true),
            reg: tape.leaf(ArrayD::from_elem(IxDyn(&[]), parts.reg), true),
        };
        let (total, breakdown) =
            composite_loss_tape(&mut tape, &ids, &LossWeights::default()).unwrap();
        assert_eq!(scalar(&tape, total).to_bits(), breakdown.total.to_bits());

        // gradient of the total w.r.t. each component is its weight
        let mut grads = tape.backward(total);
        let g = grads.take_or_zeros(ids.adv, &[]);
        assert!((g[IxDyn(&[])] - 0.1).abs() < 1e-15);
        let g = grads.take_or_zeros(ids.rpn_cls, &[]);
        assert!((g[IxDyn(&[])] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        // a miniature composed objective: BCE + softmax CE + smooth L1 +
        // L1 + half squared norm, all fed by one parameter vector
        let eval = |v: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf(
                ArrayD::from_shape_vec(IxDyn(&[3, 2]), v.to_vec()).unwrap(),
                true,
            );
            let bce_t = ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![1., 0., 1., 1., 0., 0.]).unwrap();
            let a = tape.bce_with_logits(x, bce_t);
            let b = tape.softmax_ce(x, vec![0, 1, 0]);
            let sl_t = ArrayD::from_elem(IxDyn(&[3, 2]), 0.3);
            let c = tape.smooth_l1_mean(x, sl_t);
            let l1_t = ArrayD::from_elem(IxDyn(&[3, 2]), -0.2);
            let d = tape.l1_mean(x, l1_t);
            let e = tape.sq_norm_half(x);
            let total = tape.weighted_sum(vec![(a, 1.0), (b, 1.0), (c, 1.0), (d, 0.1), (e, 1e-2)]);
            let val = scalar(&tape, total);
            if !grad {
                return (val, vec![]);
            }
            let mut grads = tape.backward(total);
            let g = grads.take_or_zeros(x, &[3, 2]);
            (val, g.iter().copied().collect())
        };
        let v0: Vec<f64> = vec![0.41, -0.37, 0.93, 0.11, -0.58, 0.77];
        let (_, analytic) = eval(&v0, true);
        let h = 1e-5;
        for k in 0..v0.len() {
            let mut vp = v0.clone();
            vp[k] += h;
            let mut vm = v0.clone();
            vm[k] -= h;
            let fd = (eval(&vp, false).0 - eval(&vm, false).0) / (2.0 * h);
            let denom = fd.abs().max(analytic[k].abs()).max(1.0);
            assert!(
                ((fd - analytic[k]) / denom).abs() < 1e-3,
                "coord {k}: fd {fd} vs analytic {}",
                analytic[k]
            );
        }
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_finite(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();

            // adversarial on random logits
            let n = rng.gen_range(1..4usize);
            let logits = tape.leaf(
                ArrayD::from_shape_fn(IxDyn(&[n, 1]), |_| rng.gen_range(-8.0..8.0)),
                true,
            );
            let tags: Vec<DomainTag> = (0..n)
                .map(|_| if rng.gen_bool(0.5) { DomainTag::Target } else { DomainTag::Source })
                .collect();
            let adv = adversarial_domain_loss(&mut tape, logits, &tags).unwrap();
            let v = scalar(&tape, adv);
            prop_assert!(v.is_finite() && v >= 0.0);

            // roi head on random logits/deltas
            let r = rng.gen_range(1..4usize);
            let head = HeadOutput {
                cls_logits: tape.leaf(
                    ArrayD::from_shape_fn(IxDyn(&[r, 4]), |_| rng.gen_range(-5.0..5.0)),
                    true,
                ),
                box_deltas: tape.leaf(
                    ArrayD::from_shape_fn(IxDyn(&[r, 12]), |_| rng.gen_range(-2.0..2.0)),
                    true,
                ),
            };
            let targets: Vec<RoiTarget> = (0..r)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        RoiTarget::Background
                    } else {
                        RoiTarget::Foreground {
                            class: rng.gen_range(0..3),
                            delta: BoxDelta {
                                tx: rng.gen_range(-1.0..1.0),
                                ty: rng.gen_range(-1.0..1.0),
                                tw: rng.gen_range(-1.0..1.0),
                                th: rng.gen_range(-1.0..1.0),
                            },
                        }
                    }
                })
                .collect();
            let (cls, reg) = roi_head_loss(&mut tape, &head, &targets, 3).unwrap();
            let (c, g) = (scalar(&tape, cls), scalar(&tape, reg));
            prop_assert!(c.is_finite() && c >= 0.0);
            prop_assert!(g.is_finite() && g >= 0.0);
        }
    }
}
