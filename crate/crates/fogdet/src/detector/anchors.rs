//! Anchor geometry: generation, delta encoding/decoding, RPN target
//! assignment, and non-maximum suppression.

use crate::core::{box_iou, BBox};
use crate::error::{Error, Result};

/// Log size ratios are clamped to this magnitude before exponentiation so a
/// wild regression output cannot produce an astronomically large box.
pub const DELTA_CLAMP: f64 = 4.0;

/// Reference box tied to one feature cell, scale, and aspect.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub bbox: BBox,
    pub scale_index: usize,
    pub aspect_index: usize,
}

/// Offsets from an anchor: centers normalized by anchor size, sizes as log
/// ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

/// One anchor per (cell, scale, aspect), centered at
/// ((j+0.5)·stride, (i+0.5)·stride), in (i, j, scale, aspect) order. An
/// aspect of `a` maps scale `s` to width s/sqrt(a), height s·sqrt(a), so the
/// area stays s².
pub fn generate_anchors(
    hf: usize,
    wf: usize,
    stride: usize,
    scales: &[f64],
    aspects: &[f64],
) -> Result<Vec<Anchor>> {
    if scales.is_empty() || aspects.is_empty() {
        return Err(Error::invalid("anchor scales and aspects must be non-empty"));
    }
    let mut anchors = Vec::with_capacity(hf * wf * scales.len() * aspects.len());
    for i in 0..hf {
        for j in 0..wf {
            let cx = (j as f64 + 0.5) * stride as f64;
            let cy = (i as f64 + 0.5) * stride as f64;
            for (si, s) in scales.iter().enumerate() {
                for (ai, a) in aspects.iter().enumerate() {
                    let w = s / a.sqrt();
                    let h = s * a.sqrt();
                    anchors.push(Anchor {
                        bbox: BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)?,
                        scale_index: si,
                        aspect_index: ai,
                    });
                }
            }
        }
    }
    Ok(anchors)
}

/// tx=(gx−ax)/aw, ty=(gy−ay)/ah, tw=ln(gw/aw), th=ln(gh/ah).
pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> BoxDelta {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    BoxDelta {
        tx: (gcx - acx) / anchor.width(),
        ty: (gcy - acy) / anchor.height(),
        tw: (gt.width() / anchor.width()).ln(),
        th: (gt.height() / anchor.height()).ln(),
    }
}

/// Exact inverse of [`encode_deltas`] for |tw|, |th| ≤ [`DELTA_CLAMP`].
pub fn decode_deltas(anchor: &BBox, d: &BoxDelta) -> Result<BBox> {
    let (acx, acy) = anchor.center();
    let cx = acx + d.tx * anchor.width();
    let cy = acy + d.ty * anchor.height();
    let w = d.tw.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp() * anchor.width();
    let h = d.th.clamp(-DELTA_CLAMP, DELTA_CLAMP).exp() * anchor.height();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Per-anchor RPN label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpnLabel {
    Positive { gt_index: usize },
    Negative,
    Ignore,
}

/// Anchor labels: positive when IoU ≥ `iou_pos` with some gt or when the
/// anchor is the argmax-IoU anchor of a gt; negative when max IoU <
/// `iou_neg`; ignored otherwise. Empty gt makes everything negative.
pub fn assign_rpn_targets(
    anchors: &[Anchor],
    gt_boxes: &[BBox],
    iou_pos: f64,
    iou_neg: f64,
) -> Result<Vec<RpnLabel>> {
    if anchors.is_empty() {
        return Err(Error::invalid("assign_rpn_targets requires anchors"));
    }
    if gt_boxes.is_empty() {
        return Ok(vec![RpnLabel::Negative; anchors.len()]);
    }
    let mut labels = vec![RpnLabel::Ignore; anchors.len()];
    let mut best_gt = vec![(0usize, 0.0f64); anchors.len()]; // (gt index, iou)
    let mut best_anchor = vec![(usize::MAX, 0.0f64); gt_boxes.len()]; // (anchor index, iou)

    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gt_boxes.iter().enumerate() {
            let iou = box_iou(&a.bbox, g)?;
            if iou > best_gt[ai].1 {
                best_gt[ai] = (gi, iou);
            }
            if iou > best_anchor[gi].1 {
                best_anchor[gi] = (ai, iou);
            }
        }
    }
    for (ai, &(gi, iou)) in best_gt.iter().enumerate() {
        if iou >= iou_pos {
            labels[ai] = RpnLabel::Positive { gt_index: gi };
        } else if iou < iou_neg {
            labels[ai] = RpnLabel::Negative;
        }
    }
    // every gt with any overlap keeps its argmax anchor positive
    for (gi, &(ai, iou)) in best_anchor.iter().enumerate() {
        if ai != usize::MAX && iou > 0.0 {
            labels[ai] = RpnLabel::Positive { gt_index: gi };
        }
    }
    Ok(labels)
}

/// Greedy descending-score suppression. Returns kept indices into `dets`,
/// in keep order. Equal scores break toward the lower original index.
pub fn nms(dets: &[(BBox, f64)], iou_threshold: f64) -> Result<Vec<usize>> {
    for (_, s) in dets {
        if !s.is_finite() {
            return Err(Error::invalid(format!("nms requires finite scores, got {s}")));
        }
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    'cand: for &i in &order {
        for &k in &kept {
            if box_iou(&dets[i].0, &dets[k].0)? >= iou_threshold {
                continue 'cand;
            }
        }
        kept.push(i);
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_cell_anchor() {
        let a = generate_anchors(1, 1, 16, &[32.0], &[1.0]).unwrap();
        assert_eq!(a.len(), 1);
        let b = &a[0].bbox;
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (-8.0, -8.0, 24.0, 24.0));
    }

    #[test]
    fn anchor_count_formula() {
        let a = generate_anchors(20, 20, 16, &[32.0, 64.0, 128.0], &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(a.len(), 3600);
    }

    #[test]
    fn aspect_preserves_area() {
        let a = generate_anchors(1, 1, 16, &[48.0], &[2.0]).unwrap();
        let b = &a[0].bbox;
        assert!((b.area() - 48.0 * 48.0).abs() < 1e-9);
        assert!((b.height() / b.width() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_scales_rejected() {
        assert!(generate_anchors(1, 1, 16, &[], &[1.0]).is_err());
        assert!(generate_anchors(1, 1, 16, &[32.0], &[]).is_err());
    }

    #[test]
    fn encode_identity() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let d = encode_deltas(&a, &a);
        assert_eq!(d, BoxDelta { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 });
    }

    #[test]
    fn encode_hand_example() {
        // anchor center (10,10) size 4x4; gt center (12,10) size 8x4
        let a = BBox::new(8.0, 8.0, 12.0, 12.0).unwrap();
        let g = BBox::new(8.0, 8.0, 16.0, 12.0).unwrap();
        let d = encode_deltas(&a, &g);
        assert!((d.tx - 0.5).abs() < 1e-12);
        assert!(d.ty.abs() < 1e-12);
        assert!((d.tw - 2f64.ln()).abs() < 1e-12);
        assert!(d.th.abs() < 1e-12);
    }

    #[test]
    fn decode_hand_example() {
        let a = BBox::new(8.0, 8.0, 12.0, 12.0).unwrap();
        let d = BoxDelta { tx: 0.5, ty: 0.0, tw: 2f64.ln(), th: 0.0 };
        let g = decode_deltas(&a, &d).unwrap();
        assert!((g.center().0 - 12.0).abs() < 1e-12);
        assert!((g.center().1 - 10.0).abs() < 1e-12);
        assert!((g.width() - 8.0).abs() < 1e-12);
        assert!((g.height() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_delta_is_anchor() {
        let a = BBox::new(3.0, 4.0, 9.0, 20.0).unwrap();
        let d = BoxDelta { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 };
        let g = decode_deltas(&a, &d).unwrap();
        assert!((g.x1 - a.x1).abs() < 1e-12 && (g.y2 - a.y2).abs() < 1e-12);
    }

    #[test]
    fn rpn_targets_no_gt_all_negative() {
        let anchors = generate_anchors(2, 2, 16, &[16.0], &[1.0]).unwrap();
        let labels = assign_rpn_targets(&anchors, &[], 0.7, 0.3).unwrap();
        assert!(labels.iter().all(|l| *l == RpnLabel::Negative));
    }

    #[test]
    fn rpn_targets_exact_match_positive_with_zero_delta() {
        let anchors = generate_anchors(2, 2, 16, &[16.0], &[1.0]).unwrap();
        let gt = anchors[0].bbox.clone();
        let labels = assign_rpn_targets(&anchors, &[gt.clone()], 0.7, 0.3).unwrap();
        assert_eq!(labels[0], RpnLabel::Positive { gt_index: 0 });
        let d = encode_deltas(&anchors[0].bbox, &gt);
        assert_eq!(d, BoxDelta { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 });
    }

    #[test]
    fn rpn_targets_threshold_bands() {
        // one gt; anchors engineered for IoU 0.8 / 0.5 / ~0.1
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let hi = BBox::new(0.0, 0.0, 10.0, 8.0).unwrap(); // IoU 0.8
        let mid = BBox::new(0.0, 0.0, 10.0, 5.0).unwrap(); // IoU 0.5
        let lo = BBox::new(9.0, 9.0, 19.0, 19.0).unwrap(); // IoU ~ 1/199
        let anchors: Vec<Anchor> = [hi, mid, lo]
            .into_iter()
            .map(|bbox| Anchor { bbox, scale_index: 0, aspect_index: 0 })
            .collect();
        let labels = assign_rpn_targets(&anchors, &[gt], 0.7, 0.3).unwrap();
        assert_eq!(labels[0], RpnLabel::Positive { gt_index: 0 });
        assert_eq!(labels[1], RpnLabel::Ignore);
        assert_eq!(labels[2], RpnLabel::Negative);
    }

    #[test]
    fn rpn_targets_argmax_rescue() {
        // best anchor has IoU below iou_pos but is still the gt's argmax
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let near = BBox::new(0.0, 0.0, 10.0, 6.0).unwrap(); // IoU 0.6
        let far = BBox::new(40.0, 40.0, 50.0, 50.0).unwrap();
        let anchors: Vec<Anchor> = [near, far]
            .into_iter()
            .map(|bbox| Anchor { bbox, scale_index: 0, aspect_index: 0 })
            .collect();
        let labels = assign_rpn_targets(&anchors, &[gt], 0.7, 0.3).unwrap();
        assert_eq!(labels[0], RpnLabel::Positive { gt_index: 0 });
        assert_eq!(labels[1], RpnLabel::Negative);
    }

    #[test]
    fn nms_single_box_kept() {
        let dets = vec![(BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(), 0.9)];
        assert_eq!(nms(&dets, 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn nms_suppresses_high_overlap() {
        // IoU(A, B) = 0.75 >= threshold 0.7 suppresses B
        let a = BBox::new(0.0, 0.0, 10.0, 8.0).unwrap();
        let b = BBox::new(0.0, 0.0, 10.0, 6.0).unwrap();
        let iou = box_iou(&a, &b).unwrap();
        assert!((iou - 0.75).abs() < 1e-12);
        let kept = nms(&[(a, 0.9), (b, 0.8)], 0.7).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn nms_tie_breaks_to_lower_index() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(0.5, 0.0, 10.5, 10.0).unwrap();
        let kept = nms(&[(b, 0.7), (a, 0.7)], 0.5).unwrap();
        assert_eq!(kept, vec![0], "equal scores keep the earlier entry");
    }

    /// Reference oracle: sort (score desc, index asc) then re-scan the kept
    /// list for every candidate, with IoU recomputed from scratch.
    fn nms_oracle(dets: &[(BBox, f64)], thr: f64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&x, &y| dets[y].1.partial_cmp(&dets[x].1).unwrap().then(x.cmp(&y)));
        let mut kept = Vec::new();
        for &i in &order {
            let mut ok = true;
            for &k in &kept {
                let (a, b) = (&dets[i].0, &dets[k as usize].0);
                let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
                let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
                let inter = ix * iy;
                let iou = inter / (a.area() + b.area() - inter);
                if iou >= thr {
                    ok = false;
                    break;
                }
            }
            if ok {
                kept.push(i);
            }
        }
        kept
    }

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<(BBox, f64)> {
        (0..n)
            .map(|_| {
                let x1: f64 = rng.gen_range(0.0..50.0);
                let y1: f64 = rng.gen_range(0.0..50.0);
                let w: f64 = rng.gen_range(1.0..30.0);
                let h: f64 = rng.gen_range(1.0..30.0);
                (
                    BBox::new(x1, y1, x1 + w, y1 + h).unwrap(),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn nms_matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let n = rng.gen_range(1..=10);
            let dets = random_boxes(&mut rng, n);
            let thr = rng.gen_range(0.1..0.9);
            assert_eq!(nms(&dets, thr).unwrap(), nms_oracle(&dets, thr));
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            ax1 in 0.0f64..50.0, ay1 in 0.0f64..50.0,
            aw in 1.0f64..40.0, ah in 1.0f64..40.0,
            tx in -1.0f64..1.0, ty in -1.0f64..1.0,
            tw in -3.9f64..3.9, th in -3.9f64..3.9,
        ) {
            let a = BBox::new(ax1, ay1, ax1 + aw, ay1 + ah).unwrap();
            let d = BoxDelta { tx, ty, tw, th };
            let g = decode_deltas(&a, &d).unwrap();
            let d2 = encode_deltas(&a, &g);
            prop_assert!((d2.tx - tx).abs() < 1e-6);
            prop_assert!((d2.ty - ty).abs() < 1e-6);
            prop_assert!((d2.tw - tw).abs() < 1e-6);
            prop_assert!((d2.th - th).abs() < 1e-6);
        }

        #[test]
        fn anchor_count_random(hf in 1usize..8, wf in 1usize..8, ns in 1usize..4, na in 1usize..4) {
            let scales: Vec<f64> = (0..ns).map(|i| 16.0 * (i + 1) as f64).collect();
            let aspects: Vec<f64> = (0..na).map(|i| 0.5 * (i + 1) as f64).collect();
            let anchors = generate_anchors(hf, wf, 16, &scales, &aspects).unwrap();
            prop_assert_eq!(anchors.len(), hf * wf * ns * na);
        }

        #[test]
        fn nms_order_independent_up_to_tie_rule(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=10);
            let dets = random_boxes(&mut rng, n);
            // distinct scores so the tie rule never engages under shuffling
            let dets: Vec<(BBox, f64)> = dets
                .into_iter()
                .enumerate()
                .map(|(i, (b, _))| (b, 0.9 - 0.05 * i as f64))
                .collect();
            let kept: std::collections::BTreeSet<usize> =
                nms(&dets, 0.5).unwrap().into_iter().collect();

            let mut perm: Vec<usize> = (0..dets.len()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let shuffled: Vec<(BBox, f64)> = perm.iter().map(|&i| dets[i].clone()).collect();
            let kept_shuffled: std::collections::BTreeSet<usize> = nms(&shuffled, 0.5)
                .unwrap()
                .into_iter()
                .map(|i| perm[i])
                .collect();
            prop_assert_eq!(kept, kept_shuffled);
        }
    }
}
