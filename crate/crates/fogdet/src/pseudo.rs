//! Self-training machinery: an exponential-moving-average teacher generates
//! pseudo-labels on the clear view of a target scene, and detections from
//! the clear and foggy views are matched for consistency regularization.

use serde::{Deserialize, Serialize};

use crate::core::{box_iou, Annotation, Detection};
use crate::error::{Error, Result};
use crate::nn::ParamSet;

/// Confidence threshold and teacher momentum.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PseudoLabelConfig {
    /// Detections with score >= tau become pseudo-labels.
    pub confidence_threshold: f64,
    /// EMA momentum m: teacher <- student + m * (teacher - student).
    pub ema_momentum: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            confidence_threshold: 0.8,
            ema_momentum: 0.99,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        let tau = self.confidence_threshold;
        if !tau.is_finite() || tau <= 0.0 || tau >= 1.0 {
            return Err(Error::invalid(format!("tau must lie in (0,1), got {tau}")));
        }
        let m = self.ema_momentum;
        if !m.is_finite() || !(0.0..1.0).contains(&m) {
            return Err(Error::invalid(format!("ema momentum must lie in [0,1), got {m}")));
        }
        Ok(())
    }
}

/// Full parameter copy of the student, updated only by EMA, never by
/// gradients.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub detector: ParamSet,
    pub adapt: Option<ParamSet>,
}

impl TeacherState {
    pub fn from_student(detector: &ParamSet, adapt: Option<&ParamSet>) -> Self {
        TeacherState {
            detector: detector.clone(),
            adapt: adapt.cloned(),
        }
    }
}

/// teacher <- student + m * (teacher - student), elementwise.
///
/// This form (rather than m*t + (1-m)*s) makes the contraction exact in
/// floating point: the teacher-student gap is multiplied by m with a single
/// rounding per element, and a teacher equal to the student stays equal.
pub fn ema_update_set(teacher: &mut ParamSet, student: &ParamSet, m: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::invalid("teacher/student parameter layouts differ"));
    }
    if !m.is_finite() || !(0.0..1.0).contains(&m) {
        return Err(Error::invalid(format!("ema momentum must lie in [0,1), got {m}")));
    }
    for (t, s) in teacher.entries_mut().iter_mut().zip(student.entries().iter()) {
        ndarray::Zip::from(&mut t.value)
            .and(&s.value)
            .for_each(|tv, sv| *tv = sv + m * (*tv - sv));
    }
    Ok(())
}

/// EMA-update every teacher block from the matching student block.
pub fn ema_update(
    teacher: &mut TeacherState,
    student_detector: &ParamSet,
    student_adapt: Option<&ParamSet>,
    m: f64,
) -> Result<()> {
    ema_update_set(&mut teacher.detector, student_detector, m)?;
    match (&mut teacher.adapt, student_adapt) {
        (Some(t), Some(s)) => ema_update_set(t, s, m)?,
        (None, None) => {}
        _ => return Err(Error::invalid("teacher/student adapt-head presence differs")),
    }
    Ok(())
}

/// Keep detections with score >= tau and strip the scores.
pub fn generate_pseudo_labels(dets: &[Detection], tau: f64) -> Vec<Annotation> {
    dets.iter()
        .filter(|d| d.score >= tau)
        .map(|d| Annotation {
            bbox: d.bbox.clone(),
            category_id: d.category_id,
        })
        .collect()
}

/// Output of [`consistency_pairs`]: index pairs into the two input lists
/// plus the leftovers on each side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedPairs {
    /// (clear index, foggy index)
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_clear: Vec<usize>,
    pub unmatched_foggy: Vec<usize>,
}

/// Greedy bipartite matching between the clear-view and foggy-view
/// detections of one scene.
///
/// Candidate pairs require the same predicted class and IoU >= `iou_match`.
/// Pairs are taken greedily by descending combined score (clear + foggy),
/// ties broken by higher IoU, then by lower clear index, then lower foggy
/// index; each detection matches at most once. The combined-score ordering
/// makes the rule symmetric in the two views up to the index tie-breaks.
pub fn consistency_pairs(
    dets_clear: &[Detection],
    dets_foggy: &[Detection],
    iou_match: f64,
) -> Result<MatchedPairs> {
    struct Cand {
        i: usize,
        j: usize,
        score: f64,
        iou: f64,
    }
    let mut cands = Vec::new();
    for (i, c) in dets_clear.iter().enumerate() {
        for (j, f) in dets_foggy.iter().enumerate() {
            if c.category_id != f.category_id {
                continue;
            }
            let iou = box_iou(&c.bbox, &f.bbox)?;
            if iou >= iou_match {
                cands.push(Cand {
                    i,
                    j,
                    score: c.score + f.score,
                    iou,
                });
            }
        }
    }
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(b.iou.partial_cmp(&a.iou).unwrap())
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    let mut used_clear = vec![false; dets_clear.len()];
    let mut used_foggy = vec![false; dets_foggy.len()];
    let mut pairs = Vec::new();
    for c in &cands {
        if !used_clear[c.i] && !used_foggy[c.j] {
            used_clear[c.i] = true;
            used_foggy[c.j] = true;
            pairs.push((c.i, c.j));
        }
    }
    Ok(MatchedPairs {
        pairs,
        unmatched_clear: (0..dets_clear.len()).filter(|&i| !used_clear[i]).collect(),
        unmatched_foggy: (0..dets_foggy.len()).filter(|&j| !used_foggy[j]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::BBox;
    use crate::nn::ParamKind;
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn param_set(vals: &[f64]) -> ParamSet {
        let mut s = ParamSet::new();
        s.add(
            "p",
            ParamKind::Weight,
            ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap(),
        );
        s
    }

    #[test]
    fn ema_zero_momentum_copies_student() {
        let mut t = param_set(&[5.0, -3.0]);
        let s = param_set(&[1.0, 2.0]);
        ema_update_set(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.value(0), s.value(0));
    }

    #[test]
    fn ema_fixed_point_is_exact() {
        let s = param_set(&[0.1, 0.2, 0.3]);
        let mut t = s.clone();
        for _ in 0..10 {
            ema_update_set(&mut t, &s, 0.99).unwrap();
        }
        for (a, b) in t.value(0).iter().zip(s.value(0).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ema_gap_contracts_by_momentum() {
        // frozen student, two updates at m = 0.9: gap scaled by 0.81
        let s = param_set(&[1.0]);
        let mut t = param_set(&[3.0]); // gap 2.0
        ema_update_set(&mut t, &s, 0.9).unwrap();
        ema_update_set(&mut t, &s, 0.9).unwrap();
        let gap = t.value(0)[[0]] - 1.0;
        assert!((gap - 2.0 * 0.81).abs() < 1e-12);
    }

    #[test]
    fn ema_gap_exact_for_power_of_two_momentum() {
        // m = 0.5 multiplies exactly: gap after n steps is bit-exact 0.5^n
        let s = param_set(&[1.0, -2.0]);
        let mut t = param_set(&[1.75, 6.0]);
        for n in 1..=6 {
            ema_update_set(&mut t, &s, 0.5).unwrap();
            let expect0 = 0.75 * 0.5f64.powi(n);
            let expect1 = 8.0 * 0.5f64.powi(n);
            assert_eq!((t.value(0)[[0]] - 1.0).to_bits(), expect0.to_bits());
            assert_eq!((t.value(0)[[1]] + 2.0).to_bits(), expect1.to_bits());
        }
    }

    #[test]
    fn ema_rejects_layout_mismatch() {
        let mut t = param_set(&[1.0]);
        let s = param_set(&[1.0, 2.0]);
        assert!(ema_update_set(&mut t, &s, 0.9).is_err());
    }

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, class: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            category_id: class,
            score,
        }
    }

    #[test]
    fn pseudo_labels_threshold_and_boundary() {
        let dets = vec![
            det(0.0, 0.0, 10.0, 10.0, 0, 0.95),
            det(20.0, 20.0, 30.0, 30.0, 1, 0.6),
            det(40.0, 40.0, 50.0, 50.0, 2, 0.8),
        ];
        let labels = generate_pseudo_labels(&dets, 0.8);
        // 0.95 and the exactly-0.8 boundary case are kept
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[0].category_id, 0);
        assert_eq!(labels[1].category_id, 2);
        assert!(generate_pseudo_labels(&[], 0.5).is_empty());
    }

    #[test]
    fn identical_lists_match_to_themselves() {
        let dets = vec![
            det(0.0, 0.0, 10.0, 10.0, 0, 0.9),
            det(5.0, 0.0, 15.0, 10.0, 0, 0.5), // overlaps the first
            det(30.0, 30.0, 40.0, 45.0, 2, 0.7),
        ];
        let m = consistency_pairs(&dets, &dets, 0.5).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (2, 2), (1, 1)]);
        assert!(m.unmatched_clear.is_empty());
        assert!(m.unmatched_foggy.is_empty());
    }

    #[test]
    fn disjoint_boxes_all_unmatched() {
        let a = vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.9)];
        let b = vec![det(50.0, 50.0, 60.0, 60.0, 0, 0.8)];
        let m = consistency_pairs(&a, &b, 0.5).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_clear, vec![0]);
        assert_eq!(m.unmatched_foggy, vec![0]);
    }

    #[test]
    fn class_mismatch_blocks_pairing() {
        let a = vec![det(0.0, 0.0, 10.0, 10.0, 0, 0.9)];
        let b = vec![det(0.0, 0.0, 10.0, 10.0, 1, 0.9)];
        let m = consistency_pairs(&a, &b, 0.5).unwrap();
        assert!(m.pairs.is_empty());
    }

    /// Oracle: repeatedly scan every remaining candidate pair for the best
    /// one under the documented order, take it, repeat.
    fn pairs_oracle(a: &[Detection], b: &[Detection], thr: f64) -> Vec<(usize, usize)> {
        let mut used_a = vec![false; a.len()];
        let mut used_b = vec![false; b.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<(f64, f64, usize, usize)> = None;
            for i in 0..a.len() {
                for j in 0..b.len() {
                    if used_a[i] || used_b[j] || a[i].category_id != b[j].category_id {
                        continue;
                    }
                    let iou = box_iou(&a[i].bbox, &b[j].bbox).unwrap();
                    if iou < thr {
                        continue;
                    }
                    let key = (a[i].score + b[j].score, iou, i, j);
                    let better = match &best {
                        None => true,
                        Some((s, o, bi, bj)) => {
                            key.0 > *s
                                || (key.0 == *s && key.1 > *o)
                                || (key.0 == *s && key.1 == *o && (key.2, key.3) < (*bi, *bj))
                        }
                    };
                    if better {
                        best = Some(key);
                    }
                }
            }
            match best {
                Some((_, _, i, j)) => {
                    used_a[i] = true;
                    used_b[j] = true;
                    out.push((i, j));
                }
                None => break,
            }
        }
        out
    }

    fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
        (0..n)
            .map(|_| {
                let x1 = rng.gen_range(0.0..40.0);
                let y1 = rng.gen_range(0.0..40.0);
                det(
                    x1,
                    y1,
                    x1 + rng.gen_range(5.0..25.0),
                    y1 + rng.gen_range(5.0..25.0),
                    rng.gen_range(0..3),
                    rng.gen_range(0.05..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn matching_agrees_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let (na, nb) = (rng.gen_range(0..=5), rng.gen_range(0..=5));
            let a = random_dets(&mut rng, na);
            let b = random_dets(&mut rng, nb);
            let ours = consistency_pairs(&a, &b, 0.3).unwrap();
            assert_eq!(ours.pairs, pairs_oracle(&a, &b, 0.3));
        }
    }

    proptest! {
        #[test]
        fn pseudo_label_count_monotone_in_tau(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets = random_dets(&mut rng, 8);
            let taus = [0.1, 0.3, 0.5, 0.7, 0.9];
            let counts: Vec<usize> = taus
                .iter()
                .map(|&t| generate_pseudo_labels(&dets, t).len())
                .collect();
            for w in counts.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn matching_symmetric_in_roles(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919));
            let (na, nb) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let a = random_dets(&mut rng, na);
            let b = random_dets(&mut rng, nb);
            let fwd = consistency_pairs(&a, &b, 0.3).unwrap();
            let rev = consistency_pairs(&b, &a, 0.3).unwrap();
            let mut swapped: Vec<(usize, usize)> =
                rev.pairs.iter().map(|&(i, j)| (j, i)).collect();
            let mut fwd_pairs = fwd.pairs.clone();
            swapped.sort();
            fwd_pairs.sort();
            prop_assert_eq!(fwd_pairs, swapped);
        }
    }
}
