//! The two-stage detector network: residual backbone (stride 16), region
//! proposal network, quantized ROI max pooling, and the classification /
//! refinement head.
//!
//! Every forward runs on a [`Tape`] against a [`Binding`] of the parameter
//! set, so the same code serves training (trainable binding), teacher
//! inference, and evaluation.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{decode_deltas, generate_anchors, nms, Anchor, BoxDelta, DELTA_CLAMP};
use crate::core::{clip_box, BBox, Detection, ImagePlane};
use crate::error::{Error, Result};
use crate::nn::init::{conv_init, linear_init};
use crate::nn::tape::{Binding, RoiSpec, Tape, TensorId};
use crate::nn::{ParamId, ParamSet};

/// Channel widths, anchor layout, and proposal caps. The backbone topology
/// is fixed (stride-2 stem plus four residual stages at strides 2, 2, 2, 1),
/// so the feature stride is always 16.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    /// Extra stride-1 residual blocks appended per stage.
    pub extra_blocks: [usize; 4],
    pub rpn_channels: usize,
    pub head_hidden: usize,
    pub pooled_size: usize,
    pub num_classes: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_aspects: Vec<f64>,
    pub rpn_pre_nms_k: usize,
    pub rpn_post_nms_k: usize,
    pub rpn_nms_iou: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stem_channels: 32,
            stage_channels: [32, 64, 128, 256],
            extra_blocks: [0, 0, 0, 0],
            rpn_channels: 256,
            head_hidden: 256,
            pooled_size: 7,
            num_classes: 6,
            anchor_scales: vec![32.0, 64.0, 128.0],
            anchor_aspects: vec![0.5, 1.0, 2.0],
            rpn_pre_nms_k: 2000,
            rpn_post_nms_k: 300,
            rpn_nms_iou: 0.7,
        }
    }
}

impl ArchConfig {
    /// Small configuration for quick experiments on 64x64 images.
    pub fn desk() -> Self {
        ArchConfig {
            stem_channels: 8,
            stage_channels: [16, 24, 32, 48],
            extra_blocks: [0, 0, 0, 0],
            rpn_channels: 32,
            head_hidden: 64,
            pooled_size: 4,
            num_classes: 6,
            anchor_scales: vec![32.0, 44.0, 58.0],
            anchor_aspects: vec![1.0],
            rpn_pre_nms_k: 400,
            rpn_post_nms_k: 60,
            rpn_nms_iou: 0.7,
        }
    }

    pub const STRIDE: usize = 16;

    pub fn stride(&self) -> usize {
        Self::STRIDE
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_aspects.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be >= 1"));
        }
        if self.anchor_scales.is_empty() || self.anchor_aspects.is_empty() {
            return Err(Error::invalid("anchor scales and aspects must be non-empty"));
        }
        if self.pooled_size == 0 {
            return Err(Error::invalid("pooled_size must be >= 1"));
        }
        let dims = [
            self.stem_channels,
            self.stage_channels[0],
            self.stage_channels[1],
            self.stage_channels[2],
            self.stage_channels[3],
            self.rpn_channels,
            self.head_hidden,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("channel widths must be >= 1"));
        }
        Ok(())
    }
}

/// Inference-time selection knobs for [`DetectorModel::detect`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.5,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }
}

/// Backbone output on the tape plus its geometry.
pub struct FeatureMap {
    pub tensor: TensorId,
    pub channels: usize,
    pub hf: usize,
    pub wf: usize,
    pub stride: usize,
}

/// RPN output on the tape: one row per anchor.
pub struct RpnOutput {
    /// Objectness logits, shape (A, 1).
    pub obj_logits: TensorId,
    /// Box deltas, shape (A, 4).
    pub deltas: TensorId,
    pub anchors: Vec<Anchor>,
}

/// Head output on the tape: one row per ROI.
pub struct HeadOutput {
    /// Class logits over num_classes + background, shape (R, K+1).
    pub cls_logits: TensorId,
    /// Per-class box deltas, shape (R, K*4).
    pub box_deltas: TensorId,
}

/// Region proposal: clipped box plus objectness in [0, 1].
#[derive(Debug, Clone)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Value-level summary of a full forward pass over one image.
pub struct DetectorOutput {
    pub proposals: Vec<Proposal>,
    /// Row-stochastic class probabilities, shape (R, K+1), background last.
    pub class_scores: Array2<f64>,
    /// Per-class deltas, shape (R, 4K), row layout [c0.tx c0.ty c0.tw c0.th c1.tx ..].
    pub refinements: Array2<f64>,
}

impl DetectorOutput {
    pub fn refinement(&self, roi: usize, class: usize) -> BoxDelta {
        BoxDelta {
            tx: self.refinements[[roi, class * 4]],
            ty: self.refinements[[roi, class * 4 + 1]],
            tw: self.refinements[[roi, class * 4 + 2]],
            th: self.refinements[[roi, class * 4 + 3]],
        }
    }
}

/// One detection with tape handles for the consistency loss: the class-logit
/// row, shape (1, K+1), and the decoded box normalized by image size, shape
/// (1, 4). The normalized box is the raw decode (not clipped); clipping is a
/// value-level post-step and stays out of the gradient path.
pub struct TracedDet {
    pub logits_row: TensorId,
    pub box_norm: TensorId,
}

/// Detections plus their per-detection tape handles (same order).
pub struct TracedDetections {
    pub detections: Vec<Detection>,
    pub traced: Vec<TracedDet>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvSpec {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinSpec {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResBlockSpec {
    conv1: ConvSpec,
    conv2: ConvSpec,
    proj: Option<ConvSpec>,
}

/// The detector: parameter set plus the layer wiring over it.
pub struct DetectorModel {
    pub arch: ArchConfig,
    pub params: ParamSet,
    stem: ConvSpec,
    stages: Vec<Vec<ResBlockSpec>>,
    rpn_conv: ConvSpec,
    rpn_obj: ConvSpec,
    rpn_delta: ConvSpec,
    fc1: LinSpec,
    fc2: LinSpec,
    cls: LinSpec,
    boxr: LinSpec,
}

impl DetectorModel {
    pub fn new<R: Rng>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let conv = |rng: &mut R, params: &mut ParamSet, name: &str, cout, cin, k, stride, pad| {
            let (w, b) = conv_init(rng, params, name, cout, cin, k);
            ConvSpec { w, b, stride, pad }
        };

        let stem = conv(rng, &mut params, "backbone.stem", arch.stem_channels, 3, 3, 2, 1);
        let mut stages = Vec::new();
        let mut cin = arch.stem_channels;
        for (si, &cout) in arch.stage_channels.iter().enumerate() {
            let stride = if si < 3 { 2 } else { 1 };
            let mut blocks = Vec::new();
            for bi in 0..=arch.extra_blocks[si] {
                let (s, ci) = if bi == 0 { (stride, cin) } else { (1, cout) };
                let name = format!("backbone.s{si}.b{bi}");
                let conv1 = conv(rng, &mut params, &format!("{name}.conv1"), cout, ci, 3, s, 1);
                let conv2 = conv(rng, &mut params, &format!("{name}.conv2"), cout, cout, 3, 1, 1);
                let proj = (s != 1 || ci != cout)
                    .then(|| conv(rng, &mut params, &format!("{name}.proj"), cout, ci, 1, s, 0));
                blocks.push(ResBlockSpec { conv1, conv2, proj });
            }
            stages.push(blocks);
            cin = cout;
        }

        let a = arch.anchors_per_cell();
        let c4 = arch.stage_channels[3];
        let rpn_conv = conv(rng, &mut params, "rpn.conv", arch.rpn_channels, c4, 3, 1, 1);
        let rpn_obj = conv(rng, &mut params, "rpn.obj", a, arch.rpn_channels, 1, 1, 0);
        let rpn_delta = conv(rng, &mut params, "rpn.delta", 4 * a, arch.rpn_channels, 1, 1, 0);

        let p = arch.pooled_size;
        let head_in = c4 * p * p;
        let lin = |rng: &mut R, params: &mut ParamSet, name: &str, fi, fo| {
            let (w, b) = linear_init(rng, params, name, fi, fo);
            LinSpec { w, b }
        };
        let fc1 = lin(rng, &mut params, "head.fc1", head_in, arch.head_hidden);
        let fc2 = lin(rng, &mut params, "head.fc2", arch.head_hidden, arch.head_hidden);
        let cls = lin(rng, &mut params, "head.cls", arch.head_hidden, arch.num_classes + 1);
        let boxr = lin(rng, &mut params, "head.box", arch.head_hidden, arch.num_classes * 4);

        Ok(DetectorModel {
            arch,
            params,
            stem,
            stages,
            rpn_conv,
            rpn_obj,
            rpn_delta,
            fc1,
            fc2,
            cls,
            boxr,
        })
    }

    /// Rebuild the wiring for an existing parameter set (checkpoint load).
    /// The set must have been produced by `new` under the same arch.
    pub fn from_params(arch: ArchConfig, params: ParamSet) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = DetectorModel::new(arch, &mut rng)?;
        if !template.params.same_layout(&params) {
            return Err(Error::invalid(
                "parameter set does not match the architecture layout",
            ));
        }
        Ok(DetectorModel { params, ..template })
    }

    fn apply_conv(&self, t: &mut Tape, bind: &Binding, s: &ConvSpec, x: TensorId) -> TensorId {
        let y = t.conv2d(x, bind.ids[s.w], s.stride, s.pad);
        t.bias_add4(y, bind.ids[s.b])
    }

    fn apply_linear(&self, t: &mut Tape, bind: &Binding, s: &LinSpec, x: TensorId) -> TensorId {
        let y = t.matmul(x, bind.ids[s.w]);
        t.bias_add2(y, bind.ids[s.b])
    }

    fn apply_block(&self, t: &mut Tape, bind: &Binding, blk: &ResBlockSpec, x: TensorId) -> TensorId {
        let h = self.apply_conv(t, bind, &blk.conv1, x);
        let h = t.relu(h);
        let h = self.apply_conv(t, bind, &blk.conv2, h);
        let skip = match &blk.proj {
            Some(p) => self.apply_conv(t, bind, p, x),
            None => x,
        };
        let s = t.add(h, skip);
        t.relu(s)
    }

    /// Stride-16 feature extraction. `x` is a (1, 3, H, W) tensor.
    pub fn backbone_forward(&self, t: &mut Tape, bind: &Binding, x: TensorId) -> Result<FeatureMap> {
        let shape = t.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid("backbone expects a (1, 3, H, W) tensor"));
        }
        let (h, w) = (shape[2], shape[3]);
        let stride = self.arch.stride();
        if h < stride || w < stride {
            return Err(Error::invalid(format!(
                "image {h}x{w} is smaller than one stride ({stride})"
            )));
        }
        let mut cur = self.apply_conv(t, bind, &self.stem, x);
        cur = t.relu(cur);
        for blocks in &self.stages {
            for blk in blocks {
                cur = self.apply_block(t, bind, blk, cur);
            }
        }
        let out_shape = t.value(cur).shape().to_vec();
        Ok(FeatureMap {
            tensor: cur,
            channels: out_shape[1],
            hf: out_shape[2],
            wf: out_shape[3],
            stride,
        })
    }

    /// Objectness and deltas for every anchor of the feature map, in the
    /// anchor order of [`generate_anchors`] (row-major cells, then scale,
    /// then aspect).
    pub fn rpn_forward(&self, t: &mut Tape, bind: &Binding, f: &FeatureMap) -> Result<RpnOutput> {
        if f.channels != self.arch.stage_channels[3] {
            return Err(Error::invalid(format!(
                "feature map has {} channels, arch expects {}",
                f.channels, self.arch.stage_channels[3]
            )));
        }
        let a = self.arch.anchors_per_cell();
        let shared = self.apply_conv(t, bind, &self.rpn_conv, f.tensor);
        let shared = t.relu(shared);
        // obj channel = scale_idx * n_aspects + aspect_idx; NHWC flatten then
        // matches anchor order exactly.
        let obj = self.apply_conv(t, bind, &self.rpn_obj, shared);
        let obj = t.permute_nhwc(obj);
        let obj_logits = t.reshape(obj, &[f.hf * f.wf * a, 1]);
        // delta channel = (scale_idx * n_aspects + aspect_idx) * 4 + coord
        let deltas = self.apply_conv(t, bind, &self.rpn_delta, shared);
        let deltas = t.permute_nhwc(deltas);
        let deltas = t.reshape(deltas, &[f.hf * f.wf * a, 4]);
        let anchors = generate_anchors(
            f.hf,
            f.wf,
            f.stride,
            &self.arch.anchor_scales,
            &self.arch.anchor_aspects,
        )?;
        Ok(RpnOutput {
            obj_logits,
            deltas,
            anchors,
        })
    }

    /// Classification and per-class refinement over pooled ROI blocks of
    /// shape (R, C, P, P).
    pub fn head_forward(&self, t: &mut Tape, bind: &Binding, pooled: TensorId) -> Result<HeadOutput> {
        let shape = t.value(pooled).shape().to_vec();
        let (c4, p) = (self.arch.stage_channels[3], self.arch.pooled_size);
        if shape.len() != 4 || shape[1] != c4 || shape[2] != p || shape[3] != p {
            return Err(Error::invalid(format!(
                "pooled blocks {shape:?} do not match arch (C={c4}, P={p})"
            )));
        }
        let r = shape[0];
        let flat = t.reshape(pooled, &[r, c4 * p * p]);
        let h = self.apply_linear(t, bind, &self.fc1, flat);
        let h = t.relu(h);
        let h = self.apply_linear(t, bind, &self.fc2, h);
        let h = t.relu(h);
        let cls_logits = self.apply_linear(t, bind, &self.cls, h);
        let box_deltas = self.apply_linear(t, bind, &self.boxr, h);
        Ok(HeadOutput {
            cls_logits,
            box_deltas,
        })
    }

    /// Full pipeline on one image with a caller-supplied tape and binding.
    /// Returns detections plus per-detection tape handles.
    pub fn detect_traced(
        &self,
        t: &mut Tape,
        bind: &Binding,
        image: &ImagePlane,
        cfg: &DetectConfig,
    ) -> Result<TracedDetections> {
        let x = image_to_tensor(t, image);
        self.detect_from_tensor(t, bind, x, image.width() as f64, image.height() as f64, cfg)
    }

    /// As [`detect_traced`](Self::detect_traced) but starting from an input
    /// tensor already on the tape (training reuses the fogged input tensor).
    pub fn detect_from_tensor(
        &self,
        t: &mut Tape,
        bind: &Binding,
        x: TensorId,
        image_w: f64,
        image_h: f64,
        cfg: &DetectConfig,
    ) -> Result<TracedDetections> {
        let f = self.backbone_forward(t, bind, x)?;
        self.detect_from_features(t, bind, &f, image_w, image_h, cfg)
    }

    /// Same as [`DetectorModel::detect_from_tensor`], starting from an
    /// already-computed feature map so training can share one backbone
    /// pass between the detection path and the auxiliary heads.
    pub fn detect_from_features(
        &self,
        t: &mut Tape,
        bind: &Binding,
        f: &FeatureMap,
        image_w: f64,
        image_h: f64,
        cfg: &DetectConfig,
    ) -> Result<TracedDetections> {
        let rpn = self.rpn_forward(t, bind, f)?;
        let obj = t.value(rpn.obj_logits).clone();
        let deltas = t.value(rpn.deltas).clone();
        let proposals = propose(
            &rpn.anchors,
            &obj.view().into_dimensionality().unwrap(),
            &deltas.view().into_dimensionality().unwrap(),
            image_w,
            image_h,
            self.arch.rpn_pre_nms_k,
            self.arch.rpn_post_nms_k,
            self.arch.rpn_nms_iou,
        )?;
        if proposals.is_empty() {
            return Ok(TracedDetections {
                detections: Vec::new(),
                traced: Vec::new(),
            });
        }

        let rois: Vec<RoiSpec> = proposals
            .iter()
            .map(|p| RoiSpec {
                image_index: 0,
                rect: [p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2],
            })
            .collect();
        let pooled = t.roi_max_pool(f.tensor, &rois, f.stride, self.arch.pooled_size);
        let head = self.head_forward(t, bind, pooled)?;
        let probs = softmax_rows(&t.value(head.cls_logits).view().into_dimensionality().unwrap());
        let delta_values = t.value(head.box_deltas).clone();
        let delta_values: ArrayView2<f64> = delta_values.view().into_dimensionality().unwrap();

        let k = self.arch.num_classes;
        // (r, class, score, clipped box), selected per class then merged
        let mut picks: Vec<(usize, usize, f64, BBox)> = Vec::new();
        for c in 0..k {
            let mut cands: Vec<(usize, f64, BBox)> = Vec::new();
            for (r, prop) in proposals.iter().enumerate() {
                let score = probs[[r, c]];
                if score < cfg.score_threshold {
                    continue;
                }
                let d = BoxDelta {
                    tx: delta_values[[r, c * 4]],
                    ty: delta_values[[r, c * 4 + 1]],
                    tw: delta_values[[r, c * 4 + 2]],
                    th: delta_values[[r, c * 4 + 3]],
                };
                let decoded = decode_deltas(&prop.bbox, &d)?;
                match clip_box(&decoded, image_w, image_h) {
                    Ok(clipped) => cands.push((r, score, clipped)),
                    Err(Error::EmptyBox) => continue,
                    Err(e) => return Err(e),
                }
            }
            let scored: Vec<(BBox, f64)> = cands.iter().map(|(_, s, b)| (b.clone(), *s)).collect();
            for idx in nms(&scored, cfg.nms_iou)? {
                let (r, score, ref bbox) = cands[idx];
                picks.push((r, c, score, bbox.clone()));
            }
        }
        // deterministic global order: score desc, then class, then roi index
        picks.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        picks.truncate(cfg.max_dets);

        let mut detections = Vec::with_capacity(picks.len());
        let mut traced = Vec::with_capacity(picks.len());
        let deltas_by_class = t.reshape(head.box_deltas, &[proposals.len() * k, 4]);
        for (r, c, score, bbox) in picks {
            detections.push(Detection {
                bbox,
                category_id: c,
                score,
            });
            let logits_row = t.gather_rows(head.cls_logits, vec![r]);
            let delta_row = t.gather_rows(deltas_by_class, vec![r * k + c]);
            let pb = &proposals[r].bbox;
            let box_norm = t.decode_box_norm(
                delta_row,
                [pb.x1, pb.y1, pb.x2, pb.y2],
                image_w,
                image_h,
                DELTA_CLAMP,
            );
            traced.push(TracedDet {
                logits_row,
                box_norm,
            });
        }
        Ok(TracedDetections {
            detections,
            traced,
        })
    }

    /// Inference entry point: fresh tape, non-trainable binding.
    pub fn detect(&self, image: &ImagePlane, cfg: &DetectConfig) -> Result<Vec<Detection>> {
        let mut t = Tape::new();
        let bind = t.bind(&self.params, false);
        Ok(self.detect_traced(&mut t, &bind, image, cfg)?.detections)
    }

    /// Value-level forward summary (proposals, class scores, refinements).
    pub fn forward_image(&self, image: &ImagePlane) -> Result<DetectorOutput> {
        let mut t = Tape::new();
        let bind = t.bind(&self.params, false);
        let x = image_to_tensor(&mut t, image);
        let f = self.backbone_forward(&mut t, &bind, x)?;
        let rpn = self.rpn_forward(&mut t, &bind, &f)?;
        let obj = t.value(rpn.obj_logits).clone();
        let deltas = t.value(rpn.deltas).clone();
        let proposals = propose(
            &rpn.anchors,
            &obj.view().into_dimensionality().unwrap(),
            &deltas.view().into_dimensionality().unwrap(),
            image.width() as f64,
            image.height() as f64,
            self.arch.rpn_pre_nms_k,
            self.arch.rpn_post_nms_k,
            self.arch.rpn_nms_iou,
        )?;
        let k = self.arch.num_classes;
        if proposals.is_empty() {
            return Ok(DetectorOutput {
                proposals,
                class_scores: Array2::zeros((0, k + 1)),
                refinements: Array2::zeros((0, 4 * k)),
            });
        }
        let rois: Vec<RoiSpec> = proposals
            .iter()
            .map(|p| RoiSpec {
                image_index: 0,
                rect: [p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2],
            })
            .collect();
        let pooled = t.roi_max_pool(f.tensor, &rois, f.stride, self.arch.pooled_size);
        let head = self.head_forward(&mut t, &bind, pooled)?;
        let class_scores = softmax_rows(&t.value(head.cls_logits).view().into_dimensionality().unwrap());
        let refinements = t
            .value(head.box_deltas)
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
        Ok(DetectorOutput {
            proposals,
            class_scores,
            refinements,
        })
    }
}

use rand_chacha::rand_core::SeedableRng;

/// Image as a (1, 3, H, W) constant tensor on the tape.
pub fn image_to_tensor(t: &mut Tape, img: &ImagePlane) -> TensorId {
    let x = img.pixels().clone().insert_axis(Axis(0)).into_dyn();
    t.constant(x)
}

/// Row-wise stable softmax over a logits matrix.
pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    for (r, row) in logits.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            out[[r, c]] = e / z;
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decode, clip, rank, and suppress anchors into at most `post_nms_k`
/// proposals. Degenerate decoded boxes are dropped.
pub fn propose(
    anchors: &[Anchor],
    obj_logits: &ArrayView2<f64>,
    deltas: &ArrayView2<f64>,
    image_w: f64,
    image_h: f64,
    pre_nms_k: usize,
    post_nms_k: usize,
    nms_iou: f64,
) -> Result<Vec<Proposal>> {
    if anchors.is_empty() {
        return Err(Error::invalid("propose requires scored anchors"));
    }
    if obj_logits.nrows() != anchors.len() || deltas.nrows() != anchors.len() {
        return Err(Error::invalid("anchor scores/deltas length mismatch"));
    }
    let mut cands: Vec<(BBox, f64)> = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        let d = BoxDelta {
            tx: deltas[[i, 0]],
            ty: deltas[[i, 1]],
            tw: deltas[[i, 2]],
            th: deltas[[i, 3]],
        };
        let decoded = decode_deltas(&a.bbox, &d)?;
        match clip_box(&decoded, image_w, image_h) {
            Ok(clipped) => cands.push((clipped, sigmoid(obj_logits[[i, 0]]))),
            Err(Error::EmptyBox) => continue,
            Err(e) => return Err(e),
        }
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].1.partial_cmp(&cands[a].1).unwrap().then(a.cmp(&b)));
    order.truncate(pre_nms_k);
    let top: Vec<(BBox, f64)> = order.iter().map(|&i| cands[i].clone()).collect();
    let kept = nms(&top, nms_iou)?;
    Ok(kept
        .into_iter()
        .take(post_nms_k)
        .map(|i| Proposal {
            bbox: top[i].0.clone(),
            objectness: top[i].1,
        })
        .collect())
}

/// Quantized ROI max pooling on plain feature values (C, Hf, Wf), boxes in
/// input-image coordinates. Empty bins produce 0.
pub fn roi_pool(features: &Array3<f64>, rois: &[BBox], stride: usize, p: usize) -> Array4<f64> {
    let (c, hf, wf) = features.dim();
    let mut out = Array4::zeros((rois.len(), c, p, p));
    for (r, roi) in rois.iter().enumerate() {
        let bins = crate::nn::tape::roi_bins([roi.x1, roi.y1, roi.x2, roi.y2], stride, p, hf, wf);
        for (bi, &(y0, y1, x0, x1)) in bins.iter().enumerate() {
            let (py, px) = (bi / p, bi % p);
            if y0 >= y1 || x0 >= x1 {
                continue;
            }
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for fy in y0..y1 {
                    for fx in x0..x1 {
                        best = best.max(features[[ch, fy, fx]]);
                    }
                }
                out[[r, ch, py, px]] = best;
            }
        }
    }
    out
}
