//! Two-stage detector: anchors and proposal geometry, the network itself,
//! and the detection pipeline.

pub mod anchors;
pub mod model;

pub use anchors::{
    assign_rpn_targets, decode_deltas, encode_deltas, generate_anchors, nms, Anchor, BoxDelta,
    RpnLabel, DELTA_CLAMP,
};
pub use model::{
    image_to_tensor, propose, roi_pool, softmax_rows, ArchConfig, DetectConfig, DetectorModel,
    DetectorOutput, FeatureMap, HeadOutput, Proposal, RpnOutput, TracedDet, TracedDetections,
};
