//! Operational shell: dataset manifests, deterministic splits, training
//! configuration, the two-phase training loop, checkpoints, and evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod manifest;
pub mod render;
pub mod shapes;
pub mod split;
pub mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, EpochStats, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{load_train_config, TrainConfig};
pub use manifest::{
    load_depth_png, load_image_png, load_manifest, read_manifest, save_depth_png, save_image_png,
    write_manifest, AnnotationRecord, CategoryRecord, DatasetItem, ImageRecord, Manifest,
};
pub use eval::{
    eval_detect_config, evaluate_checkpoint, evaluate_model, evaluate_with, load_model,
    per_class_pr_curves, EvalRun,
};
pub use render::{draw_detections, render_pr_curve};
pub use shapes::{generate_corpus, scenes_to_items, write_corpus, ShapeScene, ShapesConfig};
pub use split::{split_dataset, split_indices, SplitIndices};
pub use train::{items_from_samples, sample_rois, train, StepRecord, TrainOutcome, METRICS_FILE};
