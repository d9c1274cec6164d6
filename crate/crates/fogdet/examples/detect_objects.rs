//! Single-image detection: train a small model, run the detector on a
//! held-out scene, and write a class-colored overlay image.
//!
//! Usage: cargo run --release --example detect_objects -- [OUT_DIR]

use std::path::PathBuf;

use fogdet::detector::DetectConfig;
use fogdet::pipeline::{
    draw_detections, generate_corpus, load_model, save_checkpoint, save_image_png,
    scenes_to_items, train, ShapesConfig, TrainConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "detect-demo".to_string()),
    );
    std::fs::create_dir_all(&out_dir)?;

    let scenes = generate_corpus(&ShapesConfig {
        num_scenes: 25,
        ..ShapesConfig::default()
    })?;
    let (held_out, train_scenes) = scenes.split_at(1);
    let (source, target) = scenes_to_items(train_scenes);

    let mut cfg = TrainConfig::desk();
    cfg.epochs = 6;
    cfg.batch_size = 4;
    cfg.burn_in_fraction = 0.5;
    println!("training on {} scenes...", train_scenes.len());
    let outcome = train(&cfg, &source, &target, None)?;
    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &outcome.checkpoint)?;

    let (model, train_cfg) = load_model(&ckpt_path)?;
    let detect_cfg = DetectConfig {
        score_threshold: 0.3,
        ..train_cfg.detect.clone()
    };
    let scene = &held_out[0].clear;
    let detections = model.detect(&scene.image, &detect_cfg)?;

    println!();
    println!(
        "{} detections on the held-out scene ({} ground-truth boxes):",
        detections.len(),
        scene.annotations.len()
    );
    for d in &detections {
        println!(
            "  class {} score {:.3} at [{:.1}, {:.1}, {:.1}, {:.1}]",
            d.category_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
        );
    }

    let overlay = draw_detections(&scene.image, &detections);
    let overlay_path = out_dir.join("overlay.png");
    save_image_png(&overlay, &overlay_path)?;
    save_image_png(&scene.image, &out_dir.join("input.png"))?;
    println!();
    println!("overlay written to {}", overlay_path.display());
    Ok(())
}
