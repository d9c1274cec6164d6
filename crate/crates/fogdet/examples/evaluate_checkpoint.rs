//! Checkpoint round trip: train briefly, save, reload, and score the
//! reloaded model on held-out clear and foggy scenes.
//!
//! Usage: cargo run --release --example evaluate_checkpoint

use fogdet::core::Sample;
use fogdet::pipeline::{
    evaluate_checkpoint, generate_corpus, save_checkpoint, scenes_to_items, train, ShapesConfig,
    TrainConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenes = generate_corpus(&ShapesConfig {
        num_scenes: 20,
        ..ShapesConfig::default()
    })?;
    let (held_out, train_scenes) = scenes.split_at(4);
    let (source, target) = scenes_to_items(train_scenes);

    let mut cfg = TrainConfig::desk();
    cfg.epochs = 4;
    cfg.batch_size = 4;
    cfg.burn_in_fraction = 0.5;
    println!(
        "training on {} scenes, holding out {} for evaluation...",
        train_scenes.len(),
        held_out.len()
    );
    let outcome = train(&cfg, &source, &target, None)?;

    let dir = std::env::temp_dir().join("fogdet-evaluate-checkpoint");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &outcome.checkpoint)?;
    println!("checkpoint saved to {}", path.display());

    let clear: Vec<&Sample> = held_out.iter().map(|s| &s.clear).collect();
    let foggy: Vec<&Sample> = held_out.iter().map(|s| &s.foggy).collect();

    for (name, samples) in [("clear", clear), ("foggy", foggy)] {
        let run = evaluate_checkpoint(&path, samples.into_iter(), 0.5)?;
        println!();
        println!(
            "{name} domain: mAP@0.5 = {:.4} over {} images ({} gt boxes, {} detections)",
            run.report.map, run.report.num_images, run.report.num_gt, run.report.num_detections
        );
        for (c, ap) in run.report.per_class_ap.iter().enumerate() {
            if let Some(v) = ap {
                println!("  class {c}: AP {v:.4}");
            }
        }
    }
    Ok(())
}
