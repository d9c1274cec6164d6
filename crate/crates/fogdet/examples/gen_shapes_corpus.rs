//! Generate the synthetic shapes corpus to disk: clear/foggy image pairs,
//! per-pixel depth maps, and a manifest consumable by the `fogdet` CLI.
//!
//! Usage: cargo run --release --example gen_shapes_corpus -- [OUT_DIR] [NUM_SCENES] [SEED] [IMAGE_SIZE]

use std::path::PathBuf;

use fogdet::pipeline::{generate_corpus, write_corpus, ShapesConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| "shapes-corpus".to_string()));
    let num_scenes: usize = match args.next() {
        Some(s) => s.parse()?,
        None => 200,
    };
    let seed: u64 = match args.next() {
        Some(s) => s.parse()?,
        None => 0,
    };
    let image_size: usize = match args.next() {
        Some(s) => s.parse()?,
        None => ShapesConfig::default().image_size,
    };

    let cfg = ShapesConfig {
        num_scenes,
        seed,
        image_size,
        ..ShapesConfig::default()
    };
    let scenes = generate_corpus(&cfg)?;
    let boxes: usize = scenes.iter().map(|s| s.clear.annotations.len()).sum();
    let manifest = write_corpus(&scenes, &out_dir)?;

    println!(
        "{} scenes ({} images, {} boxes) written under {}",
        scenes.len(),
        2 * scenes.len(),
        boxes,
        out_dir.display()
    );
    println!("manifest: {}", manifest.display());
    println!();
    println!("train on it with:");
    println!("  cargo run --release --bin fogdet -- train --manifest {}", manifest.display());
    Ok(())
}
