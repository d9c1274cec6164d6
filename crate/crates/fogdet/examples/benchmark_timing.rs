//! Detection-latency measurement: run the timing harness over synthetic
//! images and show that the report round-trips through JSON.
//!
//! Usage: cargo run --release --example benchmark_timing -- [NUM_IMAGES]

use fogdet::core::ImagePlane;
use fogdet::detector::{ArchConfig, DetectConfig, DetectorModel};
use fogdet::evalbench::{timing_benchmark, TimingReport};
use fogdet::pipeline::{generate_corpus, ShapesConfig};
use fogdet::rng::stream_rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let num_images: usize = match std::env::args().nth(1) {
        Some(s) => s.parse()?,
        None => 10,
    };

    let model = DetectorModel::new(ArchConfig::desk(), &mut stream_rng(0, "demo/bench"))?;
    let scenes = generate_corpus(&ShapesConfig {
        num_scenes: num_images,
        ..ShapesConfig::default()
    })?;
    let images: Vec<ImagePlane> = scenes.iter().map(|s| s.foggy.image.clone()).collect();

    println!("timing {} foggy images (warmup 3)...", images.len());
    let report = timing_benchmark(&model, &images, &DetectConfig::default(), 3, 1)?;
    println!(
        "mean {:.2} ms, median {:.2} ms, p95 {:.2} ms",
        report.mean_ms, report.median_ms, report.p95_ms
    );
    println!("hardware: {}", report.hardware_note);

    let json = serde_json::to_string_pretty(&report)?;
    let back: TimingReport = serde_json::from_str(&json)?;
    assert_eq!(back, report);
    println!();
    println!(
        "report round-trips through JSON ({} bytes, {} latency records)",
        json.len(),
        report.latencies_ms.len()
    );
    Ok(())
}
