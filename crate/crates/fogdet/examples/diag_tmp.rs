//! Temporary diagnostic: proposal quality and head scores on a trained model.

use fogdet::core::box_iou;
use fogdet::detector::DetectConfig;
use fogdet::pipeline::{generate_corpus, load_model, ShapesConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (model, cfg) = load_model(std::path::Path::new("/tmp/a4_sq_0.01/checkpoint_final.ckpt"))?;
    let scenes = generate_corpus(&ShapesConfig {
        num_scenes: 3, image_size: 128, seed: 77,
        ..ShapesConfig::default()
    })?;

    for scene in &scenes {
        let s = &scene.clear;
        println!("=== scene {} ({} gt) ===", s.id, s.annotations.len());
        for a in &s.annotations {
            println!(
                "  gt class {} at [{:.1},{:.1},{:.1},{:.1}] (w {:.1} h {:.1})",
                a.category_id, a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2,
                a.bbox.x2 - a.bbox.x1, a.bbox.y2 - a.bbox.y1,
            );
        }
        let out = model.forward_image(&s.image)?;
        println!("  {} proposals", out.proposals.len());
        let mut best_per_gt = vec![0.0f64; s.annotations.len()];
        for p in &out.proposals {
            for (gi, a) in s.annotations.iter().enumerate() {
                let iou = box_iou(&p.bbox, &a.bbox).unwrap_or(0.0);
                if iou > best_per_gt[gi] {
                    best_per_gt[gi] = iou;
                }
            }
        }
        println!("  best proposal IoU per gt: {best_per_gt:?}");
        // top-5 proposals by objectness with their head scores
        for (r, p) in out.proposals.iter().take(5).enumerate() {
            let row = out.class_scores.row(r);
            let (argmax, maxv) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            let bg = row[row.len() - 1];
            println!(
                "  prop {r}: obj {:.3} box [{:.1},{:.1},{:.1},{:.1}] -> argmax class {} p {:.3} (bg {:.3})",
                p.objectness, p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2, argmax, maxv, bg
            );
        }
        let dets = model.detect(
            &s.image,
            &DetectConfig {
                score_threshold: 0.05,
                ..cfg.detect.clone()
            },
        )?;
        println!("  {} detections at 0.05:", dets.len().min(6));
        for d in dets.iter().take(6) {
            let best = s
                .annotations
                .iter()
                .map(|a| box_iou(&d.bbox, &a.bbox).unwrap_or(0.0))
                .fold(0.0f64, f64::max);
            println!(
                "    class {} score {:.3} [{:.1},{:.1},{:.1},{:.1}] best-gt-IoU {:.2}",
                d.category_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, best
            );
        }
    }
    Ok(())
}
