//! The teacher-student machinery in isolation: exponential-moving-average
//! parameter tracking, confidence-thresholded pseudo-labels, and
//! clear/foggy detection matching for the consistency term.
//!
//! Usage: cargo run --release --example pseudo_labels

use fogdet::core::{BBox, Detection};
use fogdet::detector::{ArchConfig, DetectorModel};
use fogdet::pseudo::{consistency_pairs, ema_update_set, generate_pseudo_labels};
use fogdet::rng::stream_rng;

fn max_gap(a: &fogdet::nn::ParamSet, b: &fogdet::nn::ParamSet) -> f64 {
    a.entries()
        .iter()
        .zip(b.entries())
        .flat_map(|(ea, eb)| ea.value.iter().zip(eb.value.iter()))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn det(x: f64, class: usize, score: f64) -> Detection {
    Detection {
        bbox: BBox::new(x, 10.0, x + 12.0, 24.0).unwrap(),
        category_id: class,
        score,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // 1. EMA tracking: teacher <- student + m * (teacher - student).
    //    With a frozen student the gap must contract by exactly m each step.
    let arch = ArchConfig::desk();
    let student = DetectorModel::new(arch.clone(), &mut stream_rng(0, "demo/student"))?;
    let teacher_model = DetectorModel::new(arch, &mut stream_rng(1, "demo/teacher"))?;
    let mut teacher = teacher_model.params.clone();
    let momentum = 0.5;
    println!("EMA teacher with momentum {momentum} against a frozen student:");
    let g0 = max_gap(&teacher, &student.params);
    println!("  step 0: max parameter gap {g0:.6e}");
    for step in 1..=4 {
        ema_update_set(&mut teacher, &student.params, momentum)?;
        let g = max_gap(&teacher, &student.params);
        println!(
            "  step {step}: max parameter gap {g:.6e}  (x{:.3} of previous)",
            g / (g0 * momentum.powi(step - 1))
        );
    }

    // 2. Pseudo-labels keep only detections at or above the confidence
    //    threshold tau; raising tau can only shrink the label set.
    let detections = vec![
        det(2.0, 0, 0.95),
        det(18.0, 1, 0.80),
        det(34.0, 2, 0.55),
        det(50.0, 0, 0.35),
    ];
    println!();
    println!("pseudo-labels from 4 teacher detections:");
    for tau in [0.3, 0.5, 0.7, 0.9] {
        let labels = generate_pseudo_labels(&detections, tau);
        println!("  tau {tau:.1}: {} labels", labels.len());
    }

    // 3. Consistency pairing greedily matches same-class detections from
    //    the clear and foggy views by IoU.
    let clear_dets = vec![det(2.0, 0, 0.9), det(18.0, 1, 0.8)];
    let foggy_dets = vec![det(3.0, 0, 0.6), det(40.0, 1, 0.5)];
    let pairs = consistency_pairs(&clear_dets, &foggy_dets, 0.5)?;
    println!();
    println!(
        "consistency matching: {} of {} clear detections found a foggy twin at IoU >= 0.5",
        pairs.pairs.len(),
        clear_dets.len()
    );
    Ok(())
}
