//! Synthetic shapes corpus: deterministic six-class scenes with dense depth
//! maps and fogged twins, sized so that full training runs finish on a desk.
//!
//! Each scene is a dark noisy ground with 1–3 bright geometric shapes, one
//! class per shape kind, each kind drawn in its own color so the classes
//! are genuinely separable by a small network. The scene depth falls off
//! linearly from the top of the frame (far) to the bottom (near), and the
//! foggy twin is produced by the physical fog synthesizer with a per-scene
//! attenuation coefficient.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::core::{box_iou, Annotation, BBox, DepthMap, DomainTag, ImagePlane, Sample};
use crate::error::{Error, Result};
use crate::fogsynth::{synthesize_foggy_sample, FogParams};
use crate::rng::stream_rng;

use super::manifest::{
    save_depth_png, save_image_png, write_manifest, AnnotationRecord, CategoryRecord, DatasetItem,
    ImageRecord, Manifest,
};

/// The six shape classes, in category-id order.
pub const SHAPE_CLASSES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];

/// Fill color per class (RGB in [0, 1]); each class owns a distinct hue.
pub const SHAPE_COLORS: [[f64; 3]; 6] = [
    [0.90, 0.15, 0.15], // circle: red
    [0.15, 0.90, 0.15], // square: green
    [0.20, 0.30, 0.95], // triangle: blue
    [0.90, 0.90, 0.20], // diamond: yellow
    [0.90, 0.20, 0.90], // cross: magenta
    [0.20, 0.90, 0.90], // ring: cyan
];

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub num_scenes: usize,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Per-scene fog attenuation is drawn uniformly from this range (1/m).
    pub beta_min: f64,
    pub beta_max: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            num_scenes: 200,
            image_size: 128,
            min_shapes: 1,
            max_shapes: 3,
            beta_min: 0.04,
            beta_max: 0.12,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 {
            return Err(Error::invalid("num_scenes must be >= 1"));
        }
        if self.image_size < crate::core::MIN_IMAGE_SIDE {
            return Err(Error::invalid(format!(
                "image_size must be >= {}",
                crate::core::MIN_IMAGE_SIDE
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid("need 1 <= min_shapes <= max_shapes"));
        }
        if !(self.beta_min.is_finite() && self.beta_max.is_finite())
            || self.beta_min < 0.0
            || self.beta_min > self.beta_max
        {
            return Err(Error::invalid("need 0 <= beta_min <= beta_max"));
        }
        Ok(())
    }
}

/// A clear source sample and its fogged target twin (same scene geometry;
/// the twin keeps the annotations so foggy-domain evaluation is possible).
#[derive(Debug, Clone)]
pub struct ShapeScene {
    pub clear: Sample,
    pub foggy: Sample,
}

struct PlacedShape {
    class: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

fn inside(shape: &PlacedShape, x: f64, y: f64) -> bool {
    let dx = x - shape.cx;
    let dy = y - shape.cy;
    let r = shape.r;
    match shape.class {
        0 => dx * dx + dy * dy <= r * r,                      // circle
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,      // square
        2 => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,     // triangle (apex up)
        3 => dx.abs() + dy.abs() <= r,                        // diamond
        4 => {
            // cross: horizontal and vertical bars
            (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
        }
        5 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (r / 2.0) * (r / 2.0) // ring
        }
        _ => unreachable!("class id out of range"),
    }
}

fn shape_bbox(s: &PlacedShape) -> BBox {
    BBox::new(s.cx - s.r, s.cy - s.r, s.cx + s.r, s.cy + s.r).expect("placement keeps r > 0")
}

/// Linear depth ramp: far at the top of the frame, near at the bottom.
pub const DEPTH_FAR_M: f64 = 35.0;
pub const DEPTH_NEAR_M: f64 = 6.0;

fn scene_depth(size: usize) -> DepthMap {
    let values = ndarray::Array2::from_shape_fn((size, size), |(y, _)| {
        DEPTH_FAR_M + (DEPTH_NEAR_M - DEPTH_FAR_M) * y as f64 / (size - 1) as f64
    });
    DepthMap::new(values).expect("ramp depths are positive")
}

fn generate_scene(cfg: &ShapesConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<ShapeScene> {
    let size = cfg.image_size;
    let sf = size as f64;

    // dark noisy ground
    let mut data = ndarray::Array3::zeros((3, size, size));
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                data[[c, y, x]] = rng.gen_range(0.05..0.15);
            }
        }
    }

    // place shapes with bounded mutual overlap so boxes stay learnable
    let n_shapes = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut placed: Vec<PlacedShape> = Vec::new();
    for _ in 0..n_shapes {
        for _attempt in 0..10 {
            let r = rng.gen_range(0.13 * sf..0.23 * sf);
            let cx = rng.gen_range(r + 1.0..sf - r - 1.0);
            let cy = rng.gen_range(r + 1.0..sf - r - 1.0);
            let class = rng.gen_range(0..SHAPE_CLASSES.len());
            let cand = PlacedShape { class, cx, cy, r };
            let cand_box = shape_bbox(&cand);
            let clear_of_others = placed
                .iter()
                .map(|p| box_iou(&shape_bbox(p), &cand_box).expect("boxes are non-degenerate"))
                .all(|iou| iou <= 0.3);
            if clear_of_others {
                placed.push(cand);
                break;
            }
        }
    }
    if placed.is_empty() {
        return Err(Error::invalid(
            "scene generation failed to place any shape; image_size too small for the radii",
        ));
    }

    let mut annotations = Vec::with_capacity(placed.len());
    for s in &placed {
        let color = SHAPE_COLORS[s.class];
        for y in 0..size {
            for x in 0..size {
                if inside(s, x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        data[[c, y, x]] = color[c];
                    }
                }
            }
        }
        annotations.push(Annotation {
            bbox: shape_bbox(s),
            category_id: s.class,
        });
    }

    let clear = Sample {
        id: format!("scene{index:04}"),
        image: ImagePlane::new(data)?,
        annotations,
        domain: DomainTag::Source,
        depth: Some(scene_depth(size)),
    };

    let beta = if cfg.beta_max > cfg.beta_min {
        rng.gen_range(cfg.beta_min..cfg.beta_max)
    } else {
        cfg.beta_min
    };
    let fog = FogParams {
        beta,
        ..FogParams::default()
    };
    let mut foggy = synthesize_foggy_sample(&clear, &fog)?;
    foggy.domain = DomainTag::Target;
    Ok(ShapeScene { clear, foggy })
}

/// Generate the full corpus deterministically: scene `i` draws only from
/// the `"shapes/scene/{i}"` stream of the seed.
pub fn generate_corpus(cfg: &ShapesConfig) -> Result<Vec<ShapeScene>> {
    cfg.validate()?;
    (0..cfg.num_scenes)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, &format!("shapes/scene/{i}"));
            generate_scene(cfg, i, &mut rng)
        })
        .collect()
}

/// View scenes as training inputs: annotated clear items as the source
/// set, fogged twins (with the clear image attached for the consistency
/// term) as the target set. Scenes stay index-aligned across the two lists.
pub fn scenes_to_items(scenes: &[ShapeScene]) -> (Vec<DatasetItem>, Vec<DatasetItem>) {
    let source = scenes
        .iter()
        .map(|s| DatasetItem {
            sample: s.clear.clone(),
            clear: None,
        })
        .collect();
    let target = scenes
        .iter()
        .map(|s| DatasetItem {
            sample: s.foggy.clone(),
            clear: Some(s.clear.image.clone()),
        })
        .collect();
    (source, target)
}

/// Write the corpus under `dir` (`images/`, `depths/`, `manifest.json`) and
/// return the manifest path. Clear records carry depth maps; foggy records
/// reference their clear twin, and both carry the annotations.
pub fn write_corpus(scenes: &[ShapeScene], dir: &Path) -> Result<PathBuf> {
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to write"));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("depths"))?;

    let categories = SHAPE_CLASSES
        .iter()
        .enumerate()
        .map(|(id, name)| CategoryRecord {
            id,
            name: name.to_string(),
        })
        .collect();

    let mut images = Vec::with_capacity(2 * scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let clear_rel = format!("images/clear_{i:04}.png");
        let foggy_rel = format!("images/foggy_{i:04}.png");
        let depth_rel = format!("depths/clear_{i:04}.png");
        save_image_png(&scene.clear.image, &dir.join(&clear_rel))?;
        save_image_png(&scene.foggy.image, &dir.join(&foggy_rel))?;
        let depth = scene
            .clear
            .depth
            .as_ref()
            .ok_or_else(|| Error::invalid("clear scene lost its depth map"))?;
        save_depth_png(depth, &dir.join(&depth_rel))?;

        let annotations: Vec<AnnotationRecord> = scene
            .clear
            .annotations
            .iter()
            .map(|a| AnnotationRecord {
                bbox: [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2],
                category_id: a.category_id,
            })
            .collect();
        images.push(ImageRecord {
            path: clear_rel.clone(),
            width: scene.clear.image.width(),
            height: scene.clear.image.height(),
            domain: DomainTag::Source,
            depth_path: Some(depth_rel),
            clear_path: None,
            annotations: annotations.clone(),
        });
        images.push(ImageRecord {
            path: foggy_rel,
            width: scene.foggy.image.width(),
            height: scene.foggy.image.height(),
            domain: DomainTag::Target,
            depth_path: None,
            clear_path: Some(clear_rel),
            annotations,
        });
    }

    let manifest = Manifest { categories, images };
    let path = dir.join("manifest.json");
    write_manifest(&manifest, &path)?;
    Ok(path)
}
