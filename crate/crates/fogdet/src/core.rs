//! Geometry, labels, and sample types shared by every other module.
//!
//! Boxes are corner-form `(x1, y1, x2, y2)` in continuous pixel coordinates
//! with the origin at the top-left. Area is `(x2-x1)*(y2-y1)` with no "+1"
//! pixel correction. All types here are immutable values and all operations
//! are pure functions, so they are safe to share across workers.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

/// Axis-aligned box, corner form, continuous coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Build a box, enforcing `x1 < x2`, `y1 < y2` and finiteness.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "box coordinates must be finite, got ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::invalid(format!(
                "box must satisfy x1 < x2 and y1 < y2, got ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

/// Object category: dense integer id plus a display name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryLabel {
    pub id: usize,
    pub name: String,
}

/// Ground-truth object: a box plus its category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub category_id: usize,
}

/// Detector output: box, category, and confidence in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category_id: usize,
    pub score: f64,
}

/// Which side of the domain shift a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

/// Dense RGB image with normalized intensities in [0, 1], stored CHW.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    data: Array3<f64>,
}

/// Minimum image side accepted anywhere in the pipeline.
pub const MIN_IMAGE_SIDE: usize = 32;

impl ImagePlane {
    /// Wrap a CHW array, enforcing 3 channels, minimum size, and value range.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::invalid(format!("image must have 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::invalid(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {h}x{w}"
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]".to_string()));
        }
        Ok(ImagePlane { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.data
    }

    /// Constant-valued image, value must be in [0, 1].
    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        ImagePlane::new(Array3::from_elem((3, height, width), value))
    }
}

/// Per-pixel scene depth in meters, strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    data: Array2<f64>,
}

impl DepthMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::invalid(
                "depth values must be finite and strictly positive".to_string(),
            ));
        }
        Ok(DepthMap { data })
    }

    /// Constant-depth plane, used when a sample carries no measured depth.
    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(Error::invalid(format!("depth must be positive, got {depth}")));
        }
        Ok(DepthMap {
            data: Array2::from_elem((height, width), depth),
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.data
    }
}

/// One dataset item: image, optional annotations and depth, and its domain.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: ImagePlane,
    pub annotations: Vec<Annotation>,
    pub domain: DomainTag,
    pub depth: Option<DepthMap>,
}

/// Intersection-over-union of two boxes. Symmetric, 0 when disjoint.
pub fn box_iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::invalid("degenerate box (zero area) in IoU".to_string()));
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Clamp a box to `[0, width] x [0, height]`.
///
/// Returns [`Error::EmptyBox`] when nothing of the box survives clipping.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> Result<BBox> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::invalid(format!(
            "clip bounds must be positive, got {width}x{height}"
        )));
    }
    let x1 = b.x1.clamp(0.0, width);
    let y1 = b.y1.clamp(0.0, height);
    let x2 = b.x2.clamp(0.0, width);
    let y2 = b.y2.clamp(0.0, height);
    if x1 >= x2 || y1 >= y2 {
        return Err(Error::EmptyBox);
    }
    BBox::new(x1, y1, x2, y2)
}

/// Result of [`validate_sample`]: empty means the sample is well-formed.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: &str, detail: String) {
        self.violations.push(Violation {
            kind: kind.to_string(),
            detail,
        });
    }
}

/// Check every invariant of a sample and report all violations found.
///
/// Never mutates and never fails: violations are returned as data.
/// `num_classes` bounds the valid category ids.
pub fn validate_sample(s: &Sample, num_classes: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (w, h) = (s.image.width() as f64, s.image.height() as f64);

    if s.id.is_empty() {
        report.push("empty id", "sample id must be non-empty".to_string());
    }

    for (i, ann) in s.annotations.iter().enumerate() {
        let b = &ann.bbox;
        if !(b.x1 < b.x2 && b.y1 < b.y2) || ![b.x1, b.y1, b.x2, b.y2].iter().all(|v| v.is_finite()) {
            report.push("malformed box", format!("annotation {i}: ({:?})", b));
            continue;
        }
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
            report.push(
                "box out of bounds",
                format!("annotation {i}: {:?} exceeds {w}x{h}", b),
            );
        }
        if ann.category_id >= num_classes {
            report.push(
                "label out of range",
                format!("annotation {i}: id {} with {num_classes} classes", ann.category_id),
            );
        }
    }

    if let Some(depth) = &s.depth {
        if depth.height() != s.image.height() || depth.width() != s.image.width() {
            report.push(
                "depth size mismatch",
                format!(
                    "depth {}x{} vs image {}x{}",
                    depth.height(),
                    depth.width(),
                    s.image.height(),
                    s.image.width()
                ),
            );
        }
    }

    report
}

/// Default 6-class road-scene label set. Names are configurable through the
/// dataset manifest; only the count of 6 is load-bearing.
pub fn default_categories() -> Vec<CategoryLabel> {
    ["car", "truck", "bus", "person", "bicycle", "motorcycle"]
        .iter()
        .enumerate()
        .map(|(id, name)| CategoryLabel {
            id,
            name: (*name).to_string(),
        })
        .collect()
}
