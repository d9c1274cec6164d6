//! Dataset manifest: one self-describing JSON file listing categories and
//! image records, with image/depth planes stored as PNG files next to it.
//!
//! Image paths in a manifest are interpreted relative to the manifest
//! file's directory, so a dataset directory can be moved as a unit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::core::{
    validate_sample, Annotation, BBox, DepthMap, DomainTag, ImagePlane, Sample,
};
use crate::error::{Error, Result};

/// One category of the label set; ids must be dense (0..count).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CategoryRecord {
    pub id: usize,
    pub name: String,
}

/// One annotated box, stored as corner coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRecord {
    /// [x1, y1, x2, y2]
    pub bbox: [f64; 4],
    pub category_id: usize,
}

/// One image entry of the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    /// PNG path, relative to the manifest's directory.
    pub path: String,
    pub width: usize,
    pub height: usize,
    pub domain: DomainTag,
    /// 16-bit grayscale PNG holding depth in millimeters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<String>,
    /// Clear-view twin of a foggy target image, when one exists (e.g. the
    /// original a synthesized foggy image was derived from). Enables the
    /// teacher/student consistency machinery during adaptation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clear_path: Option<String>,
    #[serde(default)]
    pub annotations: Vec<AnnotationRecord>,
}

/// The dataset description: categories plus image records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub categories: Vec<CategoryRecord>,
    pub images: Vec<ImageRecord>,
}

impl Manifest {
    /// Category count after checking ids are exactly 0..n in order.
    pub fn num_classes(&self) -> Result<usize> {
        for (k, c) in self.categories.iter().enumerate() {
            if c.id != k {
                return Err(Error::invalid(format!(
                    "category ids must be dense 0..{}, found id {} at position {k}",
                    self.categories.len(),
                    c.id
                )));
            }
        }
        if self.categories.is_empty() {
            return Err(Error::invalid("manifest has no categories"));
        }
        Ok(self.categories.len())
    }
}

/// A loaded sample plus the clear-view twin image when the record names
/// one.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub sample: Sample,
    pub clear: Option<ImagePlane>,
}

/// Save an image plane as an 8-bit RGB PNG.
pub fn save_image_png(img: &ImagePlane, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let px = img.pixels();
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((px[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from dimensions");
    rgb.save(path)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

/// Load an 8-bit RGB PNG into an image plane (values scaled to [0, 1]).
pub fn load_image_png(path: &Path) -> Result<ImagePlane> {
    let img = image::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: format!("cannot decode image: {e}"),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = ndarray::Array3::<f64>::zeros((3, h, w));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    ImagePlane::new(data)
}

/// Save a depth map as a 16-bit grayscale PNG holding millimeters.
pub fn save_depth_png(depth: &DepthMap, path: &Path) -> Result<()> {
    let (h, w) = (depth.height(), depth.width());
    let v = depth.values();
    let mut buf = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            buf.push((v[[y, x]] * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16);
        }
    }
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from dimensions");
    img.save(path)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

/// Load a 16-bit grayscale PNG as a depth map (millimeters to meters).
pub fn load_depth_png(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: format!("cannot decode depth image: {e}"),
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!(
                    "depth must be 16-bit grayscale PNG, got {:?}",
                    other.color()
                ),
            })
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut data = ndarray::Array2::<f64>::zeros((h, w));
    for (x, y, p) in gray.enumerate_pixels() {
        data[[y as usize, x as usize]] = p.0[0] as f64 / 1000.0;
    }
    DepthMap::new(data).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: format!("invalid depth values: {e}"),
    })
}

/// Write a manifest as canonical pretty-printed JSON.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::invalid(format!("cannot serialize manifest: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Parse a manifest file without touching the images it references.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    manifest.num_classes()?;
    Ok(manifest)
}

fn record_to_item(record: &ImageRecord, base: &Path, num_classes: usize) -> Result<DatasetItem> {
    let img_path = base.join(&record.path);
    let image = load_image_png(&img_path)?;
    if image.width() != record.width || image.height() != record.height {
        return Err(Error::Validation {
            id: record.path.clone(),
            violations: vec![crate::error::Violation {
                kind: "size mismatch".to_string(),
                detail: format!(
                    "manifest says {}x{}, file is {}x{}",
                    record.width,
                    record.height,
                    image.width(),
                    image.height()
                ),
            }],
        });
    }
    let mut annotations = Vec::with_capacity(record.annotations.len());
    for (i, a) in record.annotations.iter().enumerate() {
        let [x1, y1, x2, y2] = a.bbox;
        let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| Error::Validation {
            id: record.path.clone(),
            violations: vec![crate::error::Violation {
                kind: "malformed box".to_string(),
                detail: format!("annotation {i}: {e}"),
            }],
        })?;
        annotations.push(Annotation {
            bbox,
            category_id: a.category_id,
        });
    }
    let depth = match &record.depth_path {
        Some(p) => Some(load_depth_png(&base.join(p))?),
        None => None,
    };
    let clear = match &record.clear_path {
        Some(p) => Some(load_image_png(&base.join(p))?),
        None => None,
    };
    let sample = Sample {
        id: record.path.clone(),
        image,
        annotations,
        domain: record.domain,
        depth,
    };
    let report = validate_sample(&sample, num_classes);
    if !report.is_ok() {
        return Err(Error::Validation {
            id: sample.id,
            violations: report.violations,
        });
    }
    Ok(DatasetItem { sample, clear })
}

/// Load a manifest and every sample it references; any invariant violation
/// fails the load, naming the offending record.
pub fn load_manifest(path: &Path) -> Result<(Manifest, Vec<DatasetItem>)> {
    let manifest = read_manifest(path)?;
    let num_classes = manifest.num_classes()?;
    let base: PathBuf = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut items = Vec::with_capacity(manifest.images.len());
    for record in &manifest.images {
        items.push(record_to_item(record, &base, num_classes)?);
    }
    Ok((manifest, items))
}
