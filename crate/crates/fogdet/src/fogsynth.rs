//! Synthetic fog: the standard haze formation model
//! `I = J·t + A·(1 − t)` with transmission `t = exp(−β·d)`.
//!
//! Fog density is controlled by a single attenuation coefficient β, so the
//! domain shift between clear and foggy views is fully reproducible.

use ndarray::Array2;

use crate::core::{DepthMap, DomainTag, ImagePlane, Sample};
use crate::error::{Error, Result};

/// Attenuation, airlight, and the fallback depth for samples without one.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FogParams {
    /// Attenuation coefficient beta, 1/meters, >= 0.
    pub beta: f64,
    /// Ambient light per channel, each in [0, 1].
    pub airlight: [f64; 3],
    /// Constant depth plane, meters, used when a sample carries no depth map.
    pub default_depth: f64,
}

impl Default for FogParams {
    fn default() -> Self {
        FogParams {
            beta: 0.0,
            airlight: [0.8, 0.8, 0.8],
            default_depth: 15.0,
        }
    }
}

impl FogParams {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        for (c, a) in self.airlight.iter().enumerate() {
            if !a.is_finite() || !(0.0..=1.0).contains(a) {
                return Err(Error::invalid(format!("airlight[{c}] must be in [0,1], got {a}")));
            }
        }
        if !self.default_depth.is_finite() || self.default_depth <= 0.0 {
            return Err(Error::invalid(format!(
                "default_depth must be > 0, got {}",
                self.default_depth
            )));
        }
        Ok(())
    }
}

/// Per-pixel transmission in (0, 1], same spatial size as the image.
#[derive(Debug, Clone)]
pub struct TransmissionMap {
    values: Array2<f64>,
}

impl TransmissionMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for v in values.iter() {
            if !v.is_finite() || *v <= 0.0 || *v > 1.0 {
                return Err(Error::invalid(format!("transmission must be in (0,1], got {v}")));
            }
        }
        Ok(TransmissionMap { values })
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// t = exp(−beta · d), pixel-wise.
pub fn transmission_from_depth(depth: &DepthMap, beta: f64) -> Result<TransmissionMap> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    let values = depth.values().mapv(|d| (-beta * d).exp());
    TransmissionMap::new(values)
}

/// I = J·t + A·(1 − t), per pixel and channel.
pub fn apply_fog(clear: &ImagePlane, t: &TransmissionMap, airlight: [f64; 3]) -> Result<ImagePlane> {
    if clear.height() != t.height() || clear.width() != t.width() {
        return Err(Error::invalid(format!(
            "transmission {}x{} does not match image {}x{}",
            t.height(),
            t.width(),
            clear.height(),
            clear.width()
        )));
    }
    for (c, a) in airlight.iter().enumerate() {
        if !a.is_finite() || !(0.0..=1.0).contains(a) {
            return Err(Error::invalid(format!("airlight[{c}] must be in [0,1], got {a}")));
        }
    }
    let mut out = clear.pixels().clone();
    for ch in 0..3 {
        let a = airlight[ch];
        let mut plane = out.index_axis_mut(ndarray::Axis(0), ch);
        for (p, tv) in plane.iter_mut().zip(t.values().iter()) {
            *p = *p * tv + a * (1.0 - tv);
        }
    }
    ImagePlane::new(out)
}

/// Fog one sample: annotations and depth carry over unchanged, the id gains
/// a "#fog" suffix, and the result is tagged as target domain.
pub fn synthesize_foggy_sample(s: &Sample, p: &FogParams) -> Result<Sample> {
    p.validate()?;
    let owned_depth;
    let depth = match &s.depth {
        Some(d) => d,
        None => {
            owned_depth = DepthMap::constant(s.image.height(), s.image.width(), p.default_depth)?;
            &owned_depth
        }
    };
    let t = transmission_from_depth(depth, p.beta)?;
    let image = apply_fog(&s.image, &t, p.airlight)?;
    Ok(Sample {
        id: format!("{}#fog", s.id),
        image,
        annotations: s.annotations.clone(),
        domain: DomainTag::Target,
        depth: s.depth.clone(),
    })
}
