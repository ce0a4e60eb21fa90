use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{invalid, Result};

/// Parallel-beam acquisition geometry.
///
/// Lengths are in centimetres. Pixel and detector coordinates are centred on
/// the rotation axis: pixel `i` sits at `(i - (n - 1) / 2) * pixel_spacing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub n_angles: usize,
    pub n_detectors: usize,
    pub detector_spacing: f64,
    pub image_size: usize,
    pub pixel_spacing: f64,
    pub angle_start: f64,
    pub angle_end: f64,
}

impl ScanGeometry {
    /// Half-turn parallel-beam geometry over `[0, pi)`.
    pub fn parallel_beam(
        image_size: usize,
        pixel_spacing: f64,
        n_angles: usize,
        n_detectors: usize,
        detector_spacing: f64,
    ) -> Result<Self> {
        let g = Self {
            n_angles,
            n_detectors,
            detector_spacing,
            image_size,
            pixel_spacing,
            angle_start: 0.0,
            angle_end: std::f64::consts::PI,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_angles == 0 {
            return invalid("n_angles must be at least 1");
        }
        if self.image_size == 0 {
            return invalid("image_size must be positive");
        }
        if !(self.pixel_spacing > 0.0 && self.detector_spacing > 0.0) {
            return invalid("spacings must be positive");
        }
        if self.n_detectors < self.image_size {
            return invalid(format!(
                "n_detectors ({}) must be at least image_size ({})",
                self.n_detectors, self.image_size
            ));
        }
        let diagonal = self.image_size as f64 * self.pixel_spacing * std::f64::consts::SQRT_2;
        let coverage = self.n_detectors as f64 * self.detector_spacing;
        if coverage < 0.99 * diagonal {
            return invalid(format!(
                "detector row covers {coverage:.3} cm but the image diagonal is {diagonal:.3} cm"
            ));
        }
        if !(self.angle_end > self.angle_start) {
            return invalid("angle range must be increasing");
        }
        Ok(())
    }

    /// View angle in radians; uniformly spaced, end point excluded.
    pub fn angle(&self, a: usize) -> f64 {
        self.angle_start + a as f64 * self.angle_step()
    }

    pub fn angle_step(&self) -> f64 {
        (self.angle_end - self.angle_start) / self.n_angles as f64
    }

    pub fn detector_offset(&self, d: usize) -> f64 {
        (d as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    pub fn pixel_coord(&self, i: usize) -> f64 {
        (i as f64 - (self.image_size as f64 - 1.0) / 2.0) * self.pixel_spacing
    }

    pub fn field_of_view(&self) -> f64 {
        self.image_size as f64 * self.pixel_spacing
    }
}

/// Line integrals indexed by `[view, detector]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub data: Array2<f64>,
    pub geometry: ScanGeometry,
}

impl Sinogram {
    pub fn zeros(geometry: &ScanGeometry) -> Self {
        Self {
            data: Array2::zeros((geometry.n_angles, geometry.n_detectors)),
            geometry: geometry.clone(),
        }
    }

    pub fn new(data: Array2<f64>, geometry: &ScanGeometry) -> Result<Self> {
        if data.dim() != (geometry.n_angles, geometry.n_detectors) {
            return invalid(format!(
                "sinogram shape {:?} does not match geometry ({}, {})",
                data.dim(),
                geometry.n_angles,
                geometry.n_detectors
            ));
        }
        Ok(Self {
            data,
            geometry: geometry.clone(),
        })
    }

    pub fn check_shape(&self) -> Result<()> {
        if self.data.dim() != (self.geometry.n_angles, self.geometry.n_detectors) {
            return invalid("sinogram data does not match its geometry");
        }
        Ok(())
    }
}
