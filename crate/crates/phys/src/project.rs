//! Ray-driven forward projection.
//!
//! Each ray `(view a, detector d)` is the line `s * n + t * u` with
//! `n = (cos θ, sin θ)`, `u = (-sin θ, cos θ)` and `s` the detector offset.
//! The image is sampled bilinearly (zero outside the grid) at midpoints of
//! steps of half a pixel, so the projector is exactly linear in the image.

use ndarray::{Array2, ArrayView2};

use crate::geometry::{ScanGeometry, Sinogram};
use crate::{invalid, par, Result};

/// Integration step along each ray, in pixels.
pub const RAY_STEP_PIXELS: f64 = 0.5;

/// Bilinear sample at fractional pixel coordinates `(row, col)`.
#[inline]
pub(crate) fn bilinear(image: &ArrayView2<f64>, row: f64, col: f64) -> f64 {
    let n_rows = image.nrows() as isize;
    let n_cols = image.ncols() as isize;
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as isize, c0 as isize);
    if r0 < -1 || c0 < -1 || r0 >= n_rows || c0 >= n_cols {
        return 0.0;
    }
    let at = |r: isize, c: isize| -> f64 {
        if r >= 0 && c >= 0 && r < n_rows && c < n_cols {
            image[[r as usize, c as usize]]
        } else {
            0.0
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1))
        + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1))
}

fn check_image(image: &ArrayView2<f64>, geometry: &ScanGeometry) -> Result<()> {
    let (r, c) = image.dim();
    if r != c {
        return invalid(format!("image must be square, got {r}x{c}"));
    }
    if r != geometry.image_size {
        return invalid(format!(
            "image side {r} does not match geometry image_size {}",
            geometry.image_size
        ));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return invalid("image contains non-finite values");
    }
    Ok(())
}

/// Line integrals of `image` (values per cm) along every ray of `geometry`.
pub fn forward_project(image: &Array2<f64>, geometry: &ScanGeometry) -> Result<Sinogram> {
    geometry.validate()?;
    let view = image.view();
    check_image(&view, geometry)?;

    let n = geometry.image_size as f64;
    let ps = geometry.pixel_spacing;
    let center = (n - 1.0) / 2.0;
    let step = RAY_STEP_PIXELS * ps;
    // Rays are clipped to the circle enclosing the pixel grid plus one pixel of margin.
    let radius = (n / 2.0 * std::f64::consts::SQRT_2 + 1.0) * ps;

    let mut data = Array2::<f64>::zeros((geometry.n_angles, geometry.n_detectors));
    let slice = data.as_slice_mut().expect("fresh array is contiguous");
    par::for_each_row(slice, geometry.n_detectors, |a, row| {
        let theta = geometry.angle(a);
        let (sin, cos) = theta.sin_cos();
        for (d, out) in row.iter_mut().enumerate() {
            let s = geometry.detector_offset(d);
            if s.abs() >= radius {
                continue;
            }
            let half = (radius * radius - s * s).sqrt();
            let n_steps = (2.0 * half / step).ceil() as usize;
            let t0 = -(n_steps as f64) * step / 2.0;
            let mut acc = 0.0;
            for k in 0..n_steps {
                let t = t0 + (k as f64 + 0.5) * step;
                let x = s * cos - t * sin;
                let y = s * sin + t * cos;
                acc += bilinear(&view, y / ps + center, x / ps + center);
            }
            *out = acc * step;
        }
    });
    Sinogram::new(data, geometry)
}

/// Binary `[view, detector]` mask of rays that touch metal.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMask {
    pub mask: Array2<bool>,
}

impl TraceMask {
    pub fn empty(geometry: &ScanGeometry) -> Self {
        Self {
            mask: Array2::from_elem((geometry.n_angles, geometry.n_detectors), false),
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// A cell is traced iff the projection of the metal indicator is positive there.
pub fn metal_trace(metal_mask: &Array2<bool>, geometry: &ScanGeometry) -> Result<TraceMask> {
    let indicator = metal_mask.mapv(|m| if m { 1.0 } else { 0.0 });
    let sino = forward_project(&indicator, geometry)?;
    Ok(TraceMask {
        mask: sino.data.mapv(|v| v > 0.0),
    })
}
