//! Filtered backprojection with the discrete Ram-Lak kernel.

use ndarray::Array2;

use crate::geometry::Sinogram;
use crate::{invalid, par, Result};

/// Spatial-domain Ram-Lak kernel sampled at detector spacing `tau`,
/// indexed from `-(n - 1)` to `n - 1`.
fn ram_lak(n: usize, tau: f64) -> Vec<f64> {
    let len = 2 * n - 1;
    (0..len)
        .map(|i| {
            let k = i as i64 - (n as i64 - 1);
            if k == 0 {
                1.0 / (4.0 * tau * tau)
            } else if k % 2 == 0 {
                0.0
            } else {
                let kf = k as f64;
                -1.0 / (kf * kf * std::f64::consts::PI * std::f64::consts::PI * tau * tau)
            }
        })
        .collect()
}

/// Ramp-filters every view: `q[d] = tau * sum_k p[k] h[d - k]`.
pub fn ramp_filter(sino: &Sinogram) -> Result<Array2<f64>> {
    sino.check_shape()?;
    let g = &sino.geometry;
    let n = g.n_detectors;
    let tau = g.detector_spacing;
    let kernel = ram_lak(n, tau);
    let mut filtered = Array2::<f64>::zeros((g.n_angles, n));
    let input = &sino.data;
    par::for_each_row(filtered.as_slice_mut().unwrap(), n, |a, row| {
        let view = input.row(a);
        for (d, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &p) in view.iter().enumerate() {
                // h index for offset d - k
                acc += p * kernel[d + n - 1 - k];
            }
            *out = acc * tau;
        }
    });
    Ok(filtered)
}

/// Reconstructs attenuation (per cm) from line integrals.
pub fn fbp_reconstruct(sino: &Sinogram) -> Result<Array2<f64>> {
    let g = &sino.geometry;
    g.validate()?;
    if sino.data.dim() != (g.n_angles, g.n_detectors) {
        return invalid("sinogram shape does not match its geometry");
    }
    if sino.data.iter().any(|v| !v.is_finite()) {
        return invalid("sinogram contains non-finite values");
    }
    let filtered = ramp_filter(sino)?;
    let size = g.image_size;
    let trig: Vec<(f64, f64)> = (0..g.n_angles).map(|a| g.angle(a).sin_cos()).collect();
    let det_center = (g.n_detectors as f64 - 1.0) / 2.0;
    let d_theta = g.angle_step();
    let n_det = g.n_detectors as isize;

    let mut image = Array2::<f64>::zeros((size, size));
    par::for_each_row(image.as_slice_mut().unwrap(), size, |r, row| {
        let y = g.pixel_coord(r);
        for (c, out) in row.iter_mut().enumerate() {
            let x = g.pixel_coord(c);
            let mut acc = 0.0;
            for (a, &(sin, cos)) in trig.iter().enumerate() {
                let u = (x * cos + y * sin) / g.detector_spacing + det_center;
                let u0 = u.floor();
                let f = u - u0;
                let i0 = u0 as isize;
                let q = filtered.row(a);
                let at = |i: isize| if i >= 0 && i < n_det { q[i as usize] } else { 0.0 };
                acc += (1.0 - f) * at(i0) + f * at(i0 + 1);
            }
            *out = acc * d_theta;
        }
    });
    Ok(image)
}
