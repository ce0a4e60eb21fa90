//! HU windowing into the unit interval.

use ndarray::Array2;

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3072.0;
const HU_SPAN: f64 = HU_MAX - HU_MIN;

pub fn normalize_value(v: f64) -> f64 {
    (v.clamp(HU_MIN, HU_MAX) - HU_MIN) / HU_SPAN
}

pub fn denormalize_value(n: f64) -> f64 {
    n.clamp(0.0, 1.0) * HU_SPAN + HU_MIN
}

/// Clips to `[-1024, 3072]` HU and maps linearly onto `[0, 1]`.
pub fn hu_normalize(image: &Array2<f64>) -> Array2<f64> {
    image.mapv(normalize_value)
}

/// Inverse of [`hu_normalize`] on the clipped range.
pub fn hu_denormalize(image: &Array2<f64>) -> Array2<f64> {
    image.mapv(denormalize_value)
}
