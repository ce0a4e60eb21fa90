//! Linear-interpolation inpainting of the metal trace.

use crate::geometry::Sinogram;
use crate::project::TraceMask;
use crate::{invalid, PhysError, Result};

/// Replaces every maximal run of traced detectors in each view with the line
/// between its nearest untraced neighbours. Runs touching an edge take the value
/// of their single neighbour. Untraced cells are copied unchanged.
pub fn li_interpolate(sino: &Sinogram, trace: &TraceMask) -> Result<Sinogram> {
    sino.check_shape()?;
    if trace.mask.dim() != sino.data.dim() {
        return invalid(format!(
            "trace shape {:?} does not match sinogram {:?}",
            trace.mask.dim(),
            sino.data.dim()
        ));
    }
    let mut out = sino.clone();
    let n = sino.data.ncols();
    for (view, (mut row, mask)) in out.data.rows_mut().into_iter().zip(trace.mask.rows()).enumerate() {
        if n > 0 && mask.iter().all(|&m| m) {
            return Err(PhysError::UnrecoverableView { view });
        }
        let mut d = 0;
        while d < n {
            if !mask[d] {
                d += 1;
                continue;
            }
            let start = d;
            while d < n && mask[d] {
                d += 1;
            }
            let end = d; // exclusive
            let left = start.checked_sub(1).map(|i| (i, row[i]));
            let right = (end < n).then(|| (end, row[end]));
            match (left, right) {
                (Some((i0, v0)), Some((i1, v1))) => {
                    let span = (i1 - i0) as f64;
                    for i in start..end {
                        let t = (i - i0) as f64 / span;
                        row[i] = v0 + t * (v1 - v0);
                    }
                }
                (Some((_, v)), None) | (None, Some((_, v))) => {
                    for i in start..end {
                        row[i] = v;
                    }
                }
                (None, None) => unreachable!("fully traced views are rejected above"),
            }
        }
    }
    Ok(out)
}
