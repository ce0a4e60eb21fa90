use crate::error::{invalid, Result};
use crate::nn::ParamStore;

/// phi <- eta * phi + (1 - eta) * theta for every teacher parameter.
pub fn ema_update(teacher: &ParamStore, student: &ParamStore, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return invalid(format!("EMA decay {eta} outside [0, 1]"));
    }
    if teacher.len() != student.len() || teacher.dtype() != student.dtype() {
        return invalid("teacher and student parameter structures differ");
    }
    for ((tn, phi), (sn, theta)) in teacher.iter().zip(student.iter()) {
        if tn != sn || phi.dims() != theta.dims() {
            return invalid(format!("teacher parameter {tn} does not match student parameter {sn}"));
        }
    }
    for ((_, phi), (_, theta)) in teacher.iter().zip(student.iter()) {
        let next = (phi.as_tensor().affine(eta, 0.0)? + theta.as_tensor().affine(1.0 - eta, 0.0)?)?;
        phi.set(&next)?;
    }
    Ok(())
}
