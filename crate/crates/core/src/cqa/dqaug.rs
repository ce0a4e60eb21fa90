//! Diverse-quality augmentation: under-trained MAR outputs and MixUp blends.

use candle_core::DType;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use super::loss::QualityLabel;
use super::oracle::QualityOracle;
use crate::data::{Image, Sample};
use crate::error::{invalid, Result};
use crate::models::MarNet;
use crate::nn::ops;

/// Runs an under-trained MAR net on each sample's artifact image and relabels with the oracle.
pub fn dqaug_moderate(samples: &[&Sample], mar: &MarNet, oracle: &QualityOracle, side: usize) -> Result<Vec<(Image, QualityLabel)>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let xs = samples.iter().map(|s| s.require(&s.artifact, "artifact").map(|v| v.as_slice())).collect::<Result<Vec<_>>>()?;
    let x = ops::stack_images(&xs, side, mar.dtype())?;
    let li = if mar.config().input_mode.needs_li() {
        let ls = samples.iter().map(|s| s.require(&s.li, "LI").map(|v| v.as_slice())).collect::<Result<Vec<_>>>()?;
        Some(ops::stack_images(&ls, side, mar.dtype())?)
    } else {
        None
    };
    let out = mar.forward(&x, li.as_ref())?.clamp(0f32, 1f32)?.to_dtype(DType::F32)?;
    let images = ops::unstack_images(&out)?;
    images
        .into_iter()
        .zip(samples)
        .map(|(img, s)| {
            let label = oracle.label(&img, s.require(&s.clean, "clean")?, s.roi_mask()?)?;
            Ok((img, label))
        })
        .collect()
}

/// Convex blend of two labelled images; the label is the rounded blend of the labels.
pub fn dqaug_mixup(a: (&[f32], QualityLabel), b: (&[f32], QualityLabel), lambda: f64) -> Result<(Image, QualityLabel)> {
    if a.0.len() != b.0.len() {
        return invalid("mixup images differ in size");
    }
    if !(0.0..=1.0).contains(&lambda) {
        return invalid(format!("mixup weight {lambda} outside [0, 1]"));
    }
    let lf = lambda as f32;
    let image = a.0.iter().zip(b.0).map(|(&x, &y)| if lambda == 1.0 { x } else { lf * x + (1.0 - lf) * y }).collect();
    let q = lambda * a.1.get() as f64 + (1.0 - lambda) * b.1.get() as f64;
    Ok((image, QualityLabel::nearest(q)))
}

/// Draws a MixUp weight from Beta(alpha, alpha).
pub fn sample_mixup_lambda(rng: &mut ChaCha8Rng, alpha: f64) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| crate::CoreError::InvalidArgument(format!("mixup alpha: {e}")))?;
    Ok(beta.sample(rng))
}

/// Number of augmentation calls made by a trainer; used to verify that disabling DQAug disables both ops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DqaugCounters {
    pub moderate: usize,
    pub mixup: usize,
}

/// Chooses which batch members get each augmentation.
pub(crate) fn plan(rng: &mut ChaCha8Rng, n: usize, p_moderate: f64, p_mixup: f64) -> (Vec<bool>, Vec<bool>) {
    let moderate = (0..n).map(|_| rng.random::<f64>() < p_moderate).collect();
    let mixup = (0..n).map(|_| rng.random::<f64>() < p_mixup).collect();
    (moderate, mixup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn q(k: u8) -> QualityLabel {
        QualityLabel::new(k).unwrap()
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let a = vec![0.1f32, 0.7, 0.3];
        let b = vec![0.9f32, 0.2, 0.4];
        let (img, l) = dqaug_mixup((&a, q(4)), (&b, q(9)), 1.0).unwrap();
        assert_eq!(img, a);
        assert_eq!(l, q(4));
        let (_, l) = dqaug_mixup((&a, q(2)), (&b, q(8)), 0.5).unwrap();
        assert_eq!(l, q(5));
        let (img, _) = dqaug_mixup((&a, q(2)), (&a, q(8)), 0.5).unwrap();
        assert_eq!(img, a);
        assert!(dqaug_mixup((&a, q(2)), (&b[..2], q(8)), 0.5).is_err());
    }

    #[test]
    fn beta_draws_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let l = sample_mixup_lambda(&mut rng, 0.4).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
    }
}
