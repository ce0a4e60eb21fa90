use candle_core::{DType, Tensor};

use super::batch::Batch;
use super::QualityRange;
use crate::cqa::prob2qua_tensor;
use crate::error::{invalid, Result};
use crate::models::{CqaNet, MarNet};

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return invalid(format!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean |pred - target| over pixels where `keep` is 1, pooled over the batch.
pub fn masked_l1(pred: &Tensor, target: &Tensor, keep: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "masked_l1")?;
    check_same(pred, keep, "masked_l1 mask")?;
    let num = (pred - target)?.abs()?.mul(keep)?.sum_all()?;
    Ok(num.broadcast_div(&keep.sum_all()?)?)
}

/// Per-sample masked mean absolute error, shape (N,).
pub fn masked_l1_per_sample(pred: &Tensor, target: &Tensor, keep: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "masked_l1")?;
    check_same(pred, keep, "masked_l1 mask")?;
    let num = (pred - target)?.abs()?.mul(keep)?.flatten_from(1)?.sum(1)?;
    Ok(num.div(&keep.flatten_from(1)?.sum(1)?)?)
}

/// Supervised simulated-domain loss.
pub fn sim_loss(student: &MarNet, batch: &Batch) -> Result<Tensor> {
    let Some(y) = &batch.y else {
        return invalid("simulated batch has no target images");
    };
    masked_l1(&student.forward(&batch.x, batch.li.as_ref())?, y, &batch.keep)
}

/// Teacher prediction (detached) and its CQA quality; NaN qualities when no CQA is given.
pub fn assess_pseudo(teacher: &MarNet, cqa: Option<&CqaNet>, cli: &Batch) -> Result<(Tensor, Vec<f64>)> {
    let y_tilde = teacher.forward(&cli.x, cli.li.as_ref())?.detach();
    let q = match cqa {
        Some(net) => {
            let input = y_tilde.to_dtype(net.dtype())?.detach();
            prob2qua_tensor(&net.forward(&input)?.prob)?.to_dtype(DType::F64)?.to_vec1::<f64>()?
        }
        None => vec![f64::NAN; cli.len()],
    };
    Ok((y_tilde, q))
}

/// The two training pairs built from one clinical batch.
#[derive(Debug, Clone)]
pub struct PseudoPairSet {
    pub x_cli: Tensor,
    pub li_cli: Option<Tensor>,
    pub y_tilde: Tensor,
    pub y_prime: Tensor,
    /// Y' + (X - Y~) clipped to [0, 1].
    pub x_prime: Tensor,
    pub x_prime_unclipped: Tensor,
    pub li_prime: Option<Tensor>,
    pub keep: Tensor,
    pub q: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl PseudoPairSet {
    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }
}

/// Transfers the artifact residual X - Y~ onto the artifact-free Y'. With `gate = None`
/// every sample is accepted.
pub fn build_pseudo_pairs(cli: &Batch, y_tilde: &Tensor, y_prime: &Tensor, q: &[f64], gate: Option<QualityRange>) -> Result<PseudoPairSet> {
    check_same(&cli.x, y_tilde, "pseudo ground truth")?;
    check_same(&cli.x, y_prime, "artifact-free image")?;
    if q.len() != cli.len() {
        return invalid(format!("{} qualities for {} samples", q.len(), cli.len()));
    }
    let residual = (&cli.x - y_tilde)?;
    let x_prime_unclipped = (y_prime + &residual)?;
    let x_prime = x_prime_unclipped.clamp(0.0, 1.0)?;
    let li_prime = match &cli.li {
        Some(li) => Some((y_prime + (li - y_tilde)?)?.clamp(0.0, 1.0)?),
        None => None,
    };
    let accepted = q.iter().map(|&v| gate.is_none_or(|g| g.contains(v))).collect();
    Ok(PseudoPairSet {
        x_cli: cli.x.clone(),
        li_cli: cli.li.clone(),
        y_tilde: y_tilde.clone(),
        y_prime: y_prime.clone(),
        x_prime,
        x_prime_unclipped,
        li_prime,
        keep: cli.keep.clone(),
        q: q.to_vec(),
        accepted,
    })
}

/// Gated clinical loss: total over the batch plus each sample's contribution.
#[derive(Debug, Clone)]
pub struct CliLoss {
    pub total: Tensor,
    pub per_sample: Vec<f64>,
}

/// For each accepted sample the mean of the two masked l1 terms; rejected samples
/// contribute exactly 0. The total is the batch mean.
pub fn cli_loss(student: &MarNet, pairs: &PseudoPairSet) -> Result<CliLoss> {
    let n = pairs.accepted.len();
    let idx: Vec<u32> = (0..n as u32).filter(|&i| pairs.accepted[i as usize]).collect();
    if idx.is_empty() {
        return Ok(CliLoss { total: Tensor::zeros((), pairs.x_cli.dtype(), pairs.x_cli.device())?, per_sample: vec![0.0; n] });
    }
    let sel = Tensor::new(idx.as_slice(), pairs.x_cli.device())?;
    let pick = |t: &Tensor| t.index_select(&sel, 0);
    let pick_opt = |t: &Option<Tensor>| t.as_ref().map(pick).transpose();
    let keep = pick(&pairs.keep)?;
    let out1 = student.forward(&pick(&pairs.x_cli)?, pick_opt(&pairs.li_cli)?.as_ref())?;
    let out2 = student.forward(&pick(&pairs.x_prime)?, pick_opt(&pairs.li_prime)?.as_ref())?;
    let l1 = masked_l1_per_sample(&out1, &pick(&pairs.y_tilde)?, &keep)?;
    let l2 = masked_l1_per_sample(&out2, &pick(&pairs.y_prime)?, &keep)?;
    let per = ((l1 + l2)? * 0.5)?;
    let values = per.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut per_sample = vec![0.0; n];
    for (&i, v) in idx.iter().zip(values) {
        per_sample[i as usize] = v;
    }
    let total = (per.sum_all()? / n as f64)?;
    Ok(CliLoss { total, per_sample })
}

/// Unit-weight sum of the two domain losses; `None` for the clinical term gives sim only.
pub fn total_loss(sim: &Tensor, cli: Option<&Tensor>) -> Result<Tensor> {
    match cli {
        Some(c) => Ok((sim + c)?),
        None => Ok(sim.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f32], n: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), (n, 1, 1, v.len() / n), &Device::Cpu).unwrap()
    }

    #[test]
    fn masked_l1_ignores_masked_pixels() {
        let p = t(&[0.5, 0.2, 9.0, 0.0], 1);
        let y = t(&[0.4, 0.2, 0.0, 0.3], 1);
        let keep = t(&[1.0, 1.0, 0.0, 1.0], 1);
        let v = masked_l1(&p, &y, &keep).unwrap().to_scalar::<f32>().unwrap();
        assert!((v - 0.4 / 3.0).abs() < 1e-7);
        let per = masked_l1_per_sample(&t(&[1.0, 0.0, 0.0, 0.0], 2), &t(&[0.0; 4], 2), &t(&[1.0, 1.0, 1.0, 0.0], 2)).unwrap();
        assert_eq!(per.to_vec1::<f32>().unwrap(), vec![0.5, 0.0]);
        assert!(masked_l1(&p, &t(&[0.0; 2], 1), &keep).is_err());
    }

    #[test]
    fn zero_residual_and_gate() {
        let x = t(&[0.2, 0.7, 0.9, 0.1], 2);
        let batch = Batch { ids: vec!["a".into(), "b".into()], x: x.clone(), li: None, y: None, keep: t(&[1.0; 4], 2) };
        let yp = t(&[0.3, 0.3, 0.5, 0.6], 2);
        let gate = QualityRange::new(7.0, 10.0).unwrap();
        let pairs = build_pseudo_pairs(&batch, &x, &yp, &[8.0, 6.5], Some(gate)).unwrap();
        assert_eq!(pairs.x_prime.flatten_all().unwrap().to_vec1::<f32>().unwrap(), yp.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(pairs.accepted, vec![true, false]);
        let all = build_pseudo_pairs(&batch, &x, &yp, &[f64::NAN, 2.0], None).unwrap();
        assert_eq!(all.accepted, vec![true, true]);
    }

    #[test]
    fn total_loss_adds_components() {
        let a = Tensor::new(0.3f64, &Device::Cpu).unwrap();
        let b = Tensor::new(0.2f64, &Device::Cpu).unwrap();
        assert!((total_loss(&a, Some(&b)).unwrap().to_scalar::<f64>().unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(total_loss(&a, None).unwrap().to_scalar::<f64>().unwrap(), 0.3);
    }
}
