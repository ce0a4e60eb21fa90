//! Image-quality and correlation metrics on normalised images with metal excluded.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(pred: ArrayView2<f64>, gt: ArrayView2<f64>, metal: ArrayView2<bool>) -> Result<()> {
    if pred.dim() != gt.dim() || pred.dim() != metal.dim() {
        return invalid(format!("shape mismatch: {:?} {:?} {:?}", pred.dim(), gt.dim(), metal.dim()));
    }
    Ok(())
}

/// Mean squared error over non-metal pixels.
pub fn mse(pred: ArrayView2<f64>, gt: ArrayView2<f64>, metal: ArrayView2<bool>) -> Result<f64> {
    check_shapes(pred, gt, metal)?;
    let (mut sum, mut n) = (0.0, 0usize);
    Zip::from(pred).and(gt).and(metal).for_each(|&p, &g, &m| {
        if !m {
            sum += (p - g) * (p - g);
            n += 1;
        }
    });
    if n == 0 {
        return invalid("no non-metal pixels");
    }
    Ok(sum / n as f64)
}

/// Mean absolute error over non-metal pixels.
pub fn mae(pred: ArrayView2<f64>, gt: ArrayView2<f64>, metal: ArrayView2<bool>) -> Result<f64> {
    check_shapes(pred, gt, metal)?;
    let (mut sum, mut n) = (0.0, 0usize);
    Zip::from(pred).and(gt).and(metal).for_each(|&p, &g, &m| {
        if !m {
            sum += (p - g).abs();
            n += 1;
        }
    });
    if n == 0 {
        return invalid("no non-metal pixels");
    }
    Ok(sum / n as f64)
}

/// PSNR in dB with peak 1. Identical images give `f64::INFINITY`.
pub fn psnr(pred: ArrayView2<f64>, gt: ArrayView2<f64>, metal: ArrayView2<bool>) -> Result<f64> {
    let e = mse(pred, gt, metal)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / e).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable Gaussian filtering.
fn filter_valid(img: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..SSIM_WINDOW).map(|t| k[t] * img[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..SSIM_WINDOW).map(|t| k[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Single-scale SSIM averaged over 11x11 windows that contain no metal pixel.
pub fn ssim(pred: ArrayView2<f64>, gt: ArrayView2<f64>, metal: ArrayView2<bool>) -> Result<f64> {
    check_shapes(pred, gt, metal)?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return invalid(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"));
    }
    let k = gaussian_kernel();
    let x = pred.to_owned();
    let y = gt.to_owned();
    let mu_x = filter_valid(&x, &k);
    let mu_y = filter_valid(&y, &k);
    let sxx = filter_valid(&(&x * &x), &k);
    let syy = filter_valid(&(&y * &y), &k);
    let sxy = filter_valid(&(&x * &y), &k);

    // Windows touching metal are found with a 2D prefix sum over the mask.
    let mut prefix = Array2::<usize>::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            prefix[[i + 1, j + 1]] =
                metal[[i, j]] as usize + prefix[[i, j + 1]] + prefix[[i + 1, j]] - prefix[[i, j]];
        }
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..mu_x.nrows() {
        for j in 0..mu_x.ncols() {
            let (i1, j1) = (i + SSIM_WINDOW, j + SSIM_WINDOW);
            let metal_count = prefix[[i1, j1]] + prefix[[i, j]] - prefix[[i, j1]] - prefix[[i1, j]];
            if metal_count > 0 {
                continue;
            }
            let (mx, my) = (mu_x[[i, j]], mu_y[[i, j]]);
            let vx = sxx[[i, j]] - mx * mx;
            let vy = syy[[i, j]] - my * my;
            let cxy = sxy[[i, j]] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    if n == 0 {
        return invalid("every SSIM window overlaps metal");
    }
    Ok(sum / n as f64)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn check_scores(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return invalid(format!("score lists differ in length: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return invalid("need at least two scores");
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return invalid("non-finite score");
    }
    Ok(())
}

/// Ranks starting at 1, tied values share their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson linear correlation. `None` when either input is constant.
pub fn plcc(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    check_scores(pred, truth)?;
    Ok(pearson(pred, truth))
}

/// Spearman rank correlation with mean-rank ties. `None` when either input is constant.
pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    check_scores(pred, truth)?;
    Ok(pearson(&average_ranks(pred), &average_ranks(truth)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub domain: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub cqa_quality: Option<f64>,
}

/// Per-sample metrics plus their aggregate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub cqa_quality: Option<f64>,
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    /// Means over the samples of one domain, or all samples when `domain` is `None`.
    ///
    /// Infinite PSNR values are excluded from the PSNR mean.
    pub fn aggregate(&self, domain: Option<&str>) -> Option<Aggregate> {
        let rows: Vec<&SampleMetrics> =
            self.samples.iter().filter(|s| domain.is_none_or(|d| s.domain == d)).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let finite: Vec<f64> = rows.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
        let psnr = if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        let cqa = if rows.iter().all(|s| s.cqa_quality.is_some()) {
            Some(rows.iter().map(|s| s.cqa_quality.unwrap()).sum::<f64>() / n)
        } else {
            None
        };
        Some(Aggregate {
            count: rows.len(),
            psnr,
            ssim: rows.iter().map(|s| s.ssim).sum::<f64>() / n,
            mae: rows.iter().map(|s| s.mae).sum::<f64>() / n,
            cqa_quality: cqa,
        })
    }

    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.domain) {
                out.push(s.domain.clone());
            }
        }
        out
    }

    /// CSV with one row per sample and a final `aggregate` row.
    pub fn write_csv(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "# config_hash: {config_hash}").expect("write to vec");
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let to_csv = |e: csv::Error| crate::CoreError::Serde(e.to_string());
            w.write_record(["sample_id", "domain", "psnr", "ssim", "mae", "cqa_quality"]).map_err(to_csv)?;
            for s in &self.samples {
                let q = s.cqa_quality.map(fmt_value).unwrap_or_default();
                w.write_record([&s.sample_id, &s.domain, &fmt_value(s.psnr), &fmt_value(s.ssim), &fmt_value(s.mae), &q])
                    .map_err(to_csv)?;
            }
            if let Some(a) = self.aggregate(None) {
                let q = a.cqa_quality.map(fmt_value).unwrap_or_default();
                w.write_record(["aggregate", "all", &fmt_value(a.psnr), &fmt_value(a.ssim), &fmt_value(a.mae), &q])
                    .map_err(to_csv)?;
            }
            w.flush().map_err(io_err(path))?;
        }
        std::fs::write(path, buf).map_err(io_err(path))
    }

    /// Plain-text table with one line per domain.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<12} {:>6} {:>10} {:>9} {:>9} {:>8}\n", "domain", "n", "PSNR(dB)", "SSIM(%)", "MAE", "CQA");
        for d in self.domains() {
            let a = self.aggregate(Some(&d)).expect("domain has samples");
            let q = a.cqa_quality.map(|q| format!("{q:.3}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<12} {:>6} {:>10.3} {:>9.2} {:>9.5} {:>8}\n",
                d,
                a.count,
                a.psnr,
                a.ssim * 100.0,
                a.mae,
                q
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_metal(n: usize) -> Array2<bool> {
        Array2::from_elem((n, n), false)
    }

    fn random_image(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |_| rng.random::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let gt = Array2::from_elem((8, 8), 0.5);
        let m = no_metal(8);
        assert_eq!(psnr(gt.view(), gt.view(), m.view()).unwrap(), f64::INFINITY);
        let p = &gt + 0.1;
        assert!((psnr(p.view(), gt.view(), m.view()).unwrap() - 20.0).abs() < 1e-9);
        let p = &gt + 0.01;
        assert!((psnr(p.view(), gt.view(), m.view()).unwrap() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_ignores_metal_pixels() {
        let gt = Array2::from_elem((8, 8), 0.5);
        let mut p = gt.clone();
        p[[3, 3]] = 1.0;
        let mut m = no_metal(8);
        m[[3, 3]] = true;
        assert_eq!(psnr(p.view(), gt.view(), m.view()).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_image(32, &mut rng);
        let noise = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>() * 2.0 - 1.0);
        let m = no_metal(32);
        let vals: Vec<f64> = [0.01, 0.02, 0.05]
            .iter()
            .map(|a| psnr((&gt + &(&noise * *a)).view(), gt.view(), m.view()).unwrap())
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2]);
    }

    #[test]
    fn ssim_identity_constant_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(20, &mut rng);
        let b = random_image(20, &mut rng);
        let m = no_metal(20);
        assert!((ssim(a.view(), a.view(), m.view()).unwrap() - 1.0).abs() < 1e-12);
        let c = Array2::from_elem((20, 20), 0.3);
        assert!((ssim(c.view(), c.view(), m.view()).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(a.view(), b.view(), m.view()).unwrap();
        let ba = ssim(b.view(), a.view(), m.view()).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let inv = a.mapv(|v| 1.0 - v);
        assert!(ssim(inv.view(), a.view(), m.view()).unwrap() < 1.0);
    }

    #[test]
    fn ssim_rejects_small_images_and_all_metal() {
        let a = Array2::from_elem((10, 10), 0.0);
        assert!(ssim(a.view(), a.view(), no_metal(10).view()).is_err());
        let b = Array2::from_elem((12, 12), 0.0);
        let mut m = no_metal(12);
        m[[5, 5]] = true;
        assert!(ssim(b.view(), b.view(), m.view()).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0, 2.0]), vec![4.0, 1.0, 2.5, 2.5]);
    }

    #[test]
    fn correlation_examples() {
        assert!((srcc(&[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0]).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!((srcc(&[0.3, 0.2, 0.1], &[1.0, 2.0, 3.0]).unwrap().unwrap() + 1.0).abs() < 1e-12);
        assert!((srcc(&[3.0, 3.0, 5.0], &[1.0, 1.0, 2.0]).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let t = [1.0, 4.0, 2.0, 8.0];
        let p: Vec<f64> = t.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((plcc(&p, &t).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let n: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((plcc(&n, &t).unwrap().unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(plcc(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
        assert_eq!(srcc(&[1.0, 2.0], &[5.0, 5.0]).unwrap(), None);
        assert!(plcc(&[1.0], &[1.0]).is_err());
        assert!(srcc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn srcc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let ta: Vec<f64> = a.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        let r0 = srcc(&a, &b).unwrap().unwrap();
        assert!((srcc(&ta, &b).unwrap().unwrap() - r0).abs() < 1e-12);
        let pa: Vec<f64> = a.iter().map(|v| 5.0 * v + 2.0).collect();
        assert!((plcc(&pa, &b).unwrap().unwrap() - plcc(&a, &b).unwrap().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_csv_and_summary() {
        let report = MetricReport {
            samples: vec![
                SampleMetrics { sample_id: "a".into(), domain: "sim".into(), psnr: f64::INFINITY, ssim: 1.0, mae: 0.0, cqa_quality: None },
                SampleMetrics { sample_id: "b".into(), domain: "cli".into(), psnr: 30.0, ssim: 0.9, mae: 0.01, cqa_quality: None },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report.write_csv(&path, "abc").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash: abc");
        assert!(lines[2].contains(",inf,"));
        assert!(lines.last().unwrap().starts_with("aggregate,"));
        let table = report.summary_table();
        assert!(table.contains("sim") && table.contains("cli"));
    }
}
