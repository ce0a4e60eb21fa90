//! Checks shared by the integration tests and the acceptance runner. Each returns a
//! short measurement string on success and a description of the failure otherwise.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use ctmar_core::cqa::{
    ce_loss, cqa_loss, cqa_loss_tensor, prob2qua, scl_loss, scl_loss_tensor, MemoryBank, ProbVector, QualityLabel, LAMBDA_SCL,
};
use ctmar_core::metrics::{plcc, srcc, ssim};
use ctmar_core::models::{CqaConfig, CqaNet, MarConfig, MarNet};
use ctmar_core::nn::{Adam, AdamConfig, ParamStore};
use ctmar_core::selftrain::ema_update;
use ctmar_phys::{
    fbp_reconstruct, forward_project, li_interpolate, make_phantom_with, simulate, PhantomOptions, PhantomProfile, ScanGeometry,
    Sinogram, TraceMask,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn fail<T>(msg: String) -> Result<T, String> {
    Err(msg)
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn label(k: u8) -> QualityLabel {
    QualityLabel::new(k).unwrap()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_distribution(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..10).map(|_| (-rng.random::<f64>().max(1e-300).ln()).powf(1.5)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / s).collect()
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, v.len()), &Device::Cpu).unwrap()
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

// ---------------------------------------------------------------- loss analytics

pub fn loss_analytics() -> Check {
    let uniform = ProbVector::new(&[0.1; 10]).map_err(e)?;
    for k in 1..=10 {
        let ce = ce_loss(&uniform, label(k));
        if (ce - 10f64.ln()).abs() > 1e-6 {
            return fail(format!("ce(uniform, {k}) = {ce}"));
        }
    }
    let mut bank = MemoryBank::new(8);
    bank.push(&[1.0, 0.0, 0.0], label(3)).map_err(e)?;
    bank.push(&[0.0, 1.0, 0.0], label(5)).map_err(e)?;
    let scl = scl_loss(&[1.0, 0.0, 0.0], label(3), &bank, 1.0).map_err(e)?.value;
    let closed = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    if (scl - closed).abs() > 1e-6 {
        return fail(format!("scl closed form {scl} vs {closed}"));
    }
    let t = scl_loss_tensor(&row(&[1.0, 0.0, 0.0]), &[label(3)], &bank, 1.0).map_err(e)?;
    let tv = t.to_vec1::<f64>().map_err(e)?[0];
    if (tv - closed).abs() > 1e-6 {
        return fail(format!("batched scl closed form {tv} vs {closed}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bank = MemoryBank::new(32);
    for _ in 0..16 {
        let l = rng.random_range(1..=10u8);
        bank.push(&unit_vec(&mut rng, 6), label(l)).map_err(e)?;
    }
    for _ in 0..10 {
        let p = ProbVector::new(&random_distribution(&mut rng)).map_err(e)?;
        let z = unit_vec(&mut rng, 6);
        let l = label(rng.random_range(1..=10u8));
        let total = cqa_loss(&p, &z, l, &bank, 0.5).map_err(e)?;
        let parts = ce_loss(&p, l) + LAMBDA_SCL * scl_loss(&z, l, &bank, 0.5).map_err(e)?.value;
        if (total - parts).abs() > 1e-6 || LAMBDA_SCL != 0.01 {
            return fail(format!("cqa_loss {total} vs ce + 0.01 scl {parts}"));
        }
    }
    Ok(format!("ce(uniform)=ln10, scl closed form {closed:.9}, composition on 10 draws"))
}

// ---------------------------------------------------------------- gradients

fn random_bank(rng: &mut ChaCha8Rng, d: usize, n: usize, labels: u8) -> MemoryBank {
    let mut bank = MemoryBank::new(n);
    for i in 0..n {
        // Every label appears at least once so each query has positives.
        let l = if (i as u8) < labels { i as u8 + 1 } else { rng.random_range(1..=labels) };
        bank.push(&unit_vec(rng, d), label(l)).unwrap();
    }
    bank
}

/// Autodiff gradients of the batched contrastive and compound losses against central
/// differences of the scalar reference implementations.
pub fn loss_gradients(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = 8;
        let bank = random_bank(&mut rng, d, 12, 4);
        let l = label(rng.random_range(1..=4u8));
        let z = unit_vec(&mut rng, d);
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();

        let zv = candle_core::Var::from_tensor(&row(&z)).map_err(e)?;
        let loss = scl_loss_tensor(zv.as_tensor(), &[l], &bank, 0.5).map_err(e)?.sum_all().map_err(e)?;
        let g = loss.backward().map_err(e)?;
        let ga = g.get(zv.as_tensor()).unwrap().flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?;
        let gn: Vec<f64> = (0..d)
            .map(|i| {
                let (mut a, mut b) = (z.clone(), z.clone());
                a[i] += h;
                b[i] -= h;
                (scl_loss(&a, l, &bank, 0.5).unwrap().value - scl_loss(&b, l, &bank, 0.5).unwrap().value) / (2.0 * h)
            })
            .collect();
        worst = worst.max(max_rel_err(&ga, &gn));

        let lv = candle_core::Var::from_tensor(&row(&logits)).map_err(e)?;
        let zv = candle_core::Var::from_tensor(&row(&z)).map_err(e)?;
        let parts = cqa_loss_tensor(lv.as_tensor(), zv.as_tensor(), &[l], &bank, 0.5).map_err(e)?;
        let g = parts.total.backward().map_err(e)?;
        let mut ga = g.get(lv.as_tensor()).unwrap().flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?;
        ga.extend(g.get(zv.as_tensor()).unwrap().flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?);
        let scalar = |lg: &[f64], zz: &[f64]| cqa_loss(&ProbVector::new(&softmax(lg)).unwrap(), zz, l, &bank, 0.5).unwrap();
        let mut gn = Vec::with_capacity(10 + d);
        for i in 0..10 {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a[i] += h;
            b[i] -= h;
            gn.push((scalar(&a, &z) - scalar(&b, &z)) / (2.0 * h));
        }
        for i in 0..d {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[i] += h;
            b[i] -= h;
            gn.push((scalar(&logits, &a) - scalar(&logits, &b)) / (2.0 * h));
        }
        worst = worst.max(max_rel_err(&ga, &gn));
    }
    if worst < 1e-4 {
        Ok(format!("{instances} instances, max relative error {worst:.2e}"))
    } else {
        fail(format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

fn set_element(store: &ParamStore, name: &str, idx: usize, value: f64) {
    let var = store.get(name).unwrap();
    let mut v = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[idx] = value;
    var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
}

fn get_element(store: &ParamStore, name: &str, idx: usize) -> f64 {
    store.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx]
}

/// Central differences (step 1e-3) on `count` sampled parameters of a network loss.
/// The relative error of each parameter is measured against the largest sampled
/// gradient magnitude, so near-zero entries do not divide by rounding noise.
fn spot_check(store: &ParamStore, loss: &dyn Fn() -> Tensor, count: usize, seed: u64) -> Result<f64, String> {
    let eps = 1e-3;
    let grads = loss().backward().map_err(e)?;
    let names: Vec<(String, usize)> = store.iter().map(|(n, v)| (n.to_string(), v.elem_count())).collect();
    let total: usize = names.iter().map(|(_, c)| c).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let mut flat = rng.random_range(0..total);
        let (name, idx) = names
            .iter()
            .find_map(|(n, c)| if flat < *c { Some((n.clone(), flat)) } else { flat -= c; None })
            .unwrap();
        let var = store.get(&name).unwrap();
        let g = grads
            .get(var.as_tensor())
            .map(|t| t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx])
            .unwrap_or(0.0);
        let orig = get_element(store, &name, idx);
        set_element(store, &name, idx, orig + eps);
        let up = loss().to_scalar::<f64>().map_err(e)?;
        set_element(store, &name, idx, orig - eps);
        let down = loss().to_scalar::<f64>().map_err(e)?;
        set_element(store, &name, idx, orig);
        analytic.push(g);
        numeric.push((up - down) / (2.0 * eps));
    }
    Ok(max_rel_err(&analytic, &numeric))
}

pub fn small_mar(seed: u64) -> MarNet {
    MarNet::new(MarConfig { depth: 3, base_width: 4, ..Default::default() }, seed, DType::F64).unwrap()
}

pub fn small_cqa_config(positional_bias: bool) -> CqaConfig {
    CqaConfig {
        image_size: 16,
        embed_dims: [4, 8, 8],
        heads: [1, 2, 2],
        blocks_per_scale: 1,
        window: 2,
        mlp_ratio: 2,
        head_hidden: 8,
        positional_bias,
    }
}

pub fn random_images(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor {
    let v: Vec<f64> = (0..n * side * side).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(v, (n, 1, side, side), &Device::Cpu).unwrap()
}

/// Spot check on the desk network with simulated CT slices as input and their clean
/// counterparts as target.
pub fn mar_gradient_spot_check() -> Check {
    let mut cfg = desk_config(0);
    cfg.dataset.sim_train = 2;
    let split = ctmar_core::data::synthesize_split(&cfg, ctmar_core::data::SplitKind::SimTrain).map_err(e)?;
    let batch = ctmar_core::selftrain::Batch::from_split(&split, &[0, 1], DType::F64, false, true).map_err(e)?;
    let y = batch.y.clone().unwrap();
    let net = MarNet::new(cfg.mar_config(), 3, DType::F64).map_err(e)?;
    let loss = || (net.forward(&batch.x, None).unwrap() - &y).unwrap().abs().unwrap().mean_all().unwrap();
    let err = spot_check(net.store(), &loss, 64, 1)?;
    if err < 1e-2 {
        Ok(format!("MAR 64 parameters, max relative error {err:.2e}"))
    } else {
        fail(format!("MAR max relative error {err:.2e} >= 1e-2"))
    }
}

pub fn cqa_gradient_spot_check() -> Check {
    let net = CqaNet::new(small_cqa_config(true), 4, DType::F64).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_images(&mut rng, 3, 16);
    let labels = [label(2), label(7), label(2)];
    let bank = random_bank(&mut rng, net.config().latent_dim(), 10, 8);
    let loss = || {
        let out = net.forward(&x).unwrap();
        cqa_loss_tensor(&out.logits, &out.latent, &labels, &bank, 0.5).unwrap().total
    };
    let err = spot_check(net.store(), &loss, 64, 2)?;
    if err < 1e-2 {
        Ok(format!("CQA 64 parameters, max relative error {err:.2e}"))
    } else {
        fail(format!("CQA max relative error {err:.2e} >= 1e-2"))
    }
}

/// Names of parameter tensors left unchanged by one Adam step.
pub fn frozen_after_one_step(store: &ParamStore, loss: Tensor) -> Vec<String> {
    let before: Vec<Vec<f64>> = store.iter().map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()).collect();
    let mut opt = Adam::new(store, AdamConfig { lr: 1e-3, ..Default::default() }).unwrap();
    opt.step(&loss.backward().unwrap()).unwrap();
    store
        .iter()
        .zip(before)
        .filter(|((_, v), b)| v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap() == *b)
        .map(|((n, _), _)| n.to_string())
        .collect()
}

pub fn no_dead_branches() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mar = small_mar(5);
    let x = random_images(&mut rng, 2, 16);
    let y = random_images(&mut rng, 2, 16);
    let loss = (mar.forward(&x, None).map_err(e)? - &y).map_err(e)?.abs().map_err(e)?.mean_all().map_err(e)?;
    let dead = frozen_after_one_step(mar.store(), loss);
    if !dead.is_empty() {
        return fail(format!("MAR parameters without gradient: {dead:?}"));
    }
    let cqa = CqaNet::new(small_cqa_config(true), 6, DType::F64).map_err(e)?;
    let labels = [label(1), label(4), label(9), label(4)];
    let bank = random_bank(&mut rng, cqa.config().latent_dim(), 12, 10);
    let out = cqa.forward(&random_images(&mut rng, 4, 16)).map_err(e)?;
    let loss = cqa_loss_tensor(&out.logits, &out.latent, &labels, &bank, 0.5).map_err(e)?.total;
    let dead = frozen_after_one_step(cqa.store(), loss);
    if !dead.is_empty() {
        return fail(format!("CQA parameters without gradient: {dead:?}"));
    }
    Ok(format!("{} MAR and {} CQA tensors all updated", mar.store().len(), cqa.store().len()))
}

pub fn gradient_suite() -> Check {
    let parts = [loss_gradients(10)?, mar_gradient_spot_check()?, cqa_gradient_spot_check()?];
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- prob2qua

pub fn prob2qua_properties(n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for t in 0..n {
        let p = random_distribution(&mut rng);
        let r = random_distribution(&mut rng);
        let qp = prob2qua(&ProbVector::new(&p).map_err(e)?);
        let qr = prob2qua(&ProbVector::new(&r).map_err(e)?);
        if !(1.0..=10.0).contains(&qp) {
            return fail(format!("draw {t}: quality {qp} outside [1, 10]"));
        }
        let a: f64 = rng.random();
        let mix: Vec<f64> = p.iter().zip(&r).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let qm = prob2qua(&ProbVector::new(&mix).map_err(e)?);
        if (qm - (a * qp + (1.0 - a) * qr)).abs() > 1e-9 {
            return fail(format!("draw {t}: not affine ({qm} vs {})", a * qp + (1.0 - a) * qr));
        }
        let i = rng.random_range(0..9);
        let j = rng.random_range(i + 1..10);
        let delta = p[i] * rng.random_range(0.01..1.0);
        let mut shifted = p.clone();
        shifted[i] -= delta;
        shifted[j] += delta;
        let qs = prob2qua(&ProbVector::new(&shifted).map_err(e)?);
        if qs <= qp {
            return fail(format!("draw {t}: moving mass {delta} from class {} to {} gave {qs} <= {qp}", i + 1, j + 1));
        }
    }
    Ok(format!("{n} distributions: bounds, affinity, monotone mass shift"))
}

// ---------------------------------------------------------------- physics

fn disc(size: usize, r_px: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((size, size), |(r, col)| {
        let (y, x) = (r as f64 - c, col as f64 - c);
        if x * x + y * y <= r_px * r_px {
            1.0
        } else {
            0.0
        }
    })
}

pub fn projector_linearity() -> Check {
    let g = ScanGeometry::parallel_beam(64, 0.5, 90, 96, 0.5).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = Array2::from_shape_fn((64, 64), |_| rng.random_range(-1.0..1.0));
    let b = Array2::from_shape_fn((64, 64), |_| rng.random_range(-1.0..1.0));
    let (s, t) = (1.7, -0.6);
    let lhs = forward_project(&(&a * s + &b * t), &g).map_err(e)?.data;
    let rhs = forward_project(&a, &g).map_err(e)?.data * s + forward_project(&b, &g).map_err(e)?.data * t;
    let err = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if err < 1e-9 {
        Ok(format!("linearity max error {err:.1e}"))
    } else {
        fail(format!("projector linearity error {err:.3e}"))
    }
}

pub fn disc_mass_conservation() -> Check {
    let g = ScanGeometry::parallel_beam(128, 0.25, 180, 192, 0.25).map_err(e)?;
    let r_px = 20.0;
    let radius = r_px * g.pixel_spacing;
    let expected = std::f64::consts::PI * radius * radius / g.detector_spacing;
    let sino = forward_project(&disc(128, r_px), &g).map_err(e)?;
    let worst = (0..g.n_angles).map(|a| (sino.data.row(a).sum() - expected).abs() / expected).fold(0.0, f64::max);
    if worst < 0.02 {
        Ok(format!("disc mass error {:.2}%", 100.0 * worst))
    } else {
        fail(format!("disc mass error {:.2}% in some view", 100.0 * worst))
    }
}

pub fn fbp_round_trip() -> Check {
    let g = ScanGeometry::parallel_beam(128, 0.25, 180, 192, 0.25).map_err(e)?;
    let p = make_phantom_with(0, &PhantomOptions::new(PhantomProfile::TorsoLike, 128).with_metal_count(0)).map_err(e)?;
    let mu = p.tissue_hu.mapv(|h| simulate::mu_ref_from_hu(h).max(0.0));
    let rec = fbp_reconstruct(&forward_project(&mu, &g).map_err(e)?).map_err(e)?;
    let (mut se, mut ss, mut n) = (0.0, 0.0, 0.0);
    for ((r, m), &inside) in rec.iter().zip(&mu).zip(&p.roi_mask) {
        if inside {
            se += (r - m) * (r - m);
            ss += m * m;
            n += 1.0;
        }
    }
    let rel = (se / n).sqrt() / (ss / n).sqrt();
    if rel < 0.05 {
        Ok(format!("FBP relative RMSE {:.2}%", 100.0 * rel))
    } else {
        fail(format!("FBP relative RMSE {:.2}%", 100.0 * rel))
    }
}

pub fn li_cases() -> Check {
    let g = ScanGeometry::parallel_beam(32, 1.0, 4, 48, 1.0).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let data = Array2::from_shape_fn((4, 48), |_| rng.random_range(0.0..5.0));
    let s = Sinogram::new(data.clone(), &g).map_err(e)?;
    if li_interpolate(&s, &TraceMask::empty(&g)).map_err(e)? != s {
        return fail("empty trace changed the sinogram".into());
    }
    let mask = Array2::from_shape_fn((4, 48), |(a, d)| (10 + a..20 + 2 * a).contains(&d));
    let trace = TraceMask { mask: mask.clone() };
    let once = li_interpolate(&s, &trace).map_err(e)?;
    if li_interpolate(&once, &trace).map_err(e)? != once {
        return fail("LI is not idempotent".into());
    }
    if once.data.iter().zip(&data).zip(&mask).any(|((o, d), &m)| !m && o != d) {
        return fail("LI changed untraced cells".into());
    }
    let ramp = Array2::from_shape_fn((4, 48), |(a, d)| 0.5 * d as f64 - a as f64);
    let filled = li_interpolate(&Sinogram::new(ramp.clone(), &g).map_err(e)?, &trace).map_err(e)?;
    let err = (&filled.data - &ramp).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if err > 1e-12 {
        return fail(format!("ramp not recovered exactly, error {err:.2e}"));
    }
    Ok("LI identity, idempotence, exact ramp".into())
}

pub fn physics_suite() -> Check {
    let parts = [projector_linearity()?, disc_mass_conservation()?, fbp_round_trip()?, li_cases()?];
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- EMA

fn scalar_store(v: &[f64]) -> ParamStore {
    let mut s = ParamStore::new(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    s.create("p", &[v.len()], ctmar_core::nn::Init::Zeros, &mut rng).unwrap();
    s.get("p").unwrap().set(&Tensor::new(v, &Device::Cpu).unwrap()).unwrap();
    s
}

pub fn ema_convergence() -> Check {
    let eta = ctmar_core::config::TrainConfig::default().ema_decay;
    if eta != 0.999 {
        return fail(format!("default decay {eta}, expected 0.999"));
    }
    let probe_t = scalar_store(&[1.0]);
    ema_update(&probe_t, &scalar_store(&[0.0]), eta).map_err(e)?;
    let v = probe_t.flat_values().map_err(e)?[0];
    if (v - 0.999).abs() > 1e-12 {
        return fail(format!("probe gave {v}"));
    }
    let phi0 = [1.0, -2.5, 0.3];
    let theta = [0.0, 4.0, 0.3];
    for eta in [0.999, 0.9, 0.5] {
        let teacher = scalar_store(&phi0);
        let student = scalar_store(&theta);
        for k in 1..=100 {
            ema_update(&teacher, &student, eta).map_err(e)?;
            let phi = teacher.flat_values().map_err(e)?;
            for i in 0..3 {
                let expected = (phi0[i] - theta[i]).abs() * eta.powi(k);
                if ((phi[i] - theta[i]).abs() - expected).abs() > 1e-9 {
                    return fail(format!("eta {eta} step {k}: |phi - theta| {} vs {expected}", (phi[i] - theta[i]).abs()));
                }
            }
        }
    }
    Ok("probe 0.999; |phi - theta| shrinks by eta per step over 100 steps".into())
}

// ---------------------------------------------------------------- metric oracles

/// Direct 2-D windowed SSIM: for every 11x11 window free of metal, Gaussian-weighted
/// moments are summed explicitly.
pub fn ssim_brute(x: &Array2<f64>, y: &Array2<f64>, metal: &Array2<bool>) -> f64 {
    let (h, w) = x.dim();
    let (win, sigma) = (11usize, 1.5f64);
    let mut g = vec![0.0; win];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let (mut total, mut count) = (0.0, 0);
    for i in 0..=h - win {
        for j in 0..=w - win {
            if (0..win).any(|u| (0..win).any(|v| metal[[i + u, j + v]])) {
                continue;
            }
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    let wt = g[u] * g[v] / (gs * gs);
                    let (a, b) = (x[[i + u, j + v]], y[[i + u, j + v]]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn rank_brute(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as f64;
            let ties = v.iter().filter(|&&b| b == a).count() as f64;
            below + (ties + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_brute(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst_ssim: f64 = 0.0;
    for t in 0..20 {
        let side = 24 + 4 * (t % 3);
        let x = Array2::from_shape_fn((side, side), |_| rng.random::<f64>());
        let noise = 0.05 + 0.3 * rng.random::<f64>();
        let y = x.mapv(|v| (v + noise * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
        let (cr, cc) = (rng.random_range(0..side), rng.random_range(0..side));
        let metal = Array2::from_shape_fn((side, side), |(r, c)| t % 2 == 1 && r.abs_diff(cr) <= 1 && c.abs_diff(cc) <= 1);
        let fast = ssim(x.view(), y.view(), metal.view()).map_err(e)?;
        worst_ssim = worst_ssim.max((fast - ssim_brute(&x, &y, &metal)).abs());
    }
    if worst_ssim > 1e-6 {
        return fail(format!("SSIM deviates from brute force by {worst_ssim:.2e}"));
    }
    let mut worst_corr: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(5..100);
        let a: Vec<f64> = (0..n).map(|_| (rng.random_range(0..12) as f64) * 0.5).collect();
        let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-2.0..2.0)).collect();
        let p = plcc(&a, &b).map_err(e)?.ok_or("constant input")?;
        let s = srcc(&a, &b).map_err(e)?.ok_or("constant input")?;
        worst_corr = worst_corr.max((p - pearson_brute(&a, &b)).abs());
        worst_corr = worst_corr.max((s - pearson_brute(&rank_brute(&a), &rank_brute(&b))).abs());
    }
    if worst_corr > 1e-9 {
        return fail(format!("SRCC/PLCC deviate from brute force by {worst_corr:.2e}"));
    }
    Ok(format!("SSIM max deviation {worst_ssim:.1e} on 20 pairs; SRCC/PLCC {worst_corr:.1e}"))
}

// ---------------------------------------------------------------- desk study

pub fn desk_config(seed: u64) -> ctmar_core::config::ExperimentConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = ctmar_core::config::ExperimentConfig::load(&path).unwrap();
    cfg.seeds.data = seed;
    cfg.seeds.model = seed;
    cfg.seeds.train = seed;
    cfg
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub name: String,
    pub final_psnr: f64,
    pub gate_checked: usize,
    pub gate_violations: usize,
    pub quality_by_epoch: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub seed: u64,
    pub cqa_srcc: Option<f64>,
    pub cqa_plcc: Option<f64>,
    pub variants: Vec<VariantResult>,
}

impl StudyResult {
    pub fn psnr(&self, name: &str) -> f64 {
        self.variants.iter().find(|v| v.name == name).map(|v| v.final_psnr).unwrap_or(f64::NAN)
    }

    pub fn variant(&self, name: &str) -> &VariantResult {
        self.variants.iter().find(|v| v.name == name).unwrap()
    }
}

/// Data, warm start, CQA training and the four ablation rows for one seed.
pub fn desk_study(seed: u64) -> Result<StudyResult, String> {
    use ctmar_core::pipeline::{ablation_variants, run_variant, train_cqa_model, warm_start};
    let cfg = desk_config(seed);
    let data = ctmar_core::data::Datasets::synthesize(&cfg).map_err(e)?;
    let warm = warm_start(&cfg, &data.sim_train).map_err(e)?;
    let (split, _) = ctmar_core::cqa::synthesize_cqa_split(&cfg).map_err(e)?;
    let cqa = train_cqa_model(&cfg, &split, Some(&warm.under_trained)).map_err(e)?;
    let last = cqa.log.last().ok_or("CQA log is empty")?;
    let mut variants = Vec::new();
    for v in ablation_variants(&cfg) {
        let tr = run_variant(&cfg, &data, &warm, Some(&cqa.net), &v).map_err(e)?;
        let final_psnr = tr.stats.last().and_then(|s| s.eval_psnr_out).ok_or("no final evaluation")?;
        variants.push(VariantResult {
            name: v.name.clone(),
            final_psnr,
            gate_checked: tr.stats.iter().map(|s| s.gate_checked).sum(),
            gate_violations: tr.stats.iter().map(|s| s.gate_violations).sum(),
            quality_by_epoch: tr.stats.iter().map(|s| s.mean_pseudo_quality).collect(),
        });
    }
    Ok(StudyResult { seed, cqa_srcc: last.srcc, cqa_plcc: last.plcc, variants })
}

pub fn describe(s: &StudyResult) -> String {
    let rows: Vec<String> = s.variants.iter().map(|v| format!("{} {:.2}", v.name, v.final_psnr)).collect();
    format!(
        "seed {}: srcc {:.3} plcc {:.3}; {}",
        s.seed,
        s.cqa_srcc.unwrap_or(f64::NAN),
        s.cqa_plcc.unwrap_or(f64::NAN),
        rows.join(", ")
    )
}

pub fn gate_soundness(studies: &[StudyResult]) -> Check {
    let checked: usize = studies.iter().map(|s| s.variant("reference").gate_checked).sum();
    let bad: usize = studies.iter().map(|s| s.variant("reference").gate_violations).sum();
    if bad == 0 {
        Ok(format!("{checked} nonzero clinical contributions, all inside the quality range"))
    } else {
        fail(format!("{bad} of {checked} contributions outside the quality range"))
    }
}

pub fn cqa_alignment(studies: &[StudyResult]) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for s in studies {
        let (r, p) = (s.cqa_srcc.unwrap_or(f64::NAN), s.cqa_plcc.unwrap_or(f64::NAN));
        ok &= r >= 0.90 && p >= 0.90;
        parts.push(format!("seed {} srcc {r:.3} plcc {p:.3}", s.seed));
    }
    let msg = parts.join("; ");
    if ok {
        Ok(msg)
    } else {
        fail(msg)
    }
}

pub fn ablation_ordering(studies: &[StudyResult]) -> Check {
    let margin = 0.3;
    let mut wins = 0;
    let mut parts = Vec::new();
    for s in studies {
        let (r, c, m, sup) = (s.psnr("reference"), s.psnr("no-cqa"), s.psnr("no-ema"), s.psnr("supervised"));
        let ok = r - c >= margin && c - m >= margin && r - sup >= margin;
        wins += ok as usize;
        parts.push(format!("seed {} ref {r:.2} no-cqa {c:.2} no-ema {m:.2} sup {sup:.2}", s.seed));
    }
    let msg = format!("{wins}/{} seeds ordered; {}", studies.len(), parts.join("; "));
    if wins >= 2 {
        Ok(msg)
    } else {
        fail(msg)
    }
}

pub fn pseudo_quality_trend(studies: &[StudyResult]) -> Check {
    let mut wins = 0;
    let mut parts = Vec::new();
    for s in studies {
        let q = &s.variant("reference").quality_by_epoch;
        let (first, last) = (q.first().copied().flatten(), q.last().copied().flatten());
        let ok = matches!((first, last), (Some(a), Some(b)) if b > a);
        wins += ok as usize;
        parts.push(format!("seed {} {:.3} -> {:.3}", s.seed, first.unwrap_or(f64::NAN), last.unwrap_or(f64::NAN)));
    }
    let msg = format!("{wins}/{} seeds rising; {}", studies.len(), parts.join("; "));
    if wins >= 2 {
        Ok(msg)
    } else {
        fail(msg)
    }
}

// ---------------------------------------------------------------- attention

/// Largest deviation between attention on permuted tokens and permuted attention output.
pub fn attention_permutation_gap(positional_bias: bool) -> f64 {
    let net = CqaNet::new(small_cqa_config(positional_bias), 8, DType::F64).unwrap();
    let attn = net.block(0, 0).attention();
    let (windows, n, c) = (3, 4, net.config().embed_dims[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let v: Vec<f64> = (0..windows * n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tokens = Tensor::from_vec(v, (windows, n, c), &Device::Cpu).unwrap();
    let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
    let a = attn.forward_tokens(&tokens.index_select(&perm, 1).unwrap()).unwrap();
    let b = attn.forward_tokens(&tokens).unwrap().index_select(&perm, 1).unwrap();
    (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
}
