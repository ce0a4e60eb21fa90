//! The annotated CQA image set: graded corruptions of both domains labelled by the oracle.

use ctmar_phys::par::map_indexed;
use ctmar_phys::DomainTag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dqaug::{dqaug_mixup, sample_mixup_lambda};
use super::loss::QualityLabel;
use super::oracle::{roi_mae, QualityOracle};
use crate::config::ExperimentConfig;
use crate::data::{channel_files, derive_seed, mask_vec, simulate_one, to_f32, Channel, Image, Manifest, Sample, Split, SplitKind};
use crate::error::{invalid, Result};

/// Where a CQA label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Oracle applied to an image with a paired reference.
    OraclePaired,
    /// Metal-free reference image, top quality by rule.
    OracleRule,
    /// MixUp of two labelled images.
    MixupDerived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Artifact,
    Li,
    Blend,
    Clean,
    Rule,
    Mixup,
}

fn draw_kind(u: f64) -> Kind {
    match u {
        u if u < 0.15 => Kind::Artifact,
        u if u < 0.25 => Kind::Li,
        u if u < 0.70 => Kind::Blend,
        u if u < 0.80 => Kind::Clean,
        u if u < 0.90 => Kind::Rule,
        _ => Kind::Mixup,
    }
}

/// Blend strength with density rising towards full corruption.
fn blend_strength(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>().sqrt()
}

/// `gt + lambda * (src - gt)`, the graded corruption used for calibration and blends.
pub fn blend_towards(gt: &[f32], src: &[f32], lambda: f64) -> Image {
    gt.iter().zip(src).map(|(&g, &s)| (g as f64 + lambda * (s as f64 - g as f64)) as f32).collect()
}

const CHANNELS: [Channel; 6] = [Channel::Assessed, Channel::Artifact, Channel::Clean, Channel::Li, Channel::Metal, Channel::Roi];

/// Synthesizes the CQA split, calibrating the oracle on its own paired sources.
pub fn synthesize_cqa_split(cfg: &ExperimentConfig) -> Result<(Split, QualityOracle)> {
    let n = cfg.dataset.cqa;
    if n < 2 {
        return invalid("the CQA split needs at least two samples");
    }
    let stream = SplitKind::Cqa as u64 + 1;
    let kinds: Vec<Kind> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds.data, stream + 100, i as u64));
            draw_kind(r.random())
        })
        .collect();
    let geo_sim = cfg.simulated.geometry(cfg.image_size, cfg.fov_cm)?;
    let geo_cli = cfg.clinical.geometry(cfg.image_size, cfg.fov_cm)?;
    let scans = map_indexed(n, |i| {
        let ps = derive_seed(cfg.seeds.data, stream, 2 * i as u64);
        let ns = derive_seed(cfg.seeds.data, stream, 2 * i as u64 + 1);
        let (domain, tag, geo) = if i % 2 == 0 {
            (&cfg.simulated, DomainTag::Simulated, &geo_sim)
        } else {
            (&cfg.clinical, DomainTag::Clinical, &geo_cli)
        };
        let metal = if kinds[i] == Kind::Rule { 0 } else { 1 + (ps % 4) as usize };
        simulate_one(domain, tag, geo, cfg.image_size, format!("cqa-{i:05}"), ps, ns, Some(metal))
    });
    let mut entries = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for scan in scans {
        let scan = scan?;
        let p = &scan.pair;
        samples.push(Sample {
            id: scan.entry.id.clone(),
            artifact: Some(to_f32(&p.artifact_image)),
            clean: Some(to_f32(&p.clean_image)),
            li: Some(to_f32(&p.li_image)),
            metal: Some(mask_vec(&p.metal_mask)),
            roi: Some(mask_vec(&p.roi_mask)),
            ..Default::default()
        });
        entries.push(scan.entry);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds.data, stream + 200, 0));
    let paired: Vec<usize> = (0..n).filter(|&i| kinds[i] != Kind::Rule).collect();
    if paired.is_empty() {
        return invalid("no paired samples available for oracle calibration");
    }
    let mut errors = Vec::with_capacity(cfg.dataset.calibration_pairs);
    for _ in 0..cfg.dataset.calibration_pairs {
        let s = &samples[paired[rng.random_range(0..paired.len())]];
        let src = if rng.random::<bool>() { s.artifact.as_ref() } else { s.li.as_ref() }.unwrap();
        let gt = s.clean.as_ref().unwrap();
        let lambda = blend_strength(&mut rng);
        errors.push(roi_mae(&blend_towards(gt, src, lambda), gt, s.roi.as_ref().unwrap())?);
    }
    let oracle = QualityOracle::calibrate(&errors)?;

    // First pass: everything except MixUp; second pass mixes with an earlier labelled sample.
    for i in 0..n {
        let s = &samples[i];
        let (gt, roi) = (s.clean.as_ref().unwrap(), s.roi.as_ref().unwrap());
        let (img, label, prov) = match kinds[i] {
            Kind::Artifact => {
                let a = s.artifact.clone().unwrap();
                let l = oracle.label(&a, gt, roi)?;
                (a, l, Provenance::OraclePaired)
            }
            Kind::Li => {
                let a = s.li.clone().unwrap();
                let l = oracle.label(&a, gt, roi)?;
                (a, l, Provenance::OraclePaired)
            }
            Kind::Blend | Kind::Mixup => {
                let src = if rng.random::<bool>() { s.artifact.as_ref() } else { s.li.as_ref() }.unwrap();
                let a = blend_towards(gt, src, blend_strength(&mut rng));
                let l = oracle.label(&a, gt, roi)?;
                (a, l, Provenance::OraclePaired)
            }
            Kind::Clean => {
                let a = gt.clone();
                let l = oracle.label(&a, gt, roi)?;
                (a, l, Provenance::OraclePaired)
            }
            Kind::Rule => (gt.clone(), QualityLabel::new(10)?, Provenance::OracleRule),
        };
        samples[i].assessed = Some(img);
        samples[i].label = Some(label);
        samples[i].provenance = Some(prov);
    }
    for i in 0..n {
        if kinds[i] != Kind::Mixup {
            continue;
        }
        let j = loop {
            let j = rng.random_range(0..n);
            if j != i && kinds[j] != Kind::Mixup {
                break j;
            }
        };
        let lambda = sample_mixup_lambda(&mut rng, cfg.cqa_train.dqaug.mixup_alpha)?;
        let (a, b) = (&samples[i], &samples[j]);
        let (img, label) = dqaug_mixup(
            (a.assessed.as_ref().unwrap(), a.label.unwrap()),
            (b.assessed.as_ref().unwrap(), b.label.unwrap()),
            lambda,
        )?;
        samples[i].assessed = Some(img);
        samples[i].label = Some(label);
        samples[i].provenance = Some(Provenance::MixupDerived);
    }
    let holdout_every = if cfg.dataset.cqa_holdout > 0.0 { (1.0 / cfg.dataset.cqa_holdout).round() as usize } else { 0 };
    for (i, (e, s)) in entries.iter_mut().zip(&samples).enumerate() {
        e.label = s.label;
        e.provenance = s.provenance;
        e.holdout = Some(holdout_every > 0 && i % holdout_every == holdout_every - 1);
    }
    let manifest = Manifest {
        split: SplitKind::Cqa,
        domain_tag: DomainTag::Clinical,
        spectrum_id: format!("{}+{}", cfg.simulated.spectrum.id, cfg.clinical.spectrum.id),
        geometry: geo_cli,
        image_size: cfg.image_size,
        data_seed: cfg.seeds.data,
        config_hash: cfg.hash(),
        files: channel_files(&CHANNELS),
        oracle_thresholds: Some(oracle.thresholds().to_vec()),
        samples: entries,
    };
    Ok((Split { manifest, samples }, oracle))
}

/// Reads the frozen oracle table from a CQA manifest.
pub fn oracle_from_split(split: &Split) -> Result<QualityOracle> {
    match &split.manifest.oracle_thresholds {
        Some(t) => QualityOracle::new(t.clone()),
        None => Err(crate::CoreError::MissingPrerequisite("CQA manifest has no oracle thresholds".into())),
    }
}

/// Indices of the training and held-out samples.
pub fn holdout_partition(split: &Split) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, e) in split.manifest.samples.iter().enumerate() {
        if e.holdout == Some(true) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}
