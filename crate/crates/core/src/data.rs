//! Dataset synthesis, on-disk layout and loading.
//!
//! Each split is a directory holding `manifest.json` plus one flat little-endian
//! file per image kind (`<kind>.f32` for images, `<kind>.u8` for masks), with
//! samples stored back to back in manifest order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ctmar_phys::par::map_indexed;
use ctmar_phys::{make_phantom_with, simulate_metal_artifact, ArtifactPair, DomainTag, PhantomOptions, PhantomProfile, ScanGeometry};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DomainConfig, ExperimentConfig};
use crate::cqa::{Provenance, QualityLabel};
use crate::error::{invalid, io_err, CoreError, Result};

pub type Image = Vec<f32>;
pub type Mask = Vec<bool>;

pub const MANIFEST: &str = "manifest.json";
pub const ANNOTATIONS: &str = "annotations.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    SimTrain,
    SimTest,
    CliTrain,
    CliClean,
    CliTest,
    Cqa,
}

impl SplitKind {
    pub const ALL: [SplitKind; 6] =
        [SplitKind::SimTrain, SplitKind::SimTest, SplitKind::CliTrain, SplitKind::CliClean, SplitKind::CliTest, SplitKind::Cqa];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitKind::SimTrain => "sim-train",
            SplitKind::SimTest => "sim-test",
            SplitKind::CliTrain => "cli-train",
            SplitKind::CliClean => "cli-clean",
            SplitKind::CliTest => "cli-test",
            SplitKind::Cqa => "cqa",
        }
    }

    fn seed_stream(self) -> u64 {
        self as u64 + 1
    }
}

/// Image kinds a sample may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Artifact,
    Clean,
    Li,
    /// Image presented to the CQA model.
    Assessed,
    Metal,
    Roi,
}

impl Channel {
    fn is_mask(self) -> bool {
        matches!(self, Channel::Metal | Channel::Roi)
    }

    fn file_name(self) -> String {
        let stem = serde_json::to_value(self).unwrap().as_str().unwrap().to_string();
        if self.is_mask() {
            format!("{stem}.u8")
        } else {
            format!("{stem}.f32")
        }
    }
}

/// One sample; absent channels are `None` (e.g. no clean image for unpaired data).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sample {
    pub id: String,
    pub artifact: Option<Image>,
    pub clean: Option<Image>,
    pub li: Option<Image>,
    pub assessed: Option<Image>,
    pub metal: Option<Mask>,
    pub roi: Option<Mask>,
    pub label: Option<QualityLabel>,
    pub provenance: Option<Provenance>,
}

impl Sample {
    fn image(&self, c: Channel) -> Option<&Image> {
        match c {
            Channel::Artifact => self.artifact.as_ref(),
            Channel::Clean => self.clean.as_ref(),
            Channel::Li => self.li.as_ref(),
            Channel::Assessed => self.assessed.as_ref(),
            _ => None,
        }
    }

    fn mask(&self, c: Channel) -> Option<&Mask> {
        match c {
            Channel::Metal => self.metal.as_ref(),
            Channel::Roi => self.roi.as_ref(),
            _ => None,
        }
    }

    fn set_image(&mut self, c: Channel, v: Image) {
        match c {
            Channel::Artifact => self.artifact = Some(v),
            Channel::Clean => self.clean = Some(v),
            Channel::Li => self.li = Some(v),
            Channel::Assessed => self.assessed = Some(v),
            _ => unreachable!("mask channel"),
        }
    }

    fn set_mask(&mut self, c: Channel, v: Mask) {
        match c {
            Channel::Metal => self.metal = Some(v),
            Channel::Roi => self.roi = Some(v),
            _ => unreachable!("image channel"),
        }
    }

    pub fn require<'a>(&'a self, v: &'a Option<Image>, what: &str) -> Result<&'a Image> {
        v.as_ref().ok_or_else(|| CoreError::MissingPrerequisite(format!("sample {} has no {what} image", self.id)))
    }

    pub fn metal_mask(&self) -> Result<&Mask> {
        self.metal.as_ref().ok_or_else(|| CoreError::MissingPrerequisite(format!("sample {} has no metal mask", self.id)))
    }

    pub fn roi_mask(&self) -> Result<&Mask> {
        self.roi.as_ref().ok_or_else(|| CoreError::MissingPrerequisite(format!("sample {} has no roi mask", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub profile: PhantomProfile,
    pub phantom_seed: u64,
    pub noise_seed: u64,
    pub metal_inserts: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<QualityLabel>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub provenance: Option<Provenance>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: SplitKind,
    pub domain_tag: DomainTag,
    pub spectrum_id: String,
    pub geometry: ScanGeometry,
    pub image_size: usize,
    pub data_seed: u64,
    pub config_hash: String,
    pub files: BTreeMap<Channel, String>,
    /// Quality-oracle thresholds (CQA split only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oracle_thresholds: Option<Vec<f64>>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn side(&self) -> usize {
        self.manifest.image_size
    }

    pub fn has_channel(&self, c: Channel) -> bool {
        self.manifest.files.contains_key(&c)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let n2 = self.side() * self.side();
        for (&c, name) in &self.manifest.files {
            let mut bytes = Vec::with_capacity(self.samples.len() * n2 * if c.is_mask() { 1 } else { 4 });
            for s in &self.samples {
                if c.is_mask() {
                    let m = s.mask(c).ok_or_else(|| CoreError::InvalidArgument(format!("{} lacks {c:?}", s.id)))?;
                    bytes.extend(m.iter().map(|&b| b as u8));
                } else {
                    let v = s.image(c).ok_or_else(|| CoreError::InvalidArgument(format!("{} lacks {c:?}", s.id)))?;
                    bytes.extend(v.iter().flat_map(|x| x.to_le_bytes()));
                }
            }
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| CoreError::Serde(e.to_string()))?;
        std::fs::write(&path, json).map_err(io_err(&path))?;
        if self.manifest.split == SplitKind::Cqa {
            write_annotations(&dir.join(ANNOTATIONS), &self.manifest.samples)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Split> {
        let mpath = dir.join(MANIFEST);
        if !mpath.exists() {
            return Err(CoreError::MissingPrerequisite(format!("no dataset manifest at {}", mpath.display())));
        }
        let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CoreError::Serde(format!("{}: {e}", mpath.display())))?;
        let n = manifest.samples.len();
        let n2 = manifest.image_size * manifest.image_size;
        let mut samples: Vec<Sample> = manifest
            .samples
            .iter()
            .map(|e| Sample { id: e.id.clone(), label: e.label, provenance: e.provenance, ..Default::default() })
            .collect();
        for (&c, name) in &manifest.files {
            let path = dir.join(name);
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            let width = if c.is_mask() { 1 } else { 4 };
            if bytes.len() != n * n2 * width {
                return Err(CoreError::MissingPrerequisite(format!(
                    "{} holds {} bytes, expected {}",
                    path.display(),
                    bytes.len(),
                    n * n2 * width
                )));
            }
            for (i, s) in samples.iter_mut().enumerate() {
                let chunk = &bytes[i * n2 * width..(i + 1) * n2 * width];
                if c.is_mask() {
                    s.set_mask(c, chunk.iter().map(|&b| b != 0).collect());
                } else {
                    s.set_image(c, chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
                }
            }
        }
        Ok(Split { manifest, samples })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub quality: QualityLabel,
    pub provenance: Provenance,
}

fn write_annotations(path: &Path, entries: &[SampleEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let (Some(quality), Some(provenance)) = (e.label, e.provenance) else {
            return invalid(format!("CQA sample {} lacks a label", e.id));
        };
        let rec = AnnotationRecord { id: e.id.clone(), quality, provenance };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| CoreError::Serde(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CoreError::Serde(format!("{}: {e}", path.display()))))
        .collect()
}

/// Derives an independent seed from a base seed and a stream/index pair.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 4);
    rng.random()
}

pub fn to_f32(a: &Array2<f64>) -> Image {
    a.iter().map(|&v| v as f32).collect()
}

pub fn mask_vec(a: &Array2<bool>) -> Mask {
    a.iter().copied().collect()
}

pub fn view_f64(img: &[f32], side: usize) -> Array2<f64> {
    Array2::from_shape_fn((side, side), |(i, j)| img[i * side + j] as f64)
}

pub fn view_mask(m: &[bool], side: usize) -> ArrayView2<'_, bool> {
    ArrayView2::from_shape((side, side), m).expect("mask length matches side")
}

/// One simulated acquisition of a fresh phantom.
pub struct Scan {
    pub entry: SampleEntry,
    pub pair: ArtifactPair,
}

pub fn simulate_one(
    domain: &DomainConfig,
    tag: DomainTag,
    geometry: &ScanGeometry,
    image_size: usize,
    id: String,
    phantom_seed: u64,
    noise_seed: u64,
    metal_count: Option<usize>,
) -> Result<Scan> {
    let profile = domain.profiles[(phantom_seed % domain.profiles.len() as u64) as usize];
    let mut opts = PhantomOptions::new(profile, image_size).with_family(domain.metal_family);
    if let Some(n) = metal_count {
        opts = opts.with_metal_count(n);
    }
    let phantom = make_phantom_with(phantom_seed, &opts)?;
    let pair = simulate_metal_artifact(&phantom, &domain.spectrum, geometry, noise_seed, tag)?;
    let entry = SampleEntry {
        id,
        profile,
        phantom_seed,
        noise_seed,
        metal_inserts: phantom.inserts.len(),
        label: None,
        provenance: None,
        holdout: None,
    };
    Ok(Scan { entry, pair })
}

/// Metal count policy per split: training/test scans need at least one insert.
fn metal_policy(kind: SplitKind, seed: u64) -> Option<usize> {
    match kind {
        SplitKind::CliClean => Some(0),
        _ => Some(1 + (seed % 4) as usize),
    }
}

fn domain_of(kind: SplitKind) -> DomainTag {
    match kind {
        SplitKind::SimTrain | SplitKind::SimTest => DomainTag::Simulated,
        _ => DomainTag::Clinical,
    }
}

/// Synthesizes one non-CQA split.
pub fn synthesize_split(cfg: &ExperimentConfig, kind: SplitKind) -> Result<Split> {
    let (n, channels): (usize, &[Channel]) = match kind {
        SplitKind::SimTrain => (cfg.dataset.sim_train, &[Channel::Artifact, Channel::Clean, Channel::Li, Channel::Metal, Channel::Roi]),
        SplitKind::SimTest => (cfg.dataset.sim_test, &[Channel::Artifact, Channel::Clean, Channel::Li, Channel::Metal, Channel::Roi]),
        // Unpaired clinical images: the clean reference is never written.
        SplitKind::CliTrain => (cfg.dataset.cli_train, &[Channel::Artifact, Channel::Li, Channel::Metal, Channel::Roi]),
        SplitKind::CliClean => (cfg.dataset.cli_clean, &[Channel::Clean, Channel::Metal, Channel::Roi]),
        SplitKind::CliTest => (cfg.dataset.cli_test, &[Channel::Artifact, Channel::Clean, Channel::Li, Channel::Metal, Channel::Roi]),
        SplitKind::Cqa => return invalid("use cqa::synthesize_cqa_split for the CQA split"),
    };
    let tag = domain_of(kind);
    let domain = if tag == DomainTag::Simulated { &cfg.simulated } else { &cfg.clinical };
    let geometry = domain.geometry(cfg.image_size, cfg.fov_cm)?;
    let scans = map_indexed(n, |i| {
        let ps = derive_seed(cfg.seeds.data, kind.seed_stream(), 2 * i as u64);
        let ns = derive_seed(cfg.seeds.data, kind.seed_stream(), 2 * i as u64 + 1);
        simulate_one(domain, tag, &geometry, cfg.image_size, format!("{}-{i:05}", kind.dir_name()), ps, ns, metal_policy(kind, ps))
    });
    let mut entries = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for scan in scans {
        let Scan { entry, pair } = scan?;
        let mut s = Sample { id: entry.id.clone(), ..Default::default() };
        for &c in channels {
            match c {
                Channel::Artifact => s.artifact = Some(to_f32(&pair.artifact_image)),
                Channel::Clean => s.clean = Some(to_f32(&pair.clean_image)),
                Channel::Li => s.li = Some(to_f32(&pair.li_image)),
                Channel::Metal => s.metal = Some(mask_vec(&pair.metal_mask)),
                Channel::Roi => s.roi = Some(mask_vec(&pair.roi_mask)),
                Channel::Assessed => unreachable!(),
            }
        }
        entries.push(entry);
        samples.push(s);
    }
    let manifest = Manifest {
        split: kind,
        domain_tag: tag,
        spectrum_id: domain.spectrum.id.clone(),
        geometry,
        image_size: cfg.image_size,
        data_seed: cfg.seeds.data,
        config_hash: cfg.hash(),
        files: channels.iter().map(|&c| (c, c.file_name())).collect(),
        oracle_thresholds: None,
        samples: entries,
    };
    Ok(Split { manifest, samples })
}

pub(crate) fn channel_files(channels: &[Channel]) -> BTreeMap<Channel, String> {
    channels.iter().map(|&c| (c, c.file_name())).collect()
}

/// All splits of an experiment, loaded from `<output_dir>/data`.
pub struct Datasets {
    pub root: PathBuf,
    pub sim_train: Split,
    pub sim_test: Split,
    pub cli_train: Split,
    pub cli_clean: Split,
    pub cli_test: Split,
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

impl Datasets {
    pub fn load(root: &Path) -> Result<Self> {
        let get = |k: SplitKind| Split::read(&root.join(k.dir_name()));
        Ok(Datasets {
            root: root.to_path_buf(),
            sim_train: get(SplitKind::SimTrain)?,
            sim_test: get(SplitKind::SimTest)?,
            cli_train: get(SplitKind::CliTrain)?,
            cli_clean: get(SplitKind::CliClean)?,
            cli_test: get(SplitKind::CliTest)?,
        })
    }

    pub fn synthesize(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Datasets {
            root: data_dir(cfg),
            sim_train: synthesize_split(cfg, SplitKind::SimTrain)?,
            sim_test: synthesize_split(cfg, SplitKind::SimTest)?,
            cli_train: synthesize_split(cfg, SplitKind::CliTrain)?,
            cli_clean: synthesize_split(cfg, SplitKind::CliClean)?,
            cli_test: synthesize_split(cfg, SplitKind::CliTest)?,
        })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        for split in [&self.sim_train, &self.sim_test, &self.cli_train, &self.cli_clean, &self.cli_test] {
            split.write(&root.join(split.manifest.split.dir_name()))?;
        }
        Ok(())
    }
}
