//! Declarative experiment configuration.
//!
//! A config file is TOML. A top-level `include = "other.toml"` key loads that file
//! first (relative to the including file) and then deep-merges the including file
//! over it, so ablations can be written as small diffs against a base.

use std::path::{Path, PathBuf};

use ctmar_phys::{MetalFamily, PhantomProfile, ScanGeometry, SpectrumModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::models::{CqaConfig, InputMode, MarConfig};
use crate::nn::params::hex_digest;

/// Field of view shared by both domains, in cm.
pub const DEFAULT_FOV_CM: f64 = 32.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub spectrum: SpectrumModel,
    /// Projection views per image side.
    pub views_per_side: f64,
    /// Detector pitch relative to the pixel pitch.
    pub detector_spacing_ratio: f64,
    pub metal_family: MetalFamily,
    pub profiles: Vec<PhantomProfile>,
}

impl DomainConfig {
    pub fn simulated() -> Self {
        DomainConfig {
            spectrum: SpectrumModel::simulated_domain(),
            views_per_side: 1.5,
            detector_spacing_ratio: 1.0,
            metal_family: MetalFamily::Discs,
            profiles: vec![PhantomProfile::TorsoLike, PhantomProfile::DentalLike],
        }
    }

    pub fn clinical() -> Self {
        DomainConfig {
            spectrum: SpectrumModel::clinical_domain(),
            views_per_side: 1.25,
            detector_spacing_ratio: 1.2,
            metal_family: MetalFamily::Rods,
            profiles: vec![PhantomProfile::TorsoLike, PhantomProfile::DentalLike],
        }
    }

    /// Parallel-beam geometry whose detector row covers the image diagonal.
    pub fn geometry(&self, image_size: usize, fov_cm: f64) -> Result<ScanGeometry> {
        let ps = fov_cm / image_size as f64;
        let ds = ps * self.detector_spacing_ratio;
        let n_angles = (self.views_per_side * image_size as f64).round().max(1.0) as usize;
        let diag = image_size as f64 * ps * std::f64::consts::SQRT_2;
        let n_det = ((diag / ds).ceil() as usize + 2).max(image_size);
        Ok(ScanGeometry::parallel_beam(image_size, ps, n_angles, n_det, ds)?)
    }

    fn validate(&self, name: &str) -> Result<()> {
        self.spectrum.validate()?;
        if self.profiles.is_empty() {
            return invalid(format!("{name}: at least one phantom profile required"));
        }
        if !(self.views_per_side > 0.0 && self.detector_spacing_ratio > 0.0) {
            return invalid(format!("{name}: views and detector ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSizes {
    pub sim_train: usize,
    pub sim_test: usize,
    pub cli_train: usize,
    pub cli_clean: usize,
    pub cli_test: usize,
    pub cqa: usize,
    /// Fraction of CQA samples held out for SRCC/PLCC.
    pub cqa_holdout: f64,
    pub calibration_pairs: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        DatasetSizes {
            sim_train: 800,
            sim_test: 100,
            cli_train: 400,
            cli_clean: 400,
            cli_test: 100,
            cqa: 1000,
            cqa_holdout: 0.1,
            calibration_pairs: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqaugConfig {
    pub enabled: bool,
    /// Per-sample probability of replacing the image with an under-trained MAR output.
    pub moderate_prob: f64,
    /// Per-sample probability of mixing with another batch member.
    pub mixup_prob: f64,
    pub mixup_alpha: f64,
    /// Warm-start epochs of the under-trained MAR net.
    pub undertrained_epochs: usize,
}

impl Default for DqaugConfig {
    fn default() -> Self {
        DqaugConfig { enabled: true, moderate_prob: 0.3, mixup_prob: 0.2, mixup_alpha: 0.4, undertrained_epochs: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CqaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub bank_capacity: usize,
    pub dqaug: DqaugConfig,
}

impl Default for CqaTrainConfig {
    fn default() -> Self {
        CqaTrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 5e-4,
            tau: crate::cqa::DEFAULT_TAU,
            bank_capacity: crate::cqa::DEFAULT_BANK_CAPACITY,
            dqaug: DqaugConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_cli_loss: bool,
    pub no_ema: bool,
    pub no_cqa: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub quality_range: [f64; 2],
    pub ema_decay: f64,
    pub warm_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Warm-start learning rate; falls back to `lr` when unset.
    pub warm_lr: Option<f64>,
    pub input_mode: InputMode,
    pub ablation: Ablation,
    /// Evaluate on the test splits every this many epochs (0 = final epoch only).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            quality_range: [7.0, 10.0],
            ema_decay: 0.999,
            warm_epochs: 10,
            epochs: 30,
            batch_size: 4,
            lr: 1e-4,
            warm_lr: None,
            input_mode: InputMode::Artifact,
            ablation: Ablation::default(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn warm_lr(&self) -> f64 {
        self.warm_lr.unwrap_or(self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 0, model: 0, train: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub image_size: usize,
    pub fov_cm: f64,
    pub seeds: Seeds,
    pub simulated: DomainConfig,
    pub clinical: DomainConfig,
    pub dataset: DatasetSizes,
    pub mar: MarConfig,
    pub cqa: CqaConfig,
    pub cqa_train: CqaTrainConfig,
    pub train: TrainConfig,
    /// Quality ranges run by `sweep-q`.
    pub sweep_ranges: Vec<[f64; 2]>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            output_dir: PathBuf::from("runs/desk"),
            image_size: 128,
            fov_cm: DEFAULT_FOV_CM,
            seeds: Seeds::default(),
            simulated: DomainConfig::simulated(),
            clinical: DomainConfig::clinical(),
            dataset: DatasetSizes::default(),
            mar: MarConfig::default(),
            cqa: CqaConfig::default(),
            cqa_train: CqaTrainConfig::default(),
            train: TrainConfig::default(),
            sweep_ranges: vec![[1.0, 4.0], [4.0, 7.0], [7.0, 10.0], [9.0, 10.0], [1.0, 10.0]],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < ctmar_phys::phantom::MIN_PHANTOM_SIZE {
            return invalid(format!("image_size {} below the phantom minimum", self.image_size));
        }
        if self.cqa.image_size != self.image_size {
            return invalid(format!("cqa.image_size {} differs from image_size {}", self.cqa.image_size, self.image_size));
        }
        self.cqa.validate()?;
        self.mar.validate()?;
        if self.image_size % (1 << (self.mar.depth - 1)) != 0 {
            return invalid(format!("image_size {} not divisible by 2^(mar.depth-1)", self.image_size));
        }
        if !(self.fov_cm > 0.0) {
            return invalid("fov_cm must be positive");
        }
        self.simulated.validate("simulated")?;
        self.clinical.validate("clinical")?;
        crate::selftrain::QualityRange::new(self.train.quality_range[0], self.train.quality_range[1])?;
        for r in &self.sweep_ranges {
            crate::selftrain::QualityRange::new(r[0], r[1])?;
        }
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            return invalid(format!("ema_decay {} outside [0, 1)", self.train.ema_decay));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.warm_lr() > 0.0 && self.cqa_train.lr > 0.0) {
            return invalid("learning rates must be positive");
        }
        if self.train.batch_size == 0 || self.cqa_train.batch_size == 0 {
            return invalid("batch sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dataset.cqa_holdout) {
            return invalid("cqa_holdout must lie in [0, 1)");
        }
        let d = &self.cqa_train.dqaug;
        if !(0.0..=1.0).contains(&d.moderate_prob) || !(0.0..=1.0).contains(&d.mixup_prob) || d.mixup_alpha <= 0.0 {
            return invalid("dqaug probabilities must lie in [0, 1] and alpha must be positive");
        }
        Ok(())
    }

    /// The MAR config with the training input mode applied.
    pub fn mar_config(&self) -> MarConfig {
        MarConfig { input_mode: self.train.input_mode, ..self.mar }
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&canonical(serde_json::to_value(self).expect("config serializes")))
            .expect("json");
        let mut h = Sha256::new();
        h.update(&json);
        hex_digest(h)
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Serde(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CoreError::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving `include` chains.
    pub fn load(path: &Path) -> Result<Self> {
        let merged = load_merged(path, 0)?;
        let cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::InvalidArgument(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `dotted.key=value` overrides (values parsed as TOML, bare strings allowed).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table =
            toml::Table::try_from(self).map_err(|e| CoreError::Serde(e.to_string()))?;
        for ov in overrides {
            let Some((key, raw)) = ov.split_once('=') else {
                return invalid(format!("override {ov:?} is not key=value"));
            };
            let value = parse_value(raw.trim());
            set_dotted(&mut table, key.trim(), value)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::InvalidArgument(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return invalid(format!("override key {key}: {p} is not a table")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

const MAX_INCLUDE_DEPTH: usize = 8;

fn load_merged(path: &Path, depth: usize) -> Result<toml::Value> {
    if depth > MAX_INCLUDE_DEPTH {
        return invalid(format!("include chain deeper than {MAX_INCLUDE_DEPTH} at {}", path.display()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut table: toml::Table =
        text.parse().map_err(|e| CoreError::InvalidArgument(format!("config {}: {e}", path.display())))?;
    let Some(include) = table.remove("include") else {
        return Ok(toml::Value::Table(table));
    };
    let Some(inc) = include.as_str() else {
        return invalid("include must be a string path");
    };
    let base_path = path.parent().unwrap_or(Path::new(".")).join(inc);
    let mut base = load_merged(&base_path, depth + 1)?;
    merge(&mut base, toml::Value::Table(table));
    Ok(base)
}

/// Deep merge: tables merge recursively, everything else is replaced.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn canonical(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(m) => {
            let sorted: std::collections::BTreeMap<String, serde_json::Value> =
                m.into_iter().map(|(k, v)| (k, canonical(v))).collect();
            serde_json::Value::Object(sorted.into_iter().collect())
        }
        serde_json::Value::Array(a) => serde_json::Value::Array(a.into_iter().map(canonical).collect()),
        other => other,
    }
}
