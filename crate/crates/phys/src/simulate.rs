//! Polychromatic metal artifact simulation.
//!
//! The phantom is split into water, bone and metal density maps, each projected
//! once. Per ray, the detected intensity is the spectrum-weighted transmission
//! through the three path lengths, Poisson-sampled and floored at one photon.
//! Log-converted data are water-precorrected and reconstructed by FBP. The
//! clean target is the monochromatic, noise-free reconstruction of the metal-free
//! anatomy with the true metal values written back.

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::fbp::fbp_reconstruct;
use crate::geometry::{ScanGeometry, Sinogram};
use crate::hu::hu_normalize;
use crate::li::li_interpolate;
use crate::phantom::{Material, Phantom};
use crate::project::{forward_project, metal_trace, TraceMask};
use crate::spectrum::{SpectrumModel, BONE_MU_REF, WATER_MU_REF};
use crate::{invalid, par, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainTag {
    Simulated,
    Clinical,
}

impl DomainTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainTag::Simulated => "simulated",
            DomainTag::Clinical => "clinical",
        }
    }
}

/// Normalized training pair. Metal pixels hold the true metal values in every image.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPair {
    pub artifact_image: Array2<f64>,
    pub clean_image: Array2<f64>,
    /// Reconstruction of the LI-inpainted sinogram.
    pub li_image: Array2<f64>,
    pub metal_mask: Array2<bool>,
    pub roi_mask: Array2<bool>,
    pub domain_tag: DomainTag,
}

/// Intermediate products of one simulated acquisition, in HU.
#[derive(Debug, Clone)]
pub struct SimulatedScan {
    /// Water-precorrected polychromatic line integrals.
    pub measured: Sinogram,
    pub trace: TraceMask,
    pub artifact_hu: Array2<f64>,
    pub clean_hu: Array2<f64>,
    pub li_hu: Array2<f64>,
}

pub fn mu_ref_from_hu(hu: f64) -> f64 {
    WATER_MU_REF * (1.0 + hu / 1000.0)
}

pub fn hu_from_mu_ref(mu: f64) -> f64 {
    1000.0 * (mu / WATER_MU_REF - 1.0)
}

fn density_maps(phantom: &Phantom, spectrum: &SpectrumModel) -> [Array2<f64>; 3] {
    let dim = phantom.hu_image.dim();
    let mut water = Array2::zeros(dim);
    let mut bone = Array2::zeros(dim);
    let mut metal = Array2::zeros(dim);
    Zip::indexed(&phantom.hu_image).for_each(|ix, &hu| {
        let mu = mu_ref_from_hu(hu).max(0.0);
        match phantom.material_map[ix] {
            Material::Metal => metal[ix] = mu / spectrum.metal_mu_ref,
            Material::Bone => bone[ix] = mu / BONE_MU_REF,
            Material::Soft | Material::Air => water[ix] = mu / WATER_MU_REF,
        }
    });
    [water, bone, metal]
}

fn check_inputs(phantom: &Phantom, spectrum: &SpectrumModel, geometry: &ScanGeometry) -> Result<()> {
    geometry.validate()?;
    spectrum.validate()?;
    phantom.validate()?;
    if phantom.size() != geometry.image_size {
        return invalid(format!(
            "phantom size {} does not match geometry image_size {}",
            phantom.size(),
            geometry.image_size
        ));
    }
    Ok(())
}

fn to_hu(mu: Array2<f64>) -> Array2<f64> {
    mu.mapv_into(hu_from_mu_ref)
}

fn reinsert_metal(image: &mut Array2<f64>, phantom: &Phantom) {
    Zip::from(image)
        .and(&phantom.metal_mask)
        .and(&phantom.hu_image)
        .for_each(|v, &m, &hu| {
            if m {
                *v = hu;
            }
        });
}

/// Runs one acquisition and both reconstructions.
pub fn simulate_scan(
    phantom: &Phantom,
    spectrum: &SpectrumModel,
    geometry: &ScanGeometry,
    noise_seed: u64,
) -> Result<SimulatedScan> {
    check_inputs(phantom, spectrum, geometry)?;
    let [water, bone, metal] = density_maps(phantom, spectrum);
    let l_water = forward_project(&water, geometry)?;
    let l_bone = forward_project(&bone, geometry)?;
    let has_metal = phantom.metal_pixels() > 0;
    let l_metal = if has_metal {
        forward_project(&metal, geometry)?.data
    } else {
        Array2::zeros(l_water.data.dim())
    };

    let correction = spectrum.water_correction();
    let n0 = spectrum.photon_count;
    let n_det = geometry.n_detectors;
    let rows = par::map_indexed(geometry.n_angles, |a| {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        rng.set_stream(a as u64);
        (0..n_det)
            .map(|d| {
                let expected = n0 * spectrum.expected_transmission(l_water.data[[a, d]], l_bone.data[[a, d]], l_metal[[a, d]]);
                let counts = match Poisson::new(expected) {
                    Ok(dist) => dist.sample(&mut rng),
                    Err(_) => 0.0,
                };
                let p_poly = (n0 / counts.max(1.0)).ln();
                correction.apply(p_poly)
            })
            .collect::<Vec<_>>()
    });
    let measured_data = Array2::from_shape_vec((geometry.n_angles, n_det), rows.into_iter().flatten().collect())
        .expect("rows have n_detectors entries");
    let measured = Sinogram::new(measured_data, geometry)?;

    let trace = if has_metal {
        metal_trace(&phantom.metal_mask, geometry)?
    } else {
        TraceMask::empty(geometry)
    };

    let mut artifact_hu = to_hu(fbp_reconstruct(&measured)?);
    let mut li_hu = if has_metal {
        to_hu(fbp_reconstruct(&li_interpolate(&measured, &trace)?)?)
    } else {
        artifact_hu.clone()
    };

    let clean_mu = phantom.tissue_hu.mapv(|hu| mu_ref_from_hu(hu).max(0.0));
    let mut clean_hu = to_hu(fbp_reconstruct(&forward_project(&clean_mu, geometry)?)?);

    reinsert_metal(&mut artifact_hu, phantom);
    reinsert_metal(&mut li_hu, phantom);
    reinsert_metal(&mut clean_hu, phantom);

    Ok(SimulatedScan {
        measured,
        trace,
        artifact_hu,
        clean_hu,
        li_hu,
    })
}

/// Simulates a normalized (artifact, clean, LI) triple for one phantom.
pub fn simulate_metal_artifact(
    phantom: &Phantom,
    spectrum: &SpectrumModel,
    geometry: &ScanGeometry,
    noise_seed: u64,
    domain_tag: DomainTag,
) -> Result<ArtifactPair> {
    let scan = simulate_scan(phantom, spectrum, geometry, noise_seed)?;
    Ok(ArtifactPair {
        artifact_image: hu_normalize(&scan.artifact_hu),
        clean_image: hu_normalize(&scan.clean_hu),
        li_image: hu_normalize(&scan.li_hu),
        metal_mask: phantom.metal_mask.clone(),
        roi_mask: phantom.roi_mask.clone(),
        domain_tag,
    })
}
