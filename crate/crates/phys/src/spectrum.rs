//! Three-bin polychromatic source model.
//!
//! Attenuation values are stand-in constants (per cm) loosely following tabulated
//! water, cortical bone and implant-metal curves. HU is defined against water at
//! the monochromatic reference energy, [`REFERENCE_KEV`].

use serde::{Deserialize, Serialize};

use crate::{invalid, Result};

pub const REFERENCE_KEV: f64 = 70.0;

/// Linear attenuation at the reference energy, per cm.
pub const WATER_MU_REF: f64 = 0.193;
pub const BONE_MU_REF: f64 = 0.500;

/// Per-bin linear attenuation of the three simulated materials.
/// Air is water at zero density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialMu {
    pub water: Vec<f64>,
    pub bone: Vec<f64>,
    pub metal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub id: String,
    pub energies_kev: Vec<f64>,
    pub weights: Vec<f64>,
    pub material_mu: MaterialMu,
    /// Metal attenuation at the reference energy; converts metal HU to density.
    pub metal_mu_ref: f64,
    /// Incident photons per ray.
    pub photon_count: f64,
}

impl SpectrumModel {
    /// Source used for the paired simulated domain: titanium-like implants.
    pub fn simulated_domain() -> Self {
        Self {
            id: "sim-ti-3bin".into(),
            energies_kev: vec![50.0, 70.0, 100.0],
            weights: vec![0.30, 0.45, 0.25],
            material_mu: MaterialMu {
                water: vec![0.227, 0.193, 0.171],
                bone: vec![0.810, 0.500, 0.356],
                metal: vec![8.10, 3.60, 1.70],
            },
            metal_mu_ref: 3.60,
            photon_count: 2.0e5,
        }
    }

    /// Source used for the unpaired clinical domain: softer beam, steel-like
    /// implants and fewer photons.
    pub fn clinical_domain() -> Self {
        Self {
            id: "cli-fe-3bin".into(),
            energies_kev: vec![40.0, 60.0, 100.0],
            weights: vec![0.40, 0.40, 0.20],
            material_mu: MaterialMu {
                water: vec![0.268, 0.206, 0.171],
                bone: vec![1.280, 0.604, 0.356],
                metal: vec![28.6, 9.60, 2.90],
            },
            metal_mu_ref: 6.60,
            photon_count: 5.0e4,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.energies_kev.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_bins();
        if n == 0 {
            return invalid("spectrum has no energy bins");
        }
        let m = &self.material_mu;
        if self.weights.len() != n || m.water.len() != n || m.bone.len() != n || m.metal.len() != n {
            return invalid(format!("spectrum '{}' has inconsistent bin counts", self.id));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return invalid("spectrum weights must be nonnegative");
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("spectrum weights sum to {total}, expected 1"));
        }
        let all_mu = m.water.iter().chain(&m.bone).chain(&m.metal);
        if all_mu.clone().any(|&v| !(v >= 0.0)) || !(self.metal_mu_ref > 0.0) {
            return invalid("attenuation coefficients must be nonnegative");
        }
        if m.metal.iter().zip(&m.bone).any(|(metal, bone)| metal <= bone) {
            return invalid("metal attenuation must exceed bone in every bin");
        }
        if !(self.photon_count >= 1.0) {
            return invalid("photon_count must be at least 1");
        }
        Ok(())
    }

    /// Polychromatic log attenuation `-ln(sum_b w_b exp(-mu_b))` for material path
    /// lengths (density-weighted, cm) of water, bone and metal.
    pub fn poly_attenuation(&self, water: f64, bone: f64, metal: f64) -> f64 {
        -self.expected_transmission(water, bone, metal).ln()
    }

    pub fn expected_transmission(&self, water: f64, bone: f64, metal: f64) -> f64 {
        let m = &self.material_mu;
        (0..self.n_bins())
            .map(|b| self.weights[b] * (-(m.water[b] * water + m.bone[b] * bone + m.metal[b] * metal)).exp())
            .sum()
    }

    /// Lookup table mapping polychromatic water-path attenuation back to the
    /// monochromatic reference line integral (water beam-hardening precorrection).
    pub fn water_correction(&self) -> WaterCorrection {
        let max_cm = 200.0;
        let n = 4001;
        let samples = (0..n)
            .map(|i| {
                let t = max_cm * i as f64 / (n - 1) as f64;
                (self.poly_attenuation(t, 0.0, 0.0), WATER_MU_REF * t)
            })
            .collect();
        WaterCorrection { samples }
    }
}

/// Monotone piecewise-linear map from polychromatic to monochromatic attenuation.
#[derive(Debug, Clone)]
pub struct WaterCorrection {
    samples: Vec<(f64, f64)>,
}

impl WaterCorrection {
    pub fn apply(&self, p_poly: f64) -> f64 {
        let s = &self.samples;
        if p_poly <= 0.0 {
            // Below zero only noise; the map is tangent to the low-energy slope there.
            let (p1, m1) = s[1];
            return p_poly * m1 / p1;
        }
        let idx = s.partition_point(|&(p, _)| p < p_poly);
        if idx >= s.len() {
            let (pa, ma) = s[s.len() - 2];
            let (pb, mb) = s[s.len() - 1];
            return mb + (p_poly - pb) * (mb - ma) / (pb - pa);
        }
        let (pa, ma) = s[idx - 1];
        let (pb, mb) = s[idx];
        ma + (p_poly - pa) * (mb - ma) / (pb - pa)
    }
}
