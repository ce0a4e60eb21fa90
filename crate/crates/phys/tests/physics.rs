use ctmar_phys::*;
use ndarray::Array2;

fn desk_geometry() -> ScanGeometry {
    ScanGeometry::parallel_beam(128, 0.25, 180, 192, 0.25).unwrap()
}

fn roi_rmse(a: &Array2<f64>, b: &Array2<f64>, roi: &Array2<bool>) -> f64 {
    let (mut se, mut n) = (0.0, 0.0);
    for ((x, y), &m) in a.iter().zip(b).zip(roi) {
        if m {
            se += (x - y).powi(2);
            n += 1.0;
        }
    }
    (se / n).sqrt()
}

fn roi_mae(a: &Array2<f64>, b: &Array2<f64>, roi: &Array2<bool>) -> f64 {
    let (mut ae, mut n) = (0.0, 0.0);
    for ((x, y), &m) in a.iter().zip(b).zip(roi) {
        if m {
            ae += (x - y).abs();
            n += 1.0;
        }
    }
    ae / n
}

#[test]
fn disc_mass_is_conserved_in_every_view() {
    let g = desk_geometry();
    let r_px = 20.0;
    let disc = Array2::from_shape_fn((128, 128), |(r, c)| {
        let (y, x) = (r as f64 - 63.5, c as f64 - 63.5);
        if x * x + y * y <= r_px * r_px {
            1.0
        } else {
            0.0
        }
    });
    let radius = r_px * g.pixel_spacing;
    let expected = std::f64::consts::PI * radius * radius / g.detector_spacing;
    let sino = forward_project(&disc, &g).unwrap();
    for a in 0..g.n_angles {
        let total: f64 = sino.data.row(a).sum();
        let rel = (total - expected).abs() / expected;
        assert!(rel < 0.02, "view {a}: relative mass error {rel}");
    }
}

#[test]
fn fbp_round_trip_on_metal_free_phantom() {
    let g = desk_geometry();
    let p = make_phantom_with(0, &PhantomOptions::new(PhantomProfile::TorsoLike, 128).with_metal_count(0)).unwrap();
    let mu = p.tissue_hu.mapv(|h| simulate::mu_ref_from_hu(h).max(0.0));
    let rec = fbp_reconstruct(&forward_project(&mu, &g).unwrap()).unwrap();
    let norm = roi_rmse(&mu, &Array2::zeros(mu.dim()), &p.roi_mask);
    let rel = roi_rmse(&rec, &mu, &p.roi_mask) / norm;
    // Measured 0.0365 when this test was written.
    assert!(rel < 0.05, "relative RMSE {rel}");
}

#[test]
fn metal_free_scan_stays_within_noise_floor() {
    let g = desk_geometry();
    let p = make_phantom_with(0, &PhantomOptions::new(PhantomProfile::TorsoLike, 128).with_metal_count(0)).unwrap();
    let mut spectrum = SpectrumModel::simulated_domain();
    spectrum.photon_count = 1e6;
    let runs: Vec<ArtifactPair> = (0..10)
        .map(|s| simulate_metal_artifact(&p, &spectrum, &g, 100 + s, DomainTag::Simulated).unwrap())
        .collect();
    // Monte-Carlo noise floor: pixel standard deviation across seeds, RMS over the roi.
    let mean = runs.iter().fold(Array2::<f64>::zeros((128, 128)), |acc, r| acc + &r.artifact_image) / runs.len() as f64;
    let var = runs
        .iter()
        .fold(Array2::<f64>::zeros((128, 128)), |acc, r| acc + (&r.artifact_image - &mean).mapv(|v| v * v))
        / (runs.len() - 1) as f64;
    let noise_floor = roi_rmse(&var.mapv(f64::sqrt), &Array2::zeros(var.dim()), &p.roi_mask);
    for r in &runs {
        let rmse = roi_rmse(&r.artifact_image, &r.clean_image, &p.roi_mask);
        assert!(rmse < 3.0 * noise_floor, "rmse {rmse} vs noise floor {noise_floor}");
    }
}

#[test]
fn metal_strictly_increases_roi_error() {
    let g = ScanGeometry::parallel_beam(64, 0.5, 96, 96, 0.5).unwrap();
    for seed in 0..4 {
        for profile in [PhantomProfile::TorsoLike, PhantomProfile::DentalLike] {
            let opts = PhantomOptions::new(profile, 64);
            let with = make_phantom_with(seed, &opts.clone().with_metal_count(1)).unwrap();
            let without = make_phantom_with(seed, &opts.with_metal_count(0)).unwrap();
            let s = SpectrumModel::simulated_domain();
            let a = simulate_metal_artifact(&with, &s, &g, seed, DomainTag::Simulated).unwrap();
            let b = simulate_metal_artifact(&without, &s, &g, seed, DomainTag::Simulated).unwrap();
            let mae_with = roi_mae(&a.artifact_image, &a.clean_image, &with.roi_mask);
            let mae_without = roi_mae(&b.artifact_image, &b.clean_image, &with.roi_mask);
            assert!(mae_with > mae_without, "seed {seed} {profile:?}: {mae_with} <= {mae_without}");
        }
    }
}

#[test]
fn clinical_physics_is_harsher_than_simulated() {
    let g = ScanGeometry::parallel_beam(64, 0.5, 96, 96, 0.5).unwrap();
    let (mut sim, mut cli) = (0.0, 0.0);
    for seed in 0..4 {
        let p = make_phantom_with(seed, &PhantomOptions::new(PhantomProfile::TorsoLike, 64).with_metal_count(2)).unwrap();
        let a = simulate_metal_artifact(&p, &SpectrumModel::simulated_domain(), &g, seed, DomainTag::Simulated).unwrap();
        let b = simulate_metal_artifact(&p, &SpectrumModel::clinical_domain(), &g, seed, DomainTag::Clinical).unwrap();
        sim += roi_mae(&a.artifact_image, &a.clean_image, &p.roi_mask);
        cli += roi_mae(&b.artifact_image, &b.clean_image, &p.roi_mask);
    }
    assert!(cli > sim);
}

#[test]
fn li_reconstruction_uses_the_trace() {
    let g = ScanGeometry::parallel_beam(64, 0.5, 96, 96, 0.5).unwrap();
    let p = make_phantom_with(2, &PhantomOptions::new(PhantomProfile::TorsoLike, 64).with_metal_count(2)).unwrap();
    let scan = simulate::simulate_scan(&p, &SpectrumModel::clinical_domain(), &g, 3).unwrap();
    assert!(!scan.trace.is_empty());
    let li = li_interpolate(&scan.measured, &scan.trace).unwrap();
    for ((&m, &before), &after) in scan.trace.mask.iter().zip(&scan.measured.data).zip(&li.data) {
        if !m {
            assert_eq!(before, after);
        }
    }
    let again = li_interpolate(&li, &scan.trace).unwrap();
    assert_eq!(again, li);
}
