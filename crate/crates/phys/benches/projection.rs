use criterion::{criterion_group, criterion_main, Criterion};
use ctmar_phys::{
    fbp_reconstruct, forward_project, make_phantom, par, simulate_metal_artifact, DomainTag, PhantomProfile,
    ScanGeometry, SpectrumModel,
};

fn bench_projection(c: &mut Criterion) {
    let backend = if par::is_parallel() { "rayon" } else { "sequential" };
    let g = ScanGeometry::parallel_beam(128, 0.25, 180, 192, 0.25).unwrap();
    let phantom = make_phantom(0, PhantomProfile::TorsoLike, 128).unwrap();
    let mu = phantom.tissue_hu.mapv(|h| 0.193 * (1.0 + h / 1000.0).max(0.0));
    let sino = forward_project(&mu, &g).unwrap();

    let mut group = c.benchmark_group(format!("ctphys-{backend}"));
    group.sample_size(10);
    group.bench_function("forward_project_128", |b| b.iter(|| forward_project(&mu, &g).unwrap()));
    group.bench_function("fbp_128", |b| b.iter(|| fbp_reconstruct(&sino).unwrap()));
    group.bench_function("simulate_128", |b| {
        b.iter(|| simulate_metal_artifact(&phantom, &SpectrumModel::simulated_domain(), &g, 1, DomainTag::Simulated).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_projection);
criterion_main!(benches);
