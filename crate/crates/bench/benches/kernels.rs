use std::hint::black_box;

use atlasseg_core::distance::fast_marching_signed_distance;
use atlasseg_core::evalstats::{hd95_with, Hd95Options};
use atlasseg_core::network::{init_params, UNetConfig};
use atlasseg_core::trainer::Segmenter;
use atlasseg_core::warp::{marching_cubes_surface, random_smooth_field, rasterize_projected_mask, warp_volume};
use atlasseg_core::{BinaryMask, Grid, Volume};
use criterion::{criterion_group, criterion_main, Criterion};

fn ball(grid: Grid, c: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(grid, |i, j, k| {
        let d = [i as f64 - c, j as f64 - c, k as f64 - c];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r * r
    })
}

fn warping(c: &mut Criterion) {
    let grid = Grid::unit([32, 32, 32]);
    let img = Volume::from_fn(grid, |i, j, k| ((i * 7 + j * 3 + k) % 11) as f64);
    let field = random_smooth_field(grid, 8, 2.0, 1).unwrap();
    let mask = ball(grid, 15.5, 9.0);
    c.bench_function("warp_volume 32^3", |b| b.iter(|| warp_volume(black_box(&img), &field).unwrap()));
    c.bench_function("projected mask 32^3", |b| b.iter(|| rasterize_projected_mask(black_box(&mask), &field).unwrap()));
}

fn distances(c: &mut Criterion) {
    let grid = Grid::unit([32, 32, 32]);
    let a = ball(grid, 15.5, 9.0);
    let b = ball(grid, 14.0, 8.0);
    c.bench_function("fast marching 32^3", |bch| bch.iter(|| fast_marching_signed_distance(black_box(&a)).unwrap()));
    let (sa, sb) = (marching_cubes_surface(&a).unwrap(), marching_cubes_surface(&b).unwrap());
    let opts = Hd95Options::default();
    c.bench_function("hd95 spheres r9/r8", |bch| bch.iter(|| hd95_with(black_box(&sa), &sb, None, &opts).unwrap()));
}

fn network(c: &mut Criterion) {
    let cfg = UNetConfig { dims: [32, 32, 32], levels: 4, base_channels: 4, ..UNetConfig::default() };
    let mut seg = Segmenter::new(&cfg, init_params(&cfg, 0).unwrap()).unwrap();
    let img = Volume::from_fn(Grid::unit(cfg.dims), |i, j, k| ((i + 2 * j + 3 * k) % 5) as f64 / 5.0);
    let mut group = c.benchmark_group("unet");
    group.sample_size(10);
    group.bench_function("forward 32^3 base 4", |b| b.iter(|| seg.predict(black_box(&img)).unwrap()));
    group.finish();
}

criterion_group!(benches, warping, distances, network);
criterion_main!(benches);
