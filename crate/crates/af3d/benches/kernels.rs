//! Compares the data-parallel kernels against their sequential twins.
//!
//! The `*_seq` helpers are compiled unconditionally, so one run measures
//! both paths of the chunk primitives. The network and synthesis benches
//! go through whatever dispatch the build selected; run `cargo bench`
//! and `cargo bench --no-default-features` to compare whole-model
//! numbers across the two builds (the ids carry the flavor).

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use std::time::Duration;

use af3d::network::{build_network, Network, Tensor5};
use af3d::parallel::{for_each_chunk_mut, for_each_chunk_mut_seq, map_indexed, map_indexed_seq};
use af3d::synth::{generate_volume, SynthConfig};
use af3d::volume::{resample_isotropic, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FLAVOR: &str = if cfg!(feature = "parallel") {
    "parallel"
} else {
    "sequential"
};

/// Plane-partitioned stencil shaped like the convolution inner loops:
/// each z-plane chunk reads a shared input and writes its own slice.
fn smooth_planes(dst: &mut [f32], src: &[f32], plane: usize, seq: bool) {
    let f = |zi: usize, out: &mut [f32]| {
        let base = zi * plane;
        for (i, o) in out.iter_mut().enumerate() {
            let idx = base + i;
            let left = if idx == 0 { 0.0 } else { src[idx - 1] };
            let right = if idx + 1 == src.len() { 0.0 } else { src[idx + 1] };
            *o = 0.25 * left + 0.5 * src[idx] + 0.25 * right;
        }
    };
    if seq {
        for_each_chunk_mut_seq(dst, plane, f);
    } else {
        for_each_chunk_mut(dst, plane, f);
    }
}

fn bench_chunk_primitives(c: &mut Criterion) {
    let dims = [64usize, 64, 64];
    let n = dims[0] * dims[1] * dims[2];
    let plane = dims[1] * dims[2];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut dst = vec![0.0f32; n];

    let mut group = c.benchmark_group("chunked_smooth_64cubed");
    group.measurement_time(Duration::from_secs(3)).sample_size(20);
    group.bench_function("dispatch", |b| {
        b.iter(|| smooth_planes(black_box(&mut dst), black_box(&src), plane, false))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| smooth_planes(black_box(&mut dst), black_box(&src), plane, true))
    });
    group.finish();

    let mut group = c.benchmark_group("map_indexed_reduce");
    group.measurement_time(Duration::from_secs(3)).sample_size(20);
    let work = |i: usize| -> f64 {
        let mut acc = 0.0f64;
        for k in 0..512 {
            acc += ((i * 31 + k) as f64).sqrt();
        }
        acc
    };
    group.bench_function("dispatch", |b| {
        b.iter(|| black_box(map_indexed(black_box(4096), work)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(map_indexed_seq(black_box(4096), work)))
    });
    group.finish();
}

fn bench_network_forward(c: &mut Criterion) {
    let cfg = af3d::network::NetworkConfig {
        base_channels: 8,
        blocks_per_stage: 1,
        growth: 4,
        head_channels: 8,
        k_per_point: 1,
    };
    let mut net: Network<f32> = build_network(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut input = Tensor5::<f32>::zeros([1, 1, 32, 64, 64]);
    for v in input.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let mut group = c.benchmark_group("network_forward_32x64x64");
    group.measurement_time(Duration::from_secs(5)).sample_size(10);
    group.bench_function(FLAVOR, |b| {
        b.iter(|| black_box(net.forward(black_box(&input)).unwrap()))
    });
    group.finish();
}

fn bench_volume_pipeline(c: &mut Criterion) {
    let synth = SynthConfig {
        volume_dims: [64, 64, 64],
        ..SynthConfig::default()
    };
    let mut group = c.benchmark_group("volume_pipeline");
    group.measurement_time(Duration::from_secs(5)).sample_size(10);
    group.bench_function(format!("synth_64cubed/{FLAVOR}"), |b| {
        b.iter(|| black_box(generate_volume(black_box(&synth), 0).unwrap()))
    });

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let aniso = Volume::new(
        [24, 96, 96],
        [2.5, 0.8, 0.8],
        (0..24 * 96 * 96).map(|_| rng.gen_range(-1000.0..600.0)).collect(),
    )
    .unwrap();
    group.bench_function(format!("resample_isotropic/{FLAVOR}"), |b| {
        b.iter(|| black_box(resample_isotropic(black_box(&aniso), 1.0).unwrap()))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_chunk_primitives,
    bench_network_forward,
    bench_volume_pipeline
);
criterion_main!(benches);
