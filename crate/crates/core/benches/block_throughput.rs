//! Throughput of the per-block codec paths under different worker
//! counts, plus the raw conv kernel. With the `parallel` feature off the
//! sequential fallback runs regardless of pool size.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hvq::codec::{compress, CodecConfig};
use hvq::model::{ModelConfig, ModelParams};
use hvq::nn::{conv2d_forward, ConvGeom, Padding};
use hvq::trainer::gaussian_random_field;
use hvq::Tensor;

fn bench_model() -> ModelParams {
    let cfg = ModelConfig {
        base_channels: 4,
        stage_channels: vec![6, 8],
        stage_strides: vec![2, 2],
        codebook_sizes: vec![32, 32],
        codebook_dim: 4,
        block_size_compress: 64,
        ..ModelConfig::default()
    };
    ModelParams::init(cfg, 1).unwrap()
}

#[cfg(feature = "parallel")]
fn with_workers<R>(n: usize, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_workers<R>(_n: usize, f: impl FnOnce() -> R) -> R {
    f()
}

fn bench_compress(c: &mut Criterion) {
    let model = bench_model();
    let field = gaussian_random_field(128, 128, 8.0, 3);
    let cfg = CodecConfig::for_model(&model);
    let mut group = c.benchmark_group("compress_128x128");
    group.sample_size(10);
    for workers in [1usize, 2, 4] {
        group.bench_with_input(
            BenchmarkId::from_parameter(workers),
            &workers,
            |b, &workers| {
                b.iter(|| {
                    with_workers(workers, || compress(&field, &model, &cfg).unwrap())
                })
            },
        );
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let input = Tensor::full(vec![1, 8, 64, 64], 0.5);
    let kernel = Tensor::full(vec![8, 8, 5, 5], 0.01);
    let bias = Tensor::zeros(vec![8]);
    let geom = ConvGeom::new(1, Padding::symmetric(2));
    let mut group = c.benchmark_group("conv2d_64x64_8ch");
    group.sample_size(20);
    for workers in [1usize, 2, 4] {
        group.bench_with_input(
            BenchmarkId::from_parameter(workers),
            &workers,
            |b, &workers| {
                b.iter(|| {
                    with_workers(workers, || {
                        conv2d_forward(&input, &kernel, &bias, &geom).unwrap()
                    })
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_compress, bench_conv);
criterion_main!(benches);
