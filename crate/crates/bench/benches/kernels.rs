use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lmt_core::attention::{dense_attention, prototype_attention};
use lmt_core::quantize::nearest_codes;
use lmt_core::{Conv3dGeometry, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("attention");
    let d = 32;
    for n in [256usize, 512, 1024, 2048] {
        let [q, k, v] = [0; 3].map(|_| Tensor::<f32>::randn(&[n, d], 1.0, &mut rng));
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("prototype_r32", n), &n, |b, _| {
            b.iter(|| prototype_attention(&q, &k, &v, 32).unwrap())
        });
        if n <= 1024 {
            group.bench_with_input(BenchmarkId::new("dense", n), &n, |b, _| {
                b.iter(|| dense_attention(&q, &k, &v).unwrap())
            });
        }
    }
    group.finish();
}

fn conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv3d");
    for (ci, co, side) in [(3usize, 8usize, 32usize), (8, 16, 16), (16, 32, 8)] {
        let x = Tensor::<f32>::randn(&[2, ci, 8, side, side], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[co, ci, 3, 3, 3], 0.1, &mut rng);
        let geom = Conv3dGeometry {
            stride: [1, 1, 1],
            padding: [1, 1, 1],
        };
        group.bench_function(format!("{ci}to{co}_{side}px"), |b| {
            b.iter(|| x.conv3d(&w, None, geom).unwrap())
        });
    }
    group.finish();
}

fn quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("nearest_codes");
    let n_z = 64;
    for k in [256usize, 1024] {
        let z = Tensor::<f32>::randn(&[512, n_z], 1.0, &mut rng);
        let e = Tensor::<f32>::randn(&[k, n_z], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| nearest_codes(z.data(), e.data(), n_z).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, attention, conv3d, quantize);
criterion_main!(benches);
