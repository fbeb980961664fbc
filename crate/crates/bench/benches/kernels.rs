use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcfuse_core::decoder::Mode;
use rcfuse_core::matching::hungarian;
use rcfuse_core::sim::{gen_scene, SimConfig};
use rcfuse_core::{Detector, ModelConfig, Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = random(&mut rng, &[n, n]);
        let b = random(&mut rng, &[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
                black_box(t.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn decoder_depth(c: &mut Criterion) {
    let det = Detector::new(ModelConfig::default(), 0).unwrap();
    let scene = gen_scene(1, &SimConfig::default()).unwrap();
    let mut group = c.benchmark_group("inference");
    group.sample_size(20);
    for layers in [3usize, 6] {
        let mut d = det.clone();
        d.decoder.inference_layers = layers;
        group.bench_with_input(BenchmarkId::new("decoder_layers", layers), &layers, |bench, _| {
            bench.iter(|| black_box(d.detect_with(&scene.input(), Mode::Infer).unwrap()))
        });
    }
    group.finish();
}

fn assignment(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("hungarian");
    for (n, m) in [(24usize, 10usize), (100, 40)] {
        let cost: Vec<f64> = (0..n * m).map(|_| rng.random::<f64>()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{m}")), &cost, |bench, cost| {
            bench.iter(|| black_box(hungarian(cost, n, m).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, decoder_depth, assignment);
criterion_main!(benches);
