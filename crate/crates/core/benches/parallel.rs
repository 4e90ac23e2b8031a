//! One worker vs the default rayon pool on the data-parallel hot paths.
//! Build with `--no-default-features` to time the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ecgdx::dsp::denoise;
use ecgdx::features::FeatureVector;
use ecgdx::nn::{prepare, Model, ModelConfig, Tensor};
use ecgdx::par::with_threads;
use ecgdx::record::NUM_LEADS;
use ecgdx::synth::{generate, generate_dataset, parse_mix, DatasetSpec, SynthSpec};

const POOLS: [(&str, usize); 2] = [("one-thread", 1), ("default-pool", 0)];

fn bench_denoise(c: &mut Criterion) {
    let rec = generate(&SynthSpec { duration_s: 20.0, ..Default::default() }).unwrap().record;
    let mut g = c.benchmark_group("denoise_20s");
    for (name, threads) in POOLS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || denoise(&rec).unwrap()))
        });
    }
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut model = Model::<f32>::new(ModelConfig::reduced(), 1).unwrap();
    let (batch, len) = (8, 4096);
    let data = (0..batch * NUM_LEADS * len).map(|i| ((i % 251) as f32 * 0.01).sin()).collect();
    let x = Tensor::from_vec(&[batch, NUM_LEADS, len], data).unwrap();
    let f = model.feature_tensor(&vec![FeatureVector::default(); batch]);
    // One training pass fills the batch-norm running statistics.
    model.forward_train(&x, Some(&f)).unwrap();
    let mut g = c.benchmark_group("forward_reduced_b8");
    g.sample_size(10);
    for (name, threads) in POOLS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || model.predict_proba(&x, Some(&f)).unwrap()))
        });
    }
    g.finish();
}

fn bench_prepare(c: &mut Criterion) {
    let spec = DatasetSpec::new(parse_mix("normal=4,af=4,pvc=4,pac=4").unwrap(), 3);
    let (data, _) = generate_dataset(&spec).unwrap();
    let mut g = c.benchmark_group("prepare_16_records");
    g.sample_size(10);
    for (name, threads) in POOLS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(threads, || prepare(&data).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_denoise, bench_forward, bench_prepare);
criterion_main!(benches);
