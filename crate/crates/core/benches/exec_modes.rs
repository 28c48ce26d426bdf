use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use latentkf::data::{generate_dataset, InitialLaw};
use latentkf::encoder::{Encoder, EncoderArch};
use latentkf::metrics::initial_estimate;
use latentkf::pipeline::LatentKalmanNet;
use latentkf::gainnet::{GainNet, GainNetArch};
use latentkf::ssm::SsModelSpec;
use latentkf_autodiff::ExecMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn data_generation(c: &mut Criterion) {
    let spec = SsModelSpec::pendulum(15.2);
    let law = InitialLaw::pendulum();
    let mut group = c.benchmark_group("generate_dataset");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, "32x50"), |b| {
            b.iter(|| generate_dataset(&spec, 32, 50, &law, 7, exec).unwrap())
        });
    }
    group.finish();
}

fn encoder_batch(c: &mut Criterion) {
    let spec = SsModelSpec::pendulum(15.2);
    let ds = generate_dataset(&spec, 4, 64, &InitialLaw::pendulum(), 1, ExecMode::Sequential).unwrap();
    let enc = Encoder::<f32>::new(EncoderArch::standard(28, 28, 1), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let frames = ds.trajectory(0).frames;
    let mut group = c.benchmark_group("encode_batch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, "64 frames"), |b| {
            b.iter(|| enc.encode_batch_with(frames, None, exec).unwrap())
        });
    }
    group.finish();
}

fn pipeline_batch(c: &mut Criterion) {
    let spec = SsModelSpec::pendulum(15.2);
    let ds = generate_dataset(&spec, 16, 30, &InitialLaw::pendulum(), 3, ExecMode::Sequential).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = EncoderArch::for_model(&spec, &ds, true);
    let enc = Encoder::<f32>::new(arch, &mut rng).unwrap();
    let angular = spec.angular().to_vec();
    let garch = GainNetArch::for_dims(
        spec.m(),
        spec.selection.indices(),
        &angular,
        &spec.selection.angular_rows(&angular),
    );
    let gain = GainNet::new(garch, &mut rng).unwrap();
    let net = LatentKalmanNet::new(spec.model, spec.selection.clone(), enc, gain).unwrap();
    let frames: Vec<&[f32]> = (0..ds.count()).map(|d| ds.trajectory(d).frames).collect();
    let x0s: Vec<Vec<f64>> = (0..ds.count()).map(|d| initial_estimate(ds.trajectory(d).state(0), 0, d)).collect();
    let mut group = c.benchmark_group("infer_batch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, "16x30"), |b| {
            b.iter(|| net.infer_batch(&frames, &x0s, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, data_generation, encoder_batch, pipeline_batch);
criterion_main!(benches);
