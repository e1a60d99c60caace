use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ptss::data::{Split, Window};
use ptss::exec::Execution;
use ptss::network::{ModelConfig, ModelParams};
use ptss::prompt::PromptSet;
use ptss::session::predict_series;
use ptss::synth::{synthesize_dataset, SynthSpec};
use ptss::trainer::{batch_gradient, TrainConfig};

fn setup() -> (ModelParams<f32>, Vec<Window>, ptss::data::MultivariateSeries) {
    let mut spec = SynthSpec::hypercube(3, 8, 4.0, 1.0);
    spec.length = 4000;
    let ds = synthesize_dataset(&spec, 0).unwrap();
    let cfg = ModelConfig {
        window: 128,
        channels: 3,
        k_total: ds.spec.k_total(),
        d_model: 64,
        mlp_hidden: 128,
        decoder_layers: 3,
        levels: ds.spec.levels.clone(),
        ..Default::default()
    };
    let params = ModelParams::init(&cfg, 0).unwrap();
    let windows = ds.split_windows(Split::Train, 128, 128).unwrap();
    (params, windows, ds.series[0].clone())
}

fn modes() -> Vec<(&'static str, Execution)> {
    vec![("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn batch_gradients(c: &mut Criterion) {
    let (params, windows, _) = setup();
    let batch: Vec<&Window> = windows.iter().take(8).collect();
    let seeds: Vec<u64> = (0..batch.len() as u64).collect();
    let cfg = TrainConfig {
        iterations: 2,
        ..Default::default()
    };
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradient(&params, &batch, &seeds, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn series_prediction(c: &mut Criterion) {
    let (params, _, series) = setup();
    let mut group = c.benchmark_group("predict_series");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict_series(&params, &series, &PromptSet::new(), 64, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, series_prediction);
criterion_main!(benches);
