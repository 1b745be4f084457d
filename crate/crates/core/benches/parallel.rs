use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crfgan::metrics::{extract_features, FeatureExtractor};
use crfgan::netspec::ModelConfig;
use crfgan::par;
use crfgan::trainer::{dataset_tensors, TrainConfig, TrainState};
use crfgan::volume::{make_phantom, PhantomSpec};

fn desk_state(resolution: usize) -> TrainState {
    TrainState::new(&TrainConfig {
        model: ModelConfig::desk(resolution),
        ..TrainConfig::default()
    })
    .expect("desk config builds")
}

fn bench_pair<F>(c: &mut Criterion, group: &str, mut f: F)
where
    F: FnMut() + Send,
{
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new(par::BACKEND, par::workers()), |b| b.iter(&mut f));
    g.bench_function(BenchmarkId::new("single-thread", 1), |b| {
        par::with_single_thread(|| b.iter(&mut f))
    });
    g.finish();
}

fn generator(c: &mut Criterion) {
    let state = desk_state(32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = state.latent().sample(&mut rng);
    let a = state.nets.g1_forward(&state.params.g1, &z).unwrap();
    bench_pair(c, "g2_forward_32", || {
        black_box(state.nets.g2_forward(&state.params.g2, &a).unwrap());
    });
}

fn crf_score(c: &mut Criterion) {
    let state = desk_state(32);
    let crf = state.crf_model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = state.latent().sample(&mut rng);
    let a = state.nets.g1_forward(&state.params.g1, &z).unwrap();
    bench_pair(c, "crf_score_32", || {
        black_box(crf.score(&a).unwrap());
    });
}

fn train_step(c: &mut Criterion) {
    let mut state = desk_state(32);
    let vols: Vec<_> = (0..2)
        .map(|i| make_phantom(&PhantomSpec::desk(32, i)).unwrap())
        .collect();
    let data = dataset_tensors(&vols, 32).unwrap();
    bench_pair(c, "train_step_32", || {
        black_box(state.train_step(&data).unwrap());
    });
}

fn features(c: &mut Criterion) {
    let ex = FeatureExtractor::new(0, 256).unwrap();
    let vols: Vec<_> = (0..8)
        .map(|i| make_phantom(&PhantomSpec::desk(32, i)).unwrap())
        .collect();
    bench_pair(c, "extract_features_8x32", || {
        black_box(extract_features(&vols, &ex).unwrap());
    });
}

criterion_group!(benches, generator, crf_score, train_step, features);
criterion_main!(benches);
