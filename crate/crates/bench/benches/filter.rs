use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use evkf_core::baselines::{bpf_step, enkf_step, Ensemble, ParticleCloud, DEFAULT_RESAMPLE_THRESHOLD};
use evkf_core::experiment::learning_config;
use evkf_core::filter::{predict, update, EvkfConfig};
use evkf_core::metrics::chamfer;
use evkf_core::rng::seeded;
use evkf_core::simulate::{default_learner, make_experiment, ExperimentSpec, System, Trajectory, VDP_SIGMA};
use evkf_core::Evkf;
use nalgebra::DMatrix;

fn data(system: System, steps: usize) -> Trajectory {
    make_experiment(&ExperimentSpec { system, latent_dim: None, obs_dim: None, steps, seed: 0 }).unwrap()
}

fn evkf_step(c: &mut Criterion) {
    let tr = data(System::VdpPoisson, 600);
    let learner = default_learner(System::VdpPoisson, 2, VDP_SIGMA * VDP_SIGMA, &mut seeded(1)).unwrap();
    let mut group = c.benchmark_group("evkf_step_vdp_poisson");
    for (name, config) in [("frozen", EvkfConfig::default()), ("learning", learning_config(150))] {
        let mut filter = Evkf::new(config, learner.clone(), tr.meta.observations.clone(), None).unwrap();
        let mut rng = seeded(2);
        let mut t = 0;
        group.bench_function(name, |b| {
            b.iter(|| {
                filter.step(&tr.observation(t % tr.len()), &mut rng).unwrap();
                t += 1;
            })
        });
    }
    group.finish();
}

fn predict_update(c: &mut Criterion) {
    let tr = data(System::VdpPoisson, 10);
    let learner = default_learner(System::VdpPoisson, 2, VDP_SIGMA * VDP_SIGMA, &mut seeded(1)).unwrap();
    let config = EvkfConfig::default();
    let q = learner.family().default_prior();
    let mut rng = seeded(3);
    c.bench_function("predict_gaussian_mlp", |b| b.iter(|| predict(black_box(&q), &learner, &config, &mut rng).unwrap()));
    let pred = predict(&q, &learner, &config, &mut rng).unwrap();
    let y = tr.observation(0);
    c.bench_function("cvi_update_poisson_50", |b| {
        b.iter(|| update(black_box(&pred), &tr.meta.observations, &y, &config).unwrap())
    });
}

fn baselines(c: &mut Criterion) {
    let tr = data(System::Crnn, 10);
    let prior = tr.meta.dynamics.family().default_prior();
    let y = tr.observation(0);
    let mut rng = seeded(4);
    let cloud = ParticleCloud::from_prior(&prior, 10_000, &mut rng).unwrap();
    c.bench_function("bpf_step_10000", |b| {
        b.iter_batched(
            || cloud.clone(),
            |cl| bpf_step(&cl, &tr.meta.dynamics, &tr.meta.observations, &y, &mut rng, DEFAULT_RESAMPLE_THRESHOLD).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let ensemble = Ensemble::from_prior(&prior, 1000, &mut rng).unwrap();
    c.bench_function("enkf_step_1000", |b| {
        b.iter(|| enkf_step(black_box(&ensemble), &tr.meta.dynamics, &tr.meta.observations, &y, &mut rng).unwrap())
    });
}

fn chamfer_distance(c: &mut Criterion) {
    let tr = data(System::VdpPoisson, 5000);
    let a = tr.latents.rows(0, 2500).into_owned();
    let b: DMatrix<f64> = tr.latents.rows(2500, 2500).into_owned();
    c.bench_function("chamfer_2500x2500", |bench| bench.iter(|| chamfer(black_box(&a), black_box(&b)).unwrap()));
}

criterion_group!(benches, evkf_step, predict_update, baselines, chamfer_distance);
criterion_main!(benches);
