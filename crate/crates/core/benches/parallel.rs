use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use chats_lab::config::ExperimentConfig;
use chats_lab::guidance::{sample_batch, GuidanceConfig, Guided};
use chats_lab::models::{clone_as_triple, ConditionalField};
use chats_lab::objectives::{loss_chats, PairBatch, PairSample};
use chats_lab::parallel::{self, Execution};
use chats_lab::processes::Time;

fn normal(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..2).map(|_| rng.sample(StandardNormal)).collect()
}

fn bench(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let sched = cfg.schedule.build().unwrap();
    let net = ConditionalField::new(cfg.architecture.clone(), cfg.mode(), 0).unwrap();
    let triple = clone_as_triple(&net).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = PairBatch {
        records: (0..256)
            .map(|_| PairSample {
                cond: rng.random_range(0..cfg.task.num_conditions),
                z0_plus: normal(&mut rng),
                z0_minus: normal(&mut rng),
                eps_plus: normal(&mut rng),
                eps_minus: normal(&mut rng),
                t: Time::Step(rng.random_range(1..=sched.train_steps)),
                drop_minus: false,
            })
            .collect(),
    };
    let jobs: Vec<(usize, u64)> = (0..64).map(|i| (i % cfg.task.num_conditions, i as u64)).collect();
    let pair = Guided::Pair {
        preferred: triple.field(chats_lab::models::Role::Preferred),
        dispreferred: triple.field(chats_lab::models::Role::Dispreferred),
    };
    let guidance = GuidanceConfig::default();

    let mut group = c.benchmark_group("execution");
    group.sample_size(10);
    for (name, mode) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::new("loss_chats_256", name), &mode, |b, &mode| {
            parallel::set_execution(mode);
            b.iter(|| loss_chats(&triple, &batch, &sched, cfg.train.chats.t_scale).unwrap());
        });
        group.bench_with_input(BenchmarkId::new("sample_64", name), &mode, |b, &mode| {
            parallel::set_execution(mode);
            b.iter(|| sample_batch(&pair, &jobs, &guidance, &sched).unwrap());
        });
    }
    parallel::set_execution(Execution::Parallel);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
