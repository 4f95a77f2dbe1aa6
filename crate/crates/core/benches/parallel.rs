use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use iatt_core::agents::{CriticKind, Encoder, Variant};
use iatt_core::engine::{Role, ScenarioKind, ScenarioSpec};
use iatt_core::evaluation::{run_tournament, AgentPool, PoolEntry, TournamentConfig};
use iatt_core::gradfield::GradientFields;
use iatt_core::par::Execution;
use iatt_core::training::{collect_rollout, EnvPool, Learners};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn rollout(c: &mut Criterion) {
    let fields = GradientFields::quick(0, 500, 5).unwrap();
    let spec = ScenarioSpec::new(ScenarioKind::Adversary, 2).with_horizon(50);
    let learners = Learners::new(
        &spec,
        Variant::SelfAtt,
        CriticKind::Centralized,
        0.01,
        false,
        1,
    )
    .unwrap();
    let mut group = c.benchmark_group("rollout_8x50");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let enc = Encoder::new(&spec, fields.clone());
                let mut pool = EnvPool::new(enc, 8, 3, exec).unwrap();
                black_box(collect_rollout(&mut pool, &learners, 50, None).unwrap())
            })
        });
    }
    group.finish();
}

fn tournament(c: &mut Criterion) {
    let fields = GradientFields::quick(0, 500, 5).unwrap();
    let spec = ScenarioSpec::new(ScenarioKind::Adversary, 2);
    let mut entries = Vec::new();
    for (seed, role) in [Role::Wolf, Role::Sheep].into_iter().enumerate() {
        let l = Learners::new(
            &spec,
            Variant::SelfAtt,
            CriticKind::Centralized,
            0.01,
            true,
            seed as u64,
        )
        .unwrap();
        let bundle = l.bundles.into_iter().find(|b| b.meta.role == role).unwrap();
        entries.push(PoolEntry::policy("self_att", 0, bundle));
        entries.push(PoolEntry::random(role, 0));
    }
    let pool = AgentPool::new(entries, fields);
    let mut group = c.benchmark_group("tournament_40x50");
    group.sample_size(10);
    for (name, execution) in MODES {
        let config = TournamentConfig {
            episodes: 40,
            steps: 50,
            chunk: 10,
            execution,
            ..TournamentConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(run_tournament(&pool, &spec, &config).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, rollout, tournament);
criterion_main!(benches);
