use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::agents::{BundleMeta, CriticKind, ObsDims};
use crate::engine::{ScenarioKind, ARENA_DIAGONAL};
use crate::gradfield::{FieldKind, NoiseSchedule, ScoreNet};

fn fields() -> GradientFields {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = NoiseSchedule::default();
    GradientFields::new(
        ScoreNet::new(FieldKind::Entity, 4, 16, s, &mut rng).unwrap(),
        ScoreNet::new(FieldKind::Boundary, 2, 16, s, &mut rng).unwrap(),
    )
    .unwrap()
}

fn bundle(spec: &ScenarioSpec, role: Role, variant: Variant, seed: u64) -> PolicyBundle {
    let meta = BundleMeta {
        scenario: spec.kind,
        n_per_side: spec.n_per_side,
        role,
        dims: ObsDims::new(spec, role),
    };
    // A large output gain gives visibly different untrained policies.
    PolicyBundle::with_gain(variant, CriticKind::Centralized, meta, 1.0, seed).unwrap()
}

fn cfg(episodes: usize, steps: usize) -> TournamentConfig {
    TournamentConfig {
        episodes,
        steps,
        seed: 7,
        chunk: 4,
        execution: Execution::Parallel,
    }
}

#[test]
fn rank_accuracy_examples() {
    let t = vec![vec![0.1, 0.5, 0.3, 0.1], vec![0.7, 0.2, 0.1, 0.0]];
    assert_eq!(rank_accuracy(&t, &t).unwrap(), vec![1.0; 4]);
    let reversed: Vec<Vec<f64>> = t
        .iter()
        .map(|w| w.iter().map(|x| 1.0 - x).collect())
        .collect();
    assert_eq!(rank_accuracy(&reversed, &t).unwrap()[0], 0.0);
    assert!(rank_accuracy(&t[..1], &t).is_err());
    assert!(rank_accuracy(&[vec![0.5, 0.5]], &[vec![0.2, 0.3, 0.5]]).is_err());
}

#[test]
fn ties_break_by_goal_index() {
    assert_eq!(ranking(&[0.2, 0.4, 0.4, 0.0]), vec![1, 2, 0, 3]);
}

#[test]
fn random_predictions_score_a_quarter_per_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draw = |rng: &mut ChaCha8Rng| (0..4).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
    let truth: Vec<Vec<f64>> = (0..10_000).map(|_| draw(&mut rng)).collect();
    let pred: Vec<Vec<f64>> = (0..10_000).map(|_| draw(&mut rng)).collect();
    for a in rank_accuracy(&pred, &truth).unwrap() {
        assert!((a - 0.25).abs() < 0.02, "{a}");
    }
}

proptest! {
    #[test]
    fn rank_accuracy_ignores_monotone_transforms(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(0.0..1.0f64, 5), proptest::collection::vec(0.0..1.0f64, 5)),
            1..30,
        ),
        k in 0.1..5.0f64,
    ) {
        let (p, t): (Vec<Vec<f64>>, Vec<Vec<f64>>) = pairs.into_iter().unzip();
        let f = |v: &Vec<f64>| v.iter().map(|x| (k * x).exp() + 3.0).collect::<Vec<f64>>();
        let pt: Vec<Vec<f64>> = p.iter().map(f).collect();
        let tt: Vec<Vec<f64>> = t.iter().map(f).collect();
        prop_assert_eq!(rank_accuracy(&p, &t).unwrap(), rank_accuracy(&pt, &tt).unwrap());
    }
}

fn spread_pool(spec: &ScenarioSpec) -> AgentPool {
    AgentPool::new(
        vec![
            PoolEntry::policy(
                "self_att",
                0,
                bundle(spec, Role::Agent, Variant::SelfAtt, 1),
            ),
            PoolEntry::policy(
                "self_att",
                1,
                bundle(spec, Role::Agent, Variant::SelfAtt, 2),
            ),
            PoolEntry::random(Role::Agent, 0),
        ],
        fields(),
    )
}

#[test]
fn single_method_pool_fills_every_slot() {
    let spec = ScenarioSpec::new(ScenarioKind::Spread, 3);
    let pool = AgentPool::new(vec![PoolEntry::random(Role::Agent, 0)], fields());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        sample_composition(&pool, &spec, &mut rng).unwrap(),
        vec![0, 0, 0]
    );
}

#[test]
fn two_methods_split_evenly() {
    let spec = ScenarioSpec::new(ScenarioKind::Spread, 2);
    let pool = spread_pool(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let mut random = [0usize; 2];
    for _ in 0..n {
        let c = sample_composition(&pool, &spec, &mut rng).unwrap();
        for (slot, k) in c.into_iter().enumerate() {
            random[slot] += usize::from(k == 2);
        }
    }
    let sd = (n as f64 * 0.25).sqrt();
    for r in random {
        assert!((r as f64 - n as f64 / 2.0).abs() < 3.0 * sd, "{r}");
    }
    let again = |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        (0..20)
            .map(|_| sample_composition(&pool, &spec, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(again(4), again(4));
}

#[test]
fn tournament_is_reproducible_and_recountable() {
    let spec = ScenarioSpec::new(ScenarioKind::Spread, 2);
    let pool = spread_pool(&spec);
    let a = run_tournament(&pool, &spec, &cfg(10, 20)).unwrap();
    assert_eq!(a.log.len(), 10);
    assert_eq!(a, run_tournament(&pool, &spec, &cfg(10, 20)).unwrap());
    let seq = TournamentConfig {
        execution: Execution::Sequential,
        ..cfg(10, 20)
    };
    assert_eq!(a, run_tournament(&pool, &spec, &seq).unwrap());
    assert_eq!(recount(&a.log), a.rows);
    // Attribution conservation.
    let grand: f64 = a.log.iter().flat_map(|e| e.rewards.iter()).sum();
    let attributed: f64 = a.rows.iter().map(|r| r.mean * r.count as f64).sum();
    assert!((grand - attributed).abs() < 1e-9 * (1.0 + grand.abs()));
    assert_eq!(a.rows.iter().map(|r| r.count).sum::<usize>(), 20);
    assert!(a.table().contains("random"));
}

#[test]
fn identical_checkpoints_tie() {
    let spec = ScenarioSpec::new(ScenarioKind::Adversary, 1);
    let wolf = bundle(&spec, Role::Wolf, Variant::SelfAtt, 3);
    let sheep = bundle(&spec, Role::Sheep, Variant::SelfAtt, 4);
    let pool = AgentPool::new(
        vec![
            PoolEntry::policy("a", 0, wolf.clone()),
            PoolEntry::policy("b", 0, wolf),
            PoolEntry::policy("a", 0, sheep.clone()),
            PoolEntry::policy("b", 0, sheep),
        ],
        fields(),
    );
    let r = run_tournament(&pool, &spec, &cfg(40, 30)).unwrap();
    for role in [Role::Wolf, Role::Sheep] {
        let (a, b) = (r.row("a", role).unwrap(), r.row("b", role).unwrap());
        assert!((a.mean - b.mean).abs() <= 2.0 * (a.stderr + b.stderr) + 1e-12);
    }
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let spec = ScenarioSpec::new(ScenarioKind::Spread, 2);
    let other = ScenarioSpec::new(ScenarioKind::Spread, 3);
    let pool = AgentPool::new(
        vec![PoolEntry::policy(
            "x",
            0,
            bundle(&other, Role::Agent, Variant::SelfAtt, 0),
        )],
        fields(),
    );
    assert!(matches!(
        run_tournament(&pool, &spec, &cfg(2, 5)),
        Err(Error::Config(_))
    ));
    let empty = AgentPool::new(vec![PoolEntry::random(Role::Wolf, 0)], fields());
    assert!(matches!(
        run_tournament(
            &empty,
            &ScenarioSpec::new(ScenarioKind::Adversary, 1),
            &cfg(2, 5)
        ),
        Err(Error::Config(_))
    ));
}

fn inverse_entry(spec: &ScenarioSpec, seed: u64) -> PoolEntry {
    let sa = bundle(spec, Role::Agent, Variant::SelfAtt, seed);
    let mut inv =
        PolicyBundle::compose_inverse(&sa, crate::agents::IWNet::new(Role::Agent, seed)).unwrap();
    // Nudge the fusion head so inverse agents act differently from their base.
    let id = inv.actor.find("uw.bias").unwrap();
    inv.actor.value_mut(id).fill(0.3);
    PoolEntry::policy("inverse_att", 0, inv)
}

#[test]
fn sweep_zero_column_is_the_baseline_tournament() {
    let c = cfg(6, 15);
    let scales: Vec<SweepScale> = [2usize, 3]
        .iter()
        .map(|&n| {
            let spec = ScenarioSpec::new(ScenarioKind::Spread, n);
            SweepScale {
                scale: n,
                baseline: AgentPool::new(
                    vec![PoolEntry::policy(
                        "mappo",
                        0,
                        bundle(&spec, Role::Agent, Variant::MlpBaseline, 5),
                    )],
                    fields(),
                ),
                inverse: vec![inverse_entry(&spec, 6)],
            }
        })
        .collect();
    let rep = multi_inverse_sweep(ScenarioKind::Spread, Role::Agent, &scales, &c).unwrap();
    assert_eq!(rep.cells.len(), 3 + 4);
    assert!(rep.cell(2, 3).is_none());
    for s in &scales {
        let spec = ScenarioSpec::new(ScenarioKind::Spread, s.scale);
        let t = run_tournament(&s.baseline, &spec, &c).unwrap();
        let team: Vec<f64> = t.log.iter().map(|e| e.rewards.iter().sum()).collect();
        assert_eq!(
            rep.cell(s.scale, 0).unwrap().team_mean,
            mean_stderr(&team).0
        );
    }
    assert!(rep.table().contains("#inverse=3"));
}

#[test]
fn partial_observation_contract() {
    let spec = ScenarioSpec::new(ScenarioKind::Spread, 2);
    let mut pool = spread_pool(&spec);
    pool.entries.push(inverse_entry(&spec, 8));
    let c = cfg(8, 25);
    let rep = partial_obs_eval(
        &pool,
        &spec,
        &[
            None,
            Some(ARENA_DIAGONAL + 0.1),
            Some(1.5),
            Some(1.0),
            Some(0.5),
        ],
        &c,
    )
    .unwrap();
    let full = &rep.rows[0].report;
    let wide = &rep.rows[1].report;
    assert_eq!(full.log, wide.log);
    assert_eq!(full.rows, wide.rows);
    assert!(rep.rows[4].mean_visible < rep.rows[2].mean_visible);
    assert!(rep.table().contains("full"));
}
