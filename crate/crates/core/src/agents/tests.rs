use super::*;
use crate::engine::{make_world, JointAction, ScenarioSpec};
use crate::gradfield::{FieldKind, GradientFields, NoiseSchedule, ScoreNet};

fn fields() -> GradientFields {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = NoiseSchedule::default();
    GradientFields::new(
        ScoreNet::new(FieldKind::Entity, 4, 16, s, &mut rng).unwrap(),
        ScoreNet::new(FieldKind::Boundary, 2, 16, s, &mut rng).unwrap(),
    )
    .unwrap()
}

fn setup(kind: ScenarioKind, n: usize) -> (Encoder, crate::engine::WorldState) {
    let spec = ScenarioSpec::new(kind, n);
    let mut w = make_world(&spec, 5).unwrap();
    let k = w.num_agents();
    w.step(&JointAction(vec![Vec2::new(0.4, -0.2); k])).unwrap();
    (Encoder::new(&spec, fields()), w)
}

fn meta(enc: &Encoder, role: Role) -> BundleMeta {
    BundleMeta {
        scenario: enc.spec.kind,
        n_per_side: enc.spec.n_per_side,
        role,
        dims: enc.dims(role),
    }
}

fn bundle(enc: &Encoder, variant: Variant, seed: u64) -> PolicyBundle {
    PolicyBundle::new(
        variant,
        CriticKind::Centralized,
        meta(enc, Role::Agent),
        seed,
    )
    .unwrap()
}

#[test]
fn weights_are_a_probability_vector() {
    let (enc, w) = setup(ScenarioKind::Spread, 3);
    let b = bundle(&enc, Variant::SelfAtt, 1);
    let e = enc.encode(&w, 0, false).unwrap();
    let gs = e.goals;
    let out = selfatt_forward(&b, &gs).unwrap();
    assert_eq!(out.weights.len(), gs.len());
    assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(out.weights.iter().all(|&x| x > 0.0));
}

#[test]
fn duplicate_goals_share_weight() {
    let (enc, w) = setup(ScenarioKind::Spread, 2);
    let b = bundle(&enc, Variant::SelfAtt, 2);
    let e = enc.encode(&w, 0, false).unwrap();
    let mut gs = e.goals;
    let copy = gs.goals[0].clone();
    gs.goals.insert(1, copy);
    let out = selfatt_forward(&b, &gs).unwrap();
    assert_eq!(out.weights[0], out.weights[1]);
}

#[test]
fn weighted_goal_is_linear_in_values() {
    let (enc, w) = setup(ScenarioKind::Spread, 2);
    let b = bundle(&enc, Variant::SelfAtt, 3);
    let e = enc.encode(&w, 0, false).unwrap();
    let gs = e.goals;
    let out = selfatt_forward(&b, &gs).unwrap();
    let p = b.self_att().unwrap();
    let mut manual = vec![0.0; HIDDEN];
    for (j, g) in gs.goals.iter().enumerate() {
        let fj = crate::tensor::two_layer_mlp(&b.actor, &p.f, &g.features).unwrap();
        let vj = crate::tensor::two_layer_mlp(&b.actor, &p.v, &fj).unwrap();
        // Dropping goal j's value removes exactly w_j * V_j.
        for k in 0..HIDDEN {
            manual[k] += out.weights[j] * vj[k];
        }
    }
    for k in 0..HIDDEN {
        assert!((manual[k] - out.weighted_goal[k]).abs() < 1e-12);
    }
}

#[test]
fn deterministic_actions_repeat() {
    let (enc, w) = setup(ScenarioKind::Spread, 2);
    let b = bundle(&enc, Variant::SelfAtt, 4);
    let e = enc.encode(&w, 1, false).unwrap();
    let obs = e.obs;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = act(&b, &obs, &mut rng, false).unwrap();
    let c = act(&b, &obs, &mut rng, false).unwrap();
    assert_eq!(a, c);
}

#[test]
fn log_prob_at_mean_is_closed_form() {
    let ls = [-0.3, 0.2];
    let lp = gaussian_log_prob([0.1, 0.5], [0.1, 0.5], ls);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let expect = -0.5 * ls.iter().map(|l| 2.0 * l + ln_2pi).sum::<f64>();
    assert!((lp - expect).abs() < 1e-14);
}

#[test]
fn vanishing_std_samples_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, _, _) = sample_action([0.3, -0.4], [-60.0, -60.0], &mut rng, true);
    assert!((a.x - 0.3).abs() < 1e-20 && (a.y + 0.4).abs() < 1e-20);
}

#[test]
fn sampled_actions_are_clamped() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let (a, _, _) = sample_action([0.9, -0.9], [1.0, 1.0], &mut rng, true);
        assert!(a.x.abs() <= 1.0 && a.y.abs() <= 1.0);
    }
}

#[test]
fn inverse_network_outputs_distributions() {
    let (enc, w) = setup(ScenarioKind::Spread, 3);
    let iw = IWNet::new(Role::Agent, 3);
    let e = enc.encode(&w, 0, false).unwrap();
    let gs = e.goals;
    let p = iw_forward_goals(&iw, &gs, Vec2::new(0.1, 0.2)).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut one = gs.clone();
    one.goals.truncate(1);
    assert_eq!(iw_forward_goals(&iw, &one, Vec2::ZERO).unwrap(), vec![1.0]);
}

#[test]
fn iw_loss_closed_forms() {
    let (enc, w) = setup(ScenarioKind::Spread, 3);
    let mut iw = IWNet::new(Role::Agent, 3);
    let e = enc.encode(&w, 0, false).unwrap();
    let obs = e.obs;

    let gs = e.goals;
    let input = IwInput::from_goalset(&gs, enc.layout(0), Vec2::ZERO).unwrap();
    let pred = iw_forward(&iw, &input).unwrap();
    assert!(iw_loss(&iw, &[(pred, input.clone())]).unwrap().abs() < 1e-30);

    // Zero query weights make every logit zero, hence a uniform prediction.
    let q = iw.attention.query;
    iw.store.value_mut(q).fill(0.0);
    let k = obs.goals() as f64;
    let mut onehot = vec![0.0; obs.goals()];
    onehot[2] = 1.0;
    let loss = iw_loss(&iw, &[(onehot, input)]).unwrap();
    let expect = ((1.0 - 1.0 / k).powi(2) + (k - 1.0) / (k * k)) / k;
    assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
}

#[test]
fn fresh_uw_returns_own_weights() {
    let (enc, _) = setup(ScenarioKind::Spread, 3);
    let sa = bundle(&enc, Variant::SelfAtt, 5);
    let inv = PolicyBundle::compose_inverse(&sa, IWNet::new(Role::Agent, 1)).unwrap();
    let g = enc.dims(Role::Agent).goals;
    let own: Vec<f64> = (0..g).map(|i| (i + 1) as f64).collect();
    let total: f64 = own.iter().sum();
    let own: Vec<f64> = own.iter().map(|v| v / total).collect();
    let other = vec![vec![0.5; g]];
    let out = uw_update(&inv, &own, &other, None).unwrap();
    for (a, b) in out.iter().zip(&own) {
        assert!((a - b).abs() < 1e-15);
    }
    let zero = uw_update(&inv, &own, &[], None).unwrap();
    assert_eq!(out, zero);
    let too_many = vec![vec![0.0; g]; 3];
    assert!(uw_update(&inv, &own, &too_many, None).is_err());
}

#[test]
fn random_uw_stays_on_the_simplex() {
    let (enc, _) = setup(ScenarioKind::Spread, 3);
    let sa = bundle(&enc, Variant::SelfAtt, 5);
    let mut inv = PolicyBundle::compose_inverse(&sa, IWNet::new(Role::Agent, 1)).unwrap();
    let uw = inv.uw().unwrap().layer;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    inv.actor
        .value_mut(uw.weight)
        .mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let g = enc.dims(Role::Agent).goals;
    for _ in 0..20 {
        let own: Vec<f64> = (0..g).map(|_| rng.random::<f64>()).collect();
        let mate = vec![(0..g).map(|_| rng.random::<f64>()).collect()];
        let out = uw_update(&inv, &own, &mate, None).unwrap();
        assert!(out.iter().all(|&v| v >= 0.0));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn inverse_at_init_matches_self_attention() {
    let (enc, w) = setup(ScenarioKind::Spread, 3);
    let sa = bundle(&enc, Variant::SelfAtt, 6);
    let inv = PolicyBundle::compose_inverse(&sa, IWNet::new(Role::Agent, 2)).unwrap();
    for agent in 0..3 {
        let e = enc.encode(&w, agent, true).unwrap();
        let obs = e.obs;

        let gs = e.goals;

        let mates = e.teammates;
        assert_eq!(mates.len(), 2);
        let base = selfatt_forward(&sa, &gs).unwrap();
        let (_, mean) = inverse_forward(&inv, &obs, &mates).unwrap();
        assert!((mean.x - base.action_mean.x).abs() < 1e-12);
        assert!((mean.y - base.action_mean.y).abs() < 1e-12);
        let (_, alone) = inverse_forward(&inv, &obs, &[]).unwrap();
        assert!((alone.x - base.action_mean.x).abs() < 1e-12);
    }
}

#[test]
fn inverse_requires_matching_role_and_variant() {
    let (enc, _) = setup(ScenarioKind::Adversary, 2);
    let sa = PolicyBundle::new(
        Variant::SelfAtt,
        CriticKind::Centralized,
        meta(&enc, Role::Wolf),
        0,
    )
    .unwrap();
    assert!(PolicyBundle::compose_inverse(&sa, IWNet::new(Role::Sheep, 0)).is_err());
    let mlp = PolicyBundle::new(
        Variant::MlpBaseline,
        CriticKind::Centralized,
        meta(&enc, Role::Wolf),
        0,
    )
    .unwrap();
    assert!(PolicyBundle::compose_inverse(&mlp, IWNet::new(Role::Wolf, 0)).is_err());
}

#[test]
fn teammate_mapping_drops_observer_and_aligns_wall() {
    let (enc, w) = setup(ScenarioKind::Spread, 3);
    let e = enc.encode(&w, 1, true).unwrap();
    let mates = e.teammates;
    let own = enc.layout(1);
    for m in &mates {
        let theirs = enc.layout(enc.teammates(1)[m.slot]);
        for (k, target) in theirs.keys.iter().zip(&m.mapping) {
            match target {
                Some(t) => assert_eq!(own.keys[*t], *k),
                None => assert_eq!(
                    *k,
                    crate::gradfield::GoalKey::Entity {
                        role: Role::Agent,
                        id: 1
                    }
                ),
            }
        }
    }
}

#[test]
fn permuting_goals_permutes_weights_and_keeps_action() {
    let (enc, w) = setup(ScenarioKind::Spread, 3);
    let b = bundle(&enc, Variant::SelfAtt, 7);
    let iw = IWNet::new(Role::Agent, 7);
    let e = enc.encode(&w, 0, false).unwrap();
    let gs = e.goals;
    let base = selfatt_forward(&b, &gs).unwrap();
    let ibase = iw_forward_goals(&iw, &gs, Vec2::new(0.2, 0.1)).unwrap();
    let mut perm = gs.clone();
    perm.goals.reverse();
    let out = selfatt_forward(&b, &perm).unwrap();
    let iout = iw_forward_goals(&iw, &perm, Vec2::new(0.2, 0.1)).unwrap();
    let n = gs.len();
    for j in 0..n {
        assert!((out.weights[j] - base.weights[n - 1 - j]).abs() < 1e-12);
        assert!((iout[j] - ibase[n - 1 - j]).abs() < 1e-12);
    }
    assert!((out.action_mean.x - base.action_mean.x).abs() < 1e-12);
    assert!((out.action_mean.y - base.action_mean.y).abs() < 1e-12);
}

#[test]
fn batch_layout_must_match_bundle() {
    let (enc, w) = setup(ScenarioKind::Spread, 3);
    let (enc2, w2) = setup(ScenarioKind::Spread, 2);
    let b = bundle(&enc, Variant::MlpBaseline, 1);
    let e = enc2.encode(&w2, 0, false).unwrap();
    let obs = e.obs;
    assert!(b.policy(&ObsBatch::new(&[&obs]).unwrap()).is_err());
    let e = enc.encode(&w, 0, false).unwrap();
    let obs = e.obs;
    assert_eq!(b.values(&ObsBatch::new(&[&obs]).unwrap()).unwrap().len(), 1);
}

#[test]
fn self_goal_helper_matches_goalset() {
    let (enc, w) = setup(ScenarioKind::Tag, 2);
    let e = enc.encode(&w, 0, false).unwrap();
    let gs = e.goals;
    assert_eq!(self_goal(&gs.self_info), gs.self_goal());
}
