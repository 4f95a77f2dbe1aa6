use iatt_core::gradfield::{
    gen_boundary_dataset, gen_entity_dataset, train_score_net, FieldKind, GFDataset, NoiseSchedule,
    ScoreFunction, ScoreTrainConfig,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_dataset(n: usize, seed: u64) -> GFDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GFDataset {
        kind: FieldKind::Generic,
        samples: Array2::from_shape_simple_fn((n, 1), || StandardNormal.sample(&mut rng)),
    }
}

/// Mean over a t grid of the relative L2 error against `-x / (1 + sigma^2)` on `[-2, 2]`.
fn gaussian_relative_error(net: &dyn ScoreFunction, schedule: &NoiseSchedule) -> f64 {
    let xs: Vec<f64> = (0..=40).map(|i| -2.0 + 0.1 * i as f64).collect();
    let ts: Vec<f64> = (0..10)
        .map(|i| schedule.epsilon + (schedule.t_max - schedule.epsilon) * i as f64 / 9.0)
        .collect();
    let mut total = 0.0;
    for &t in &ts {
        let x = Array2::from_shape_vec((xs.len(), 1), xs.clone()).unwrap();
        let s = net.score(&x, &vec![t; xs.len()]).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &xv) in xs.iter().enumerate() {
            let oracle = -xv / (1.0 + schedule.weight(t));
            num += (s[[i, 0]] - oracle).powi(2);
            den += oracle * oracle;
        }
        total += (num / den).sqrt();
    }
    total / ts.len() as f64
}

#[test]
fn gaussian_score_matches_closed_form() {
    let schedule = NoiseSchedule::default();
    let hyper = ScoreTrainConfig {
        epochs: 60,
        ..ScoreTrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (net, report) = train_score_net(&gaussian_dataset(10_000, 1), &schedule, &hyper).unwrap();
    let err = gaussian_relative_error(&net, &schedule);
    eprintln!(
        "gauss err {err} loss {} -> {} in {:?}",
        report.first(),
        report.last(),
        t0.elapsed()
    );
    assert!(err < 0.15);
}

#[test]
fn boundary_field_points_inward() {
    let schedule = NoiseSchedule::default();
    let hyper = ScoreTrainConfig {
        epochs: 60,
        ..ScoreTrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (net, report) =
        train_score_net(&gen_boundary_dataset(10_000, 2).unwrap(), &schedule, &hyper).unwrap();
    assert!(report.last() < 0.5 * report.first());
    let probes = [
        (0.95, 0.0),
        (-0.95, 0.0),
        (0.0, 0.95),
        (0.0, -0.95),
        (0.0, 0.0),
    ];
    let x = Array2::from_shape_fn(
        (5, 2),
        |(r, c)| if c == 0 { probes[r].0 } else { probes[r].1 },
    );
    let s = net.score(&x, &[schedule.epsilon; 5]).unwrap();
    eprintln!(
        "boundary {s:?} loss {} -> {} in {:?}",
        report.first(),
        report.last(),
        t0.elapsed()
    );
    for r in 0..4 {
        let inward = -(probes[r].0 * s[[r, 0]] + probes[r].1 * s[[r, 1]]);
        assert!(inward > 0.0);
    }
    let centre = (s[[4, 0]].powi(2) + s[[4, 1]].powi(2)).sqrt();
    let edge = (s[[0, 0]].powi(2) + s[[0, 1]].powi(2)).sqrt();
    assert!(centre < 0.5 * edge);
}

#[test]
fn entity_field_points_toward_zero_offset() {
    let schedule = NoiseSchedule::default();
    let hyper = ScoreTrainConfig {
        epochs: 60,
        ..ScoreTrainConfig::default()
    };
    let (net, report) =
        train_score_net(&gen_entity_dataset(10_000, 3).unwrap(), &schedule, &hyper).unwrap();
    assert!(report.last() < 0.5 * report.first());
    let x =
        Array2::from_shape_vec((2, 4), vec![0.2, -0.3, 0.1, 0.0, 0.2, -0.3, 0.0, -0.1]).unwrap();
    let s = net.score(&x, &[schedule.epsilon; 2]).unwrap();
    eprintln!("entity {s:?} loss {} -> {}", report.first(), report.last());
    assert!(s[[0, 2]] < 0.0);
    assert!(s[[1, 3]] > 0.0);
}
