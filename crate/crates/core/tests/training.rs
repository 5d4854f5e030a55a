//! Behavioral checks of the adversarial training loops on small toy data.

use pct_core::neural::{
    atm_discriminate, atm_prepare, atm_train, atm_train_from, atm_translate, component_series, nets, stm_train,
    GanTrainConfig, LossComponent,
};
use pct_core::metrics::emd_exact;
use pct_core::projection::{project, BeamModel, RangeImage};
use pct_core::sampling::{cap_points, upsample};
use pct_core::simulator::{build_scene, parse_trajectory, raycast_scan, TOY_SCENE, TOY_TRAJECTORY};
use pct_core::{LabeledCloud, PointCloud, SemanticClassMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn beam(rows: usize, cols: usize) -> BeamModel {
    BeamModel {
        rows,
        cols,
        max_range: 60.0,
        ..Default::default()
    }
}

fn toy_scans(beam: &BeamModel) -> Vec<LabeledCloud> {
    let scene = build_scene(TOY_SCENE, &SemanticClassMap::default()).unwrap();
    parse_trajectory(TOY_TRAJECTORY)
        .unwrap()
        .iter()
        .map(|pose| raycast_scan(&scene, pose, beam).unwrap())
        .collect()
}

/// Mean of consecutive windows of `width` entries.
fn window_means(series: &[f64], width: usize) -> Vec<f64> {
    series.chunks(width).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn atm_pure_emd_regression_recovers_the_input() {
    let scan = &toy_scans(&beam(32, 128))[0];
    let capped = cap_points(scan, 128, 1).unwrap().cloud;
    let mut g = nets::generator_a(0, 60.0, nets::DEFAULT_MAX_OFFSET).unwrap();
    // Start away from the identity so there is something to regress.
    let head = format!("l{}.weight", g.last_param_layer().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for v in g.params.get_mut(&head).unwrap().values_mut() {
        *v = rng.random_range(-0.05..0.05);
    }
    let d = nets::discriminator_a(1, 60.0).unwrap();
    let config = GanTrainConfig {
        lambda_adv_a: 0.0,
        steps: 200,
        batch_size: 1,
        train_points: 256,
        ..Default::default()
    };
    let up = upsample(&capped, 2, config.upsample_neighbors).unwrap();
    let before = emd_exact(&up, &atm_translate(&g, &capped, 2).unwrap()).unwrap().total_cost;
    let out = atm_train_from(g, d, std::slice::from_ref(&capped), std::slice::from_ref(&capped), &config).unwrap();
    let after = emd_exact(&up, &atm_translate(&out.generator, &capped, 2).unwrap()).unwrap().total_cost;
    assert!(after <= 0.1 * before, "EMD {before} -> {after}");

    let series = component_series(&out.history, LossComponent::Emd);
    assert_eq!(series.len(), 200);
    assert!((series[0] - before).abs() < 1e-6 * before);
    let means = window_means(&series, 20);
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "window means {means:?}");
}

#[test]
fn discriminator_is_at_chance_on_identical_domains() {
    let beam = beam(32, 128);
    let scans = toy_scans(&beam);
    for seed in 0..5u64 {
        let sample = |s: u64| -> Vec<LabeledCloud> { scans.iter().map(|c| cap_points(c, 256, s).unwrap()).collect() };
        let source = sample(seed * 1000 + 1);
        let target: Vec<PointCloud> = sample(seed * 1000 + 2).into_iter().map(|c| c.cloud).collect();
        let config = GanTrainConfig {
            steps: 40,
            batch_size: 2,
            train_points: 128,
            seed,
            ..Default::default()
        };
        let out = atm_train(&source, &target, &beam, &config).unwrap();
        let factor = config.upsample_factor;
        let (mut correct, mut total) = (0, 0);
        for k in 0..40u64 {
            let scan = &scans[k as usize % scans.len()];
            let held = seed * 1000 + 500 + 2 * k;
            let real = atm_prepare(&scan.cloud, &config, held).unwrap();
            let base = cap_points(scan, config.train_points / factor, held + 1).unwrap().cloud;
            let fake = atm_translate(&out.generator, &base, factor).unwrap();
            correct += (atm_discriminate(&out.discriminator, &real).unwrap() > 0.5) as usize;
            correct += (atm_discriminate(&out.discriminator, &fake).unwrap() <= 0.5) as usize;
            total += 2;
        }
        let accuracy = correct as f64 / total as f64;
        assert!((0.35..=0.65).contains(&accuracy), "seed {seed}: accuracy {accuracy}");
    }
}

#[test]
fn stm_pure_consistency_regression_converges() {
    let beam = beam(16, 64);
    let images: Vec<RangeImage> = toy_scans(&beam)
        .iter()
        .take(2)
        .map(|c| project(&c.cloud, &beam).unwrap())
        .collect();
    let config = GanTrainConfig {
        lambda_adv_s: 0.0,
        steps: 500,
        batch_size: 2,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let out = stm_train(&images, &images, &config).unwrap();
    let series = component_series(&out.history, LossComponent::Consistency);
    assert_eq!(series.len(), 500);
    let last = series[series.len() - 1];
    assert!(last <= 0.1 * series[0], "consistency {} -> {last}", series[0]);
    let means = window_means(&series, 50);
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "window means {means:?}");
}
