//! Appearance translation: G_A moves points of the up-sampled synthetic
//! cloud, D_A separates them from up-sampled real clouds, and an EMD term
//! keeps the output close to its input.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, average_gradients, AdamState};
use super::graph::{Graph, NodeId};
use super::layers::{NetParams, NetRole};
use super::nets::{self, DEFAULT_MAX_OFFSET};
use super::tensor::Tensor;
use super::{EmdMode, GanTrainConfig, LossComponent, LossRecord, TrainOutcome};
use crate::cloud::{LabeledCloud, PointCloud};
use crate::error::{PctError, Result};
use crate::metrics::emd::{distance_matrix, sinkhorn_plan};
use crate::metrics::solve_assignment;
use crate::projection::BeamModel;
use crate::sampling::{upsample, DEFAULT_UPSAMPLE_NEIGHBORS};

fn flatten(points: &[[f64; 3]]) -> Vec<f64> {
    points.iter().flatten().copied().collect()
}

/// G_A output in meters: `x + max_offset · tanh(head(x / coord_scale))`.
fn generate(g: &mut Graph, net: &NetParams, bound: &super::Bound, points: &[[f64; 3]]) -> Result<NodeId> {
    let scale = net.meta_or("coord_scale", 1.0);
    let max_offset = net.meta_or("max_offset", DEFAULT_MAX_OFFSET);
    let flat = flatten(points);
    let xn = g.leaf(vec![points.len(), 3], flat.iter().map(|v| v / scale).collect())?;
    let head = net.apply(g, bound, xn)?;
    let offset = g.scale(head, max_offset);
    let x = g.leaf(vec![points.len(), 3], flat)?;
    g.add(x, offset)
}

fn discriminate(g: &mut Graph, net: &NetParams, bound: &super::Bound, points: NodeId) -> Result<NodeId> {
    let xn = g.scale(points, 1.0 / net.meta_or("coord_scale", 1.0));
    net.apply(g, bound, xn)
}

fn generated_values(net: &NetParams, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g)?;
    let y = generate(&mut g, net, &bound, points)?;
    Ok(g.value(y).chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// `(row, column, weight)` pairs of the transport plan between `pred` and `target`.
fn transport_pairs(pred: &[[f64; 3]], target: &[[f64; 3]], config: &GanTrainConfig) -> Vec<(usize, usize, f64)> {
    let n = pred.len();
    let cost = distance_matrix(pred, target);
    match config.emd_mode {
        EmdMode::Exact => solve_assignment(&cost, n)
            .into_iter()
            .enumerate()
            .map(|(i, j)| (i, j, 1.0))
            .collect(),
        EmdMode::Entropic => {
            let (plan, ..) = sinkhorn_plan(&cost, n, config.sinkhorn_epsilon, config.sinkhorn_iterations);
            plan.iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(k, &p)| (k / n, k % n, p * n as f64))
                .collect()
        }
    }
}

/// Seeded random subset followed by up-sampling to `train_points`.
fn prepare(cloud: &PointCloud, config: &GanTrainConfig, seed: u64) -> Result<Vec<[f64; 3]>> {
    let base = (config.train_points / config.upsample_factor).max(2);
    let capped = if cloud.len() > base {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, cloud.len(), base).into_vec();
        idx.sort_unstable();
        cloud.select(&idx)
    } else {
        cloud.clone()
    };
    Ok(upsample(&capped, config.upsample_factor, config.upsample_neighbors)?.to_f64())
}

struct StepLosses {
    d: f64,
    adv: f64,
    emd: f64,
    total: f64,
}

/// Trains G_A and D_A from fresh initializations derived from the seed.
pub fn atm_train(
    source: &[LabeledCloud],
    target: &[PointCloud],
    beam: &BeamModel,
    config: &GanTrainConfig,
) -> Result<TrainOutcome> {
    beam.validate()?;
    let g = nets::generator_a(config.seed, beam.max_range, DEFAULT_MAX_OFFSET)?;
    let d = nets::discriminator_a(config.seed.wrapping_add(1), beam.max_range)?;
    let source: Vec<PointCloud> = source.iter().map(|c| c.cloud.clone()).collect();
    atm_train_from(g, d, &source, target, config)
}

/// Continues ATM training from the given networks.
pub fn atm_train_from(
    mut generator: NetParams,
    mut discriminator: NetParams,
    source: &[PointCloud],
    target: &[PointCloud],
    config: &GanTrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    generator.expect_role(NetRole::GA)?;
    discriminator.expect_role(NetRole::DA)?;
    if source.is_empty() || target.is_empty() {
        return Err(PctError::EmptyInput("appearance training needs source and target clouds"));
    }
    if let Some(c) = source.iter().chain(target).find(|c| c.len() < 2) {
        return Err(PctError::InsufficientPoints { needed: 2, found: c.len() });
    }
    generator.meta.insert("upsample_neighbors".into(), config.upsample_neighbors as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut g_state, mut d_state) = (AdamState::new(), AdamState::new());
    let mut history = Vec::with_capacity(config.steps * 4);
    let d_config = config.discriminator_config();

    for step in 0..config.steps {
        let picks: Vec<(usize, usize, u64, u64)> = (0..config.batch_size)
            .map(|_| {
                (
                    rng.random_range(0..source.len()),
                    rng.random_range(0..target.len()),
                    rng.random(),
                    rng.random(),
                )
            })
            .collect();
        let batch: Vec<(Vec<[f64; 3]>, Vec<[f64; 3]>)> = picks
            .par_iter()
            .map(|&(s, t, ss, ts)| Ok((prepare(&source[s], config, ss)?, prepare(&target[t], config, ts)?)))
            .collect::<Result<_>>()?;

        let d_results: Vec<(f64, BTreeMap<String, Tensor>)> = batch
            .par_iter()
            .map(|(xs, xr)| {
                let fake = generated_values(&generator, xs)?;
                let mut g = Graph::new();
                let bound = discriminator.bind(&mut g)?;
                let real = g.leaf(vec![xr.len(), 3], flatten(xr))?;
                let fake = g.leaf(vec![fake.len(), 3], flatten(&fake))?;
                let lr = discriminate(&mut g, &discriminator, &bound, real)?;
                let lf = discriminate(&mut g, &discriminator, &bound, fake)?;
                let a = g.bce_with_logits(lr, 1.0);
                let b = g.bce_with_logits(lf, 0.0);
                let loss = g.add(a, b)?;
                g.backward(loss)?;
                Ok((g.scalar(loss), discriminator.gradients(&g, &bound)?))
            })
            .collect::<Result<_>>()?;
        let d_loss = d_results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
        let grads = average_gradients(d_results.into_iter().map(|r| r.1).collect());
        adam_step(&mut discriminator, &grads, &mut d_state, &d_config.at_step(step))?;

        let g_results: Vec<(StepLosses, BTreeMap<String, Tensor>)> = batch
            .par_iter()
            .map(|(xs, _)| {
                let mut g = Graph::new();
                let gb = generator.bind(&mut g)?;
                let db = discriminator.bind(&mut g)?;
                let pred = generate(&mut g, &generator, &gb, xs)?;
                let pred_pts: Vec<[f64; 3]> = g.value(pred).chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                let pairs = transport_pairs(&pred_pts, xs, config);
                let emd = g.matched_distance(pred, xs.clone(), pairs)?;
                let logit = discriminate(&mut g, &discriminator, &db, pred)?;
                let adv = g.bce_with_logits(logit, 1.0);
                let total = g.weighted_sum(&[(adv, config.lambda_adv_a), (emd, config.lambda_emd_a)])?;
                g.backward(total)?;
                let losses = StepLosses {
                    d: 0.0,
                    adv: g.scalar(adv),
                    emd: g.scalar(emd),
                    total: g.scalar(total),
                };
                Ok((losses, generator.gradients(&g, &gb)?))
            })
            .collect::<Result<_>>()?;
        let n = batch.len() as f64;
        let mut losses = StepLosses {
            d: d_loss,
            adv: 0.0,
            emd: 0.0,
            total: 0.0,
        };
        for (l, _) in &g_results {
            losses.adv += l.adv / n;
            losses.emd += l.emd / n;
            losses.total += l.total / n;
        }
        let grads = average_gradients(g_results.into_iter().map(|r| r.1).collect());
        adam_step(&mut generator, &grads, &mut g_state, &config.at_step(step))?;

        for (component, value) in [
            (LossComponent::Discriminator, losses.d),
            (LossComponent::GeneratorAdversarial, losses.adv),
            (LossComponent::Emd, losses.emd),
            (LossComponent::GeneratorTotal, losses.total),
        ] {
            if !value.is_finite() {
                return Err(PctError::Numeric {
                    context: format!("{} at step {step}", component.name()),
                });
            }
            history.push(LossRecord { step, component, value });
        }
    }
    Ok(TrainOutcome {
        generator,
        discriminator,
        history,
    })
}

/// `G_A(U(cloud))`; intensities of the up-sampled cloud are carried along.
pub fn atm_translate(g_params: &NetParams, cloud: &PointCloud, factor: usize) -> Result<PointCloud> {
    g_params.expect_role(NetRole::GA)?;
    if cloud.is_empty() {
        return Err(PctError::EmptyInput("cannot translate an empty cloud"));
    }
    let neighbors = g_params.meta_or("upsample_neighbors", DEFAULT_UPSAMPLE_NEIGHBORS as f64) as usize;
    let up = upsample(cloud, factor, neighbors.max(1))?;
    let moved = generated_values(g_params, &up.to_f64())?;
    let (_, intensity) = up.into_parts();
    PointCloud::from_f64(&moved, intensity)
}

/// Probability that D_A assigns to `cloud` being real.
pub fn atm_discriminate(d_params: &NetParams, cloud: &PointCloud) -> Result<f64> {
    d_params.expect_role(NetRole::DA)?;
    if cloud.is_empty() {
        return Err(PctError::EmptyInput("cannot discriminate an empty cloud"));
    }
    let mut g = Graph::new();
    let bound = d_params.bind(&mut g)?;
    let x = g.leaf(vec![cloud.len(), 3], flatten(&cloud.to_f64()))?;
    let logit = discriminate(&mut g, d_params, &bound, x)?;
    Ok(super::graph::sigmoid_fn(g.scalar(logit)))
}

/// Up-sampled, capped training sample as used by the loop, for evaluation.
pub fn atm_prepare(cloud: &PointCloud, config: &GanTrainConfig, seed: u64) -> Result<PointCloud> {
    PointCloud::from_f64(&prepare(cloud, config, seed)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::emd_exact;

    fn toy_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                let r: f32 = rng.random_range(4.0..12.0);
                [r * a.cos(), r * a.sin(), rng.random_range(-1.6..0.5)]
            })
            .collect();
        PointCloud::from_points(pts)
    }

    #[test]
    fn zero_head_translation_is_upsampling() {
        let g = nets::generator_a(3, 50.0, 0.25).unwrap();
        let c = toy_cloud(1, 40);
        let out = atm_translate(&g, &c, 2).unwrap();
        assert_eq!(out, upsample(&c, 2, 4).unwrap());
        assert_eq!(out.len(), 80);
    }

    #[test]
    fn wrong_role_rejected() {
        let d = nets::discriminator_a(3, 50.0).unwrap();
        let err = atm_translate(&d, &toy_cloud(1, 10), 2).unwrap_err();
        assert!(matches!(err, PctError::Role { .. }));
    }

    #[test]
    fn outputs_finite_for_trained_generator() {
        let cfg = GanTrainConfig {
            steps: 3,
            batch_size: 2,
            train_points: 64,
            ..Default::default()
        };
        let src = vec![LabeledCloud::new(toy_cloud(2, 50), vec![1; 50]).unwrap()];
        let tgt = vec![toy_cloud(3, 60)];
        let out = atm_train(&src, &tgt, &BeamModel::default(), &cfg).unwrap();
        let y = atm_translate(&out.generator, &toy_cloud(4, 30), 2).unwrap();
        assert!(y.points().iter().flatten().all(|v| v.is_finite()));
        assert_eq!(out.history.len(), 12);
    }

    #[test]
    fn history_reconstructs_weighted_total() {
        let cfg = GanTrainConfig {
            steps: 4,
            batch_size: 2,
            train_points: 64,
            lambda_adv_a: 0.3,
            lambda_emd_a: 2.0,
            ..Default::default()
        };
        let src = vec![toy_cloud(5, 40)];
        let tgt = vec![toy_cloud(6, 40)];
        let mut g = nets::generator_a(1, 20.0, 0.25).unwrap();
        perturb(&mut g, 0.05);
        let d = nets::discriminator_a(2, 20.0).unwrap();
        let out = atm_train_from(g, d, &src, &tgt, &cfg).unwrap();
        let adv = super::super::component_series(&out.history, LossComponent::GeneratorAdversarial);
        let emd = super::super::component_series(&out.history, LossComponent::Emd);
        let total = super::super::component_series(&out.history, LossComponent::GeneratorTotal);
        for k in 0..total.len() {
            assert!((total[k] - (0.3 * adv[k] + 2.0 * emd[k])).abs() < 1e-9 * total[k].abs().max(1.0));
        }
    }

    /// Adds seeded noise to the zero head so the EMD term starts positive.
    fn perturb(g: &mut NetParams, std: f64) {
        let idx = g.last_param_layer().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for v in g.params.get_mut(&format!("l{idx}.weight")).unwrap().values_mut() {
            *v = rng.random_range(-std..std);
        }
    }

    #[test]
    fn reduced_objective_matches_direct_emd() {
        // With no adversarial weight the generator loss is exactly Eq. 2 on the batch.
        let cfg = GanTrainConfig {
            steps: 1,
            batch_size: 1,
            train_points: 40,
            lambda_adv_a: 0.0,
            ..Default::default()
        };
        let src = vec![toy_cloud(8, 20)];
        let mut g = nets::generator_a(1, 20.0, 0.25).unwrap();
        perturb(&mut g, 0.2);
        let d = nets::discriminator_a(2, 20.0).unwrap();
        let before = g.clone();
        let out = atm_train_from(g, d, &src, &src, &cfg).unwrap();
        let up = upsample(&src[0], 2, 4).unwrap();
        let moved = atm_translate(&before, &src[0], 2).unwrap();
        let direct = emd_exact(&up, &moved).unwrap().total_cost;
        let total = super::super::component_series(&out.history, LossComponent::GeneratorTotal)[0];
        assert!((total - direct).abs() < 1e-3 * direct, "{total} vs {direct}");
    }
}
