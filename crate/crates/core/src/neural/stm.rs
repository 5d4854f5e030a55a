//! Sparsity translation: G_S rewrites a range image's depth and decides
//! which pixels survive, D_S compares the result with real range images,
//! and a geometry-consistency term ties the depths to the input.
//!
//! Occupancy is sampled as a hard Bernoulli draw of the generator's logit
//! using logistic noise; the backward pass goes through the relaxed sample
//! `sigmoid((logit + noise) / tau)`. Only pixels occupied in the input can
//! stay occupied.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, average_gradients, AdamState};
use super::graph::{logistic, sigmoid_fn, Graph, NodeId};
use super::layers::{Bound, NetParams, NetRole};
use super::nets::{self, DEFAULT_DEPTH_OFFSET};
use super::tensor::Tensor;
use super::{GanTrainConfig, LossComponent, LossRecord, TrainOutcome};
use crate::error::{PctError, Result};
use crate::projection::RangeImage;

/// Channel width of the STM networks.
pub const STM_WIDTH: usize = 8;

const TRANSLATE_SALT: u64 = 0x005e_ed0f_57a7;

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| logistic(rng.random::<f64>())).collect()
}

fn input_values(img: &RangeImage, depth_scale: f64) -> Vec<f64> {
    let mut v: Vec<f64> = img.depth().iter().map(|&d| d as f64 / depth_scale).collect();
    v.extend(img.occupancy().iter().map(|&o| if o { 1.0 } else { 0.0 }));
    v
}

struct GsNodes {
    /// Translated depth in meters, `[1, h, w]`.
    depth: NodeId,
    /// Hard sampled occupancy restricted to the input's occupancy.
    occupancy: NodeId,
    /// Occupancy logit, `[1, h, w]`.
    logit: NodeId,
    /// `[depth / scale · occupancy, occupancy]` as seen by D_S.
    fake: NodeId,
}

fn generate(g: &mut Graph, net: &NetParams, bound: &Bound, img: &RangeImage, noise: Vec<f64>, tau: f64) -> Result<GsNodes> {
    let (h, w) = img.dims();
    let scale = net.meta_or("depth_scale", 1.0);
    let x = g.leaf(vec![2, h, w], input_values(img, scale))?;
    let out = net.apply(g, bound, x)?;
    let h0 = g.channel(out, 0)?;
    let logit = g.channel(out, 1)?;
    let t = g.tanh(h0);
    let offset = g.scale(t, net.meta_or("depth_offset", DEFAULT_DEPTH_OFFSET));
    let d_in = g.leaf(vec![1, h, w], img.depth().iter().map(|&d| d as f64).collect())?;
    let depth = g.add(d_in, offset)?;
    let sample = g.bernoulli_st(logit, noise, tau)?;
    let occ_in = g.leaf(vec![1, h, w], input_values(img, 1.0)[h * w..].to_vec())?;
    let occupancy = g.mul(sample, occ_in)?;
    let dn = g.scale(depth, 1.0 / scale);
    let masked = g.mul(dn, occupancy)?;
    let fake = g.concat_channels(masked, occupancy)?;
    Ok(GsNodes {
        depth,
        occupancy,
        logit,
        fake,
    })
}

/// RMS depth change over pixels occupied in both the input and the output.
fn consistency(g: &mut Graph, img: &RangeImage, nodes: &GsNodes) -> Result<NodeId> {
    let mask = img
        .occupancy()
        .iter()
        .zip(g.value(nodes.occupancy))
        .map(|(&a, &b)| a && b > 0.5)
        .collect();
    let target = img.depth().iter().map(|&d| d as f64).collect();
    g.masked_rms(nodes.depth, target, mask, 1.0)
}

fn real_input(g: &mut Graph, img: &RangeImage, scale: f64) -> Result<NodeId> {
    let (h, w) = img.dims();
    g.leaf(vec![2, h, w], input_values(img, scale))
}

fn check_dims(images: &[&RangeImage]) -> Result<(usize, usize)> {
    let dims = images[0].dims();
    if let Some(bad) = images.iter().find(|i| i.dims() != dims) {
        return Err(PctError::shape(
            "sparsity training",
            format!("image {:?} differs from {:?}", bad.dims(), dims),
        ));
    }
    Ok(dims)
}

/// Trains G_S and D_S from fresh initializations derived from the seed.
pub fn stm_train(source: &[RangeImage], target: &[RangeImage], config: &GanTrainConfig) -> Result<TrainOutcome> {
    if source.is_empty() || target.is_empty() {
        return Err(PctError::EmptyInput("sparsity training needs source and target images"));
    }
    let all: Vec<&RangeImage> = source.iter().chain(target).collect();
    let (rows, cols) = check_dims(&all)?;
    let (mut sum, mut count, mut max_depth) = (0.0, 0usize, 0.0f64);
    for img in &all {
        for (&d, &o) in img.depth().iter().zip(img.occupancy()) {
            if o {
                sum += d as f64;
                count += 1;
                max_depth = max_depth.max(d as f64);
            }
        }
    }
    let depth_scale = if count == 0 { 1.0 } else { sum / count as f64 };
    let mut g = nets::generator_s(config.seed, rows, cols, depth_scale, STM_WIDTH)?;
    g.meta.insert("max_depth".into(), if count == 0 { 1.0 } else { max_depth });
    let d = nets::discriminator_s(config.seed.wrapping_add(1), STM_WIDTH)?;
    stm_train_from(g, d, source, target, config)
}

/// Continues STM training from the given networks.
pub fn stm_train_from(
    mut generator: NetParams,
    mut discriminator: NetParams,
    source: &[RangeImage],
    target: &[RangeImage],
    config: &GanTrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    generator.expect_role(NetRole::GS)?;
    discriminator.expect_role(NetRole::DS)?;
    if source.is_empty() || target.is_empty() {
        return Err(PctError::EmptyInput("sparsity training needs source and target images"));
    }
    let all: Vec<&RangeImage> = source.iter().chain(target).collect();
    let dims = check_dims(&all)?;
    check_generator_dims(&generator, dims)?;
    generator.meta.insert("tau".into(), config.tau);
    let scale = generator.meta_or("depth_scale", 1.0);
    let tau = config.tau;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut g_state, mut d_state) = (AdamState::new(), AdamState::new());
    let mut history = Vec::with_capacity(config.steps * 4);
    let pixels = dims.0 * dims.1;
    let d_config = config.discriminator_config();

    for step in 0..config.steps {
        let picks: Vec<(usize, usize, [u64; 3])> = (0..config.batch_size)
            .map(|_| {
                (
                    rng.random_range(0..source.len()),
                    rng.random_range(0..target.len()),
                    [rng.random(), rng.random(), rng.random()],
                )
            })
            .collect();

        let d_results: Vec<(f64, BTreeMap<String, Tensor>)> = picks
            .par_iter()
            .map(|&(s, t, seeds)| {
                let fake_values = {
                    let mut g = Graph::new();
                    let gb = generator.bind(&mut g)?;
                    let nodes = generate(&mut g, &generator, &gb, &source[s], noise(pixels, seeds[0]), tau)?;
                    g.value(nodes.fake).to_vec()
                };
                let mut g = Graph::new();
                let db = discriminator.bind(&mut g)?;
                let real = real_input(&mut g, &target[t], scale)?;
                let fake = g.leaf(vec![2, dims.0, dims.1], fake_values)?;
                let lr = discriminator.apply(&mut g, &db, real)?;
                let lf = discriminator.apply(&mut g, &db, fake)?;
                let a = g.bce_with_logits(lr, 1.0);
                let b = g.bce_with_logits(lf, 0.0);
                let loss = g.add(a, b)?;
                g.backward(loss)?;
                Ok((g.scalar(loss), discriminator.gradients(&g, &db)?))
            })
            .collect::<Result<_>>()?;
        let n = picks.len() as f64;
        let d_loss = d_results.iter().map(|r| r.0).sum::<f64>() / n;
        let grads = average_gradients(d_results.into_iter().map(|r| r.1).collect());
        adam_step(&mut discriminator, &grads, &mut d_state, &d_config.at_step(step))?;

        let g_results: Vec<([f64; 3], BTreeMap<String, Tensor>)> = picks
            .par_iter()
            .map(|&(s, t, seeds)| {
                let mut g = Graph::new();
                let gb = generator.bind(&mut g)?;
                let db = discriminator.bind(&mut g)?;
                let fs = generate(&mut g, &generator, &gb, &source[s], noise(pixels, seeds[1]), tau)?;
                let logit = discriminator.apply(&mut g, &db, fs.fake)?;
                let adv = g.bce_with_logits(logit, 1.0);
                let geo_s = consistency(&mut g, &source[s], &fs)?;
                let fr = generate(&mut g, &generator, &gb, &target[t], noise(pixels, seeds[2]), tau)?;
                let geo_r = consistency(&mut g, &target[t], &fr)?;
                let geo = g.add(geo_s, geo_r)?;
                let total = g.weighted_sum(&[(adv, config.lambda_adv_s), (geo, config.lambda_geo_s)])?;
                g.backward(total)?;
                let values = [g.scalar(adv), g.scalar(geo), g.scalar(total)];
                Ok((values, generator.gradients(&g, &gb)?))
            })
            .collect::<Result<_>>()?;
        let mut means = [0.0; 3];
        for (v, _) in &g_results {
            for k in 0..3 {
                means[k] += v[k] / n;
            }
        }
        let grads = average_gradients(g_results.into_iter().map(|r| r.1).collect());
        adam_step(&mut generator, &grads, &mut g_state, &config.at_step(step))?;

        for (component, value) in [
            (LossComponent::Discriminator, d_loss),
            (LossComponent::GeneratorAdversarial, means[0]),
            (LossComponent::Consistency, means[1]),
            (LossComponent::GeneratorTotal, means[2]),
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

fn check_generator_dims(net: &NetParams, dims: (usize, usize)) -> Result<()> {
    let expected = (net.meta_or("rows", dims.0 as f64) as usize, net.meta_or("cols", dims.1 as f64) as usize);
    if expected != dims {
        return Err(PctError::shape(
            "G_S",
            format!("trained for {}x{}, got {}x{}", expected.0, expected.1, dims.0, dims.1),
        ));
    }
    Ok(())
}

struct Translation {
    depth: Vec<f64>,
    probability: Vec<f64>,
}

fn run_generator(g_params: &NetParams, image: &RangeImage) -> Result<Translation> {
    g_params.expect_role(NetRole::GS)?;
    check_generator_dims(g_params, image.dims())?;
    let pixels = image.rows() * image.cols();
    let tau = g_params.meta_or("tau", 1.0);
    let u = noise(pixels, g_params.seed ^ TRANSLATE_SALT);
    let mut g = Graph::new();
    let bound = g_params.bind(&mut g)?;
    let nodes = generate(&mut g, g_params, &bound, image, u.clone(), tau)?;
    let logits = g.value(nodes.logit);
    let probability = (0..pixels)
        .map(|k| {
            if image.occupancy()[k] {
                sigmoid_fn((logits[k] + u[k]) / tau)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Translation {
        depth: g.value(nodes.depth).to_vec(),
        probability,
    })
}

/// Per-pixel occupancy probability of the translated image, in `[0, 1]`.
pub fn stm_occupancy_probability(g_params: &NetParams, image: &RangeImage) -> Result<Vec<f64>> {
    Ok(run_generator(g_params, image)?.probability)
}

/// `G_S(image)`: pixels whose occupancy probability exceeds 0.5 keep the
/// translated depth and the input's source index; all others are empty.
pub fn stm_translate(g_params: &NetParams, image: &RangeImage) -> Result<RangeImage> {
    let t = run_generator(g_params, image)?;
    let max_depth = g_params.meta_or("max_depth", f64::MAX);
    let mut out = RangeImage::empty(image.rows(), image.cols());
    for row in 0..image.rows() {
        for col in 0..image.cols() {
            let k = row * image.cols() + col;
            if t.probability[k] > 0.5 {
                let d = t.depth[k].clamp(1e-3, max_depth) as f32;
                out.set(row, col, d, image.index_map()[k]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_image(seed: u64, rows: usize, cols: usize) -> RangeImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = (0..rows * cols)
            .map(|k| {
                let row = k / cols;
                if rng.random::<f64>() < 0.1 {
                    0.0
                } else {
                    (3.0 + row as f64 * 0.8 + rng.random::<f64>()) as f32
                }
            })
            .collect();
        RangeImage::from_depth(rows, cols, depth).unwrap()
    }

    fn small_config(steps: usize) -> GanTrainConfig {
        GanTrainConfig {
            steps,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn translate_contracts() {
        let src = vec![toy_image(1, 8, 16), toy_image(2, 8, 16)];
        let out = stm_train(&src, &src, &small_config(3)).unwrap();
        let img = toy_image(3, 8, 16);
        let a = stm_translate(&out.generator, &img).unwrap();
        assert_eq!(a.dims(), img.dims());
        assert_eq!(a, stm_translate(&out.generator, &img).unwrap());
        let p = stm_occupancy_probability(&out.generator, &img).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        for k in 0..p.len() {
            assert_eq!(a.occupancy()[k], p[k] > 0.5);
            assert!(!a.occupancy()[k] || img.occupancy()[k]);
            assert_eq!(a.depth()[k] == 0.0, !a.occupancy()[k]);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let src = vec![toy_image(1, 8, 16)];
        let out = stm_train(&src, &src, &small_config(1)).unwrap();
        let err = stm_translate(&out.generator, &toy_image(1, 8, 8)).unwrap_err();
        assert!(matches!(err, PctError::Shape { .. }));
        let err = stm_train(&src, &[toy_image(1, 4, 16)], &small_config(1)).unwrap_err();
        assert!(matches!(err, PctError::Shape { .. }));
    }

    #[test]
    fn training_is_deterministic() {
        let src = vec![toy_image(1, 8, 16), toy_image(2, 8, 16)];
        let tgt = vec![toy_image(4, 8, 16)];
        let a = stm_train(&src, &tgt, &small_config(4)).unwrap();
        let b = stm_train(&src, &tgt, &small_config(4)).unwrap();
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.discriminator, b.discriminator);
        assert_eq!(a.history, b.history);
    }
}
