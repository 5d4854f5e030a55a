//! Finite-difference verification of every layer's analytic gradient.
//!
//! Each instance is a small randomized network whose loss is `Σ y ⊙ R` for a
//! fixed random `R`, so every output entry contributes. Gradients with
//! respect to the input and all parameters are compared against central
//! differences as one vector, using the norm-wise relative error
//! `‖a − n‖ / max(‖a‖, ‖n‖)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::layers::{forward_backward, LayerSpec, Layout, NetParams, NetRole};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Names of every checked layer or loss type, in report order.
pub const CHECKED: [&str; 15] = [
    "point_affine",
    "feature_transform",
    "global_pool_concat",
    "mean_pool",
    "conv2d",
    "conv_transpose2d",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "square",
    "skip_concat",
    "bce_with_logits",
    "masked_rms",
    "matched_distance",
    "generator_stack",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub kind: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

enum Head {
    Weighted(Vec<f64>),
    Bce(f64),
    MaskedRms(Vec<f64>, Vec<bool>, f64),
    Matched(Vec<[f64; 3]>, Vec<(usize, usize, f64)>),
}

impl Head {
    fn apply(&self, g: &mut Graph, y: NodeId) -> Result<NodeId> {
        match self {
            Head::Weighted(r) => {
                let w = g.leaf(g.shape(y).to_vec(), r.clone())?;
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            }
            Head::Bce(t) => Ok(g.bce_with_logits(y, *t)),
            Head::MaskedRms(target, mask, scale) => g.masked_rms(y, target.clone(), mask.clone(), *scale),
            Head::Matched(target, pairs) => g.matched_distance(y, target.clone(), pairs.clone()),
        }
    }
}

struct Instance {
    net: NetParams,
    input: Tensor,
    head: Head,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn build(kind: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let seed = rng.random();
    let n = rng.random_range(1..6usize);
    let c = rng.random_range(1..5usize);
    let (ch, h, w) = (rng.random_range(1..4usize), rng.random_range(2..7usize), rng.random_range(2..7usize));
    let points = |layers: Vec<LayerSpec>, c: usize, rng: &mut ChaCha8Rng| -> Result<(NetParams, Tensor)> {
        let net = NetParams::new(NetRole::GA, Layout::Points(c), layers, seed)?;
        Ok((net, Tensor::new(vec![n, c], normal_vec(rng, n * c))?))
    };
    let image = |layers: Vec<LayerSpec>, rng: &mut ChaCha8Rng| -> Result<(NetParams, Tensor)> {
        let net = NetParams::new(NetRole::GS, Layout::Image(ch), layers, seed)?;
        Ok((net, Tensor::new(vec![ch, h, w], normal_vec(rng, ch * h * w))?))
    };
    let (net, input) = match kind {
        "point_affine" => points(vec![LayerSpec::PointAffine { input: c, output: rng.random_range(1..5) }], c, rng)?,
        "feature_transform" => {
            let (mut net, x) = points(vec![LayerSpec::FeatureTransform { dim: c }], c, rng)?;
            for v in net.params.get_mut("l0.weight").expect("transform").values_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            (net, x)
        }
        "global_pool_concat" => points(vec![LayerSpec::GlobalPoolConcat], c, rng)?,
        "mean_pool" => points(vec![LayerSpec::MeanPool], c, rng)?,
        "conv2d" => {
            let kernel = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..3);
            let layers = vec![LayerSpec::Conv2d {
                input: ch,
                output: rng.random_range(1..4),
                kernel,
                stride,
            }];
            image(layers, rng)?
        }
        "conv_transpose2d" => {
            let stride = rng.random_range(1..3);
            let kernel = rng.random_range(stride.max(2)..5);
            let layers = vec![LayerSpec::ConvTranspose2d {
                input: ch,
                output: rng.random_range(1..4),
                kernel,
                stride,
            }];
            image(layers, rng)?
        }
        "leaky_relu" => {
            let net = NetParams::new(NetRole::GA, Layout::Points(c), vec![LayerSpec::LeakyRelu { slope: 0.2 }], seed)?;
            (net, Tensor::new(vec![n, c], away_from_zero(rng, n * c))?)
        }
        "sigmoid" => points(vec![LayerSpec::Sigmoid], c, rng)?,
        "tanh" => points(vec![LayerSpec::Tanh], c, rng)?,
        "square" => points(vec![LayerSpec::Square], c, rng)?,
        "skip_concat" => image(
            vec![
                LayerSpec::SkipPush,
                LayerSpec::Conv2d {
                    input: ch,
                    output: 2,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::SkipConcat,
            ],
            rng,
        )?,
        "bce_with_logits" => {
            let net = NetParams::new(NetRole::DA, Layout::Points(1), Vec::new(), seed)?;
            let x = Tensor::new(vec![n, 1], normal_vec(rng, n).iter().map(|v| 3.0 * v).collect())?;
            let t = if rng.random::<bool>() { 1.0 } else { 0.0 };
            return Ok(Instance {
                net,
                input: x,
                head: Head::Bce(t),
            });
        }
        "masked_rms" => {
            let net = NetParams::new(NetRole::GS, Layout::Image(1), Vec::new(), seed)?;
            let len = h * w;
            let x = Tensor::new(vec![1, h, w], normal_vec(rng, len))?;
            let target = normal_vec(rng, len).iter().map(|v| v + 3.0).collect();
            let mut mask: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < 0.6).collect();
            mask[0] = true;
            let scale = rng.random_range(0.5..2.0);
            return Ok(Instance {
                net,
                input: x,
                head: Head::MaskedRms(target, mask, scale),
            });
        }
        "matched_distance" => {
            let net = NetParams::new(NetRole::GA, Layout::Points(3), Vec::new(), seed)?;
            let x = Tensor::new(vec![n, 3], normal_vec(rng, n * 3))?;
            let target: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.random_range(2.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let pairs = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| (i, j, rng.random_range(0.0..1.0)))
                .collect();
            return Ok(Instance {
                net,
                input: x,
                head: Head::Matched(target, pairs),
            });
        }
        "generator_stack" => {
            let layers = vec![
                LayerSpec::Conv2d {
                    input: 2,
                    output: 3,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Tanh,
                LayerSpec::SkipPush,
                LayerSpec::Conv2d {
                    input: 3,
                    output: 4,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Sigmoid,
                LayerSpec::ConvTranspose2d {
                    input: 4,
                    output: 3,
                    kernel: 4,
                    stride: 2,
                },
                LayerSpec::SkipConcat,
                LayerSpec::Conv2d {
                    input: 6,
                    output: 2,
                    kernel: 3,
                    stride: 1,
                },
            ];
            let net = NetParams::new(NetRole::GS, Layout::Image(2), layers, seed)?;
            let (hh, ww) = (2 * rng.random_range(1..4), 2 * rng.random_range(1..4));
            (net, Tensor::new(vec![2, hh, ww], normal_vec(rng, 2 * hh * ww))?)
        }
        other => unreachable!("unknown gradcheck kind {other}"),
    };
    let out_len = output_len(&net, &input)?;
    let r = normal_vec(rng, out_len);
    Ok(Instance {
        net,
        input,
        head: Head::Weighted(r),
    })
}

fn output_len(net: &NetParams, input: &Tensor) -> Result<usize> {
    let mut g = Graph::new();
    let b = net.bind(&mut g)?;
    let x = g.leaf(input.shape().to_vec(), input.values().to_vec())?;
    let y = net.apply(&mut g, &b, x)?;
    Ok(g.value(y).len())
}

fn loss(inst: &Instance, net: &NetParams, input: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let b = net.bind(&mut g)?;
    let x = g.leaf(input.shape().to_vec(), input.values().to_vec())?;
    let y = net.apply(&mut g, &b, x)?;
    let l = inst.head.apply(&mut g, y)?;
    Ok(g.scalar(l))
}

/// Norm-wise relative error between analytic and numeric gradients.
fn check_instance(inst: &Instance) -> Result<f64> {
    let (_, grads) = forward_backward(&inst.net, &inst.input, |g, y| inst.head.apply(g, y))?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * FD_STEP);

    analytic.extend_from_slice(grads["input"].values());
    for k in 0..inst.input.len() {
        let mut x = inst.input.clone();
        x.values_mut()[k] += FD_STEP;
        let plus = loss(inst, &inst.net, &x)?;
        x.values_mut()[k] -= 2.0 * FD_STEP;
        let minus = loss(inst, &inst.net, &x)?;
        numeric.push(central(plus, minus));
    }
    for (name, t) in &inst.net.params {
        analytic.extend_from_slice(grads[name].values());
        for k in 0..t.len() {
            let mut net = inst.net.clone();
            net.params.get_mut(name).expect("param").values_mut()[k] += FD_STEP;
            let plus = loss(inst, &net, &inst.input)?;
            net.params.get_mut(name).expect("param").values_mut()[k] -= 2.0 * FD_STEP;
            let minus = loss(inst, &net, &inst.input)?;
            numeric.push(central(plus, minus));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let denom = norm(&analytic).max(norm(&numeric)).max(1e-12);
    Ok(norm(&diff) / denom)
}

/// Checks `instances` randomized cases of every entry in [`CHECKED`].
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut reports = Vec::with_capacity(CHECKED.len());
    for (idx, kind) in CHECKED.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let inst = build(kind, &mut rng)?;
            worst = worst.max(check_instance(&inst)?);
        }
        reports.push(GradcheckReport {
            kind,
            instances,
            max_relative_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(reports)
}
