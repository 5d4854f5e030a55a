use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{PctError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetRole {
    GA,
    DA,
    GS,
    DS,
}

impl fmt::Display for NetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetRole::GA => "G_A",
            NetRole::DA => "D_A",
            NetRole::GS => "G_S",
            NetRole::DS => "D_S",
        })
    }
}

impl std::str::FromStr for NetRole {
    type Err = PctError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "G_A" => Ok(NetRole::GA),
            "D_A" => Ok(NetRole::DA),
            "G_S" => Ok(NetRole::GS),
            "D_S" => Ok(NetRole::DS),
            _ => Err(PctError::Format(format!("unknown network role `{s}`"))),
        }
    }
}

/// One stage of a network. Point layers act on `[n, c]` features, image
/// layers on `[c, h, w]` grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    /// Shared per-point affine map `x W + b`.
    PointAffine { input: usize, output: usize },
    /// Shared square transform `x T`, identity-initialized, no bias.
    FeatureTransform { dim: usize },
    /// Appends the mean over points to every point's features.
    GlobalPoolConcat,
    /// Mean over points, `[n, c]` → `[1, c]`.
    MeanPool,
    Conv2d { input: usize, output: usize, kernel: usize, stride: usize },
    ConvTranspose2d { input: usize, output: usize, kernel: usize, stride: usize },
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
    Square,
    /// Saves the current activation for a later `SkipConcat`.
    SkipPush,
    /// Concatenates the most recently saved activation along channels.
    SkipConcat,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::PointAffine { .. } => "point_affine",
            LayerSpec::FeatureTransform { .. } => "feature_transform",
            LayerSpec::GlobalPoolConcat => "global_pool_concat",
            LayerSpec::MeanPool => "mean_pool",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "conv_transpose2d",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Square => "square",
            LayerSpec::SkipPush => "skip_push",
            LayerSpec::SkipConcat => "skip_concat",
        }
    }

    /// Single-line textual form used in checkpoints.
    pub fn encode(&self) -> String {
        match self {
            LayerSpec::PointAffine { input, output } => format!("point_affine {input} {output}"),
            LayerSpec::FeatureTransform { dim } => format!("feature_transform {dim}"),
            LayerSpec::Conv2d {
                input,
                output,
                kernel,
                stride,
            } => format!("conv2d {input} {output} {kernel} {stride}"),
            LayerSpec::ConvTranspose2d {
                input,
                output,
                kernel,
                stride,
            } => format!("conv_transpose2d {input} {output} {kernel} {stride}"),
            LayerSpec::LeakyRelu { slope } => format!("leaky_relu {slope:?}"),
            other => other.kind().to_string(),
        }
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut it = text.split_whitespace();
        let kind = it.next().unwrap_or("");
        let nums: Vec<&str> = it.collect();
        let bad = || PctError::Format(format!("bad layer `{text}`"));
        let u = |i: usize| -> Result<usize> { nums.get(i).and_then(|s| s.parse().ok()).ok_or_else(bad) };
        let spec = match kind {
            "point_affine" => LayerSpec::PointAffine { input: u(0)?, output: u(1)? },
            "feature_transform" => LayerSpec::FeatureTransform { dim: u(0)? },
            "global_pool_concat" => LayerSpec::GlobalPoolConcat,
            "mean_pool" => LayerSpec::MeanPool,
            "conv2d" => LayerSpec::Conv2d {
                input: u(0)?,
                output: u(1)?,
                kernel: u(2)?,
                stride: u(3)?,
            },
            "conv_transpose2d" => LayerSpec::ConvTranspose2d {
                input: u(0)?,
                output: u(1)?,
                kernel: u(2)?,
                stride: u(3)?,
            },
            "leaky_relu" => LayerSpec::LeakyRelu {
                slope: nums.first().and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            },
            "sigmoid" => LayerSpec::Sigmoid,
            "tanh" => LayerSpec::Tanh,
            "square" => LayerSpec::Square,
            "skip_push" => LayerSpec::SkipPush,
            "skip_concat" => LayerSpec::SkipConcat,
            _ => return Err(bad()),
        };
        Ok(spec)
    }

    /// Parameter shapes as `(suffix, shape)`.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::PointAffine { input, output } => vec![("weight", vec![input, output]), ("bias", vec![output])],
            LayerSpec::FeatureTransform { dim } => vec![("weight", vec![dim, dim])],
            LayerSpec::Conv2d {
                input,
                output,
                kernel,
                ..
            } => vec![("weight", vec![output, input, kernel, kernel]), ("bias", vec![output])],
            LayerSpec::ConvTranspose2d {
                input,
                output,
                kernel,
                ..
            } => vec![("weight", vec![input, output, kernel, kernel]), ("bias", vec![output])],
            _ => Vec::new(),
        }
    }
}

/// Feature layout flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Points(usize),
    Image(usize),
}

fn layer_error(idx: usize, spec: &LayerSpec, detail: impl Into<String>) -> PctError {
    PctError::Shape {
        context: format!("layer {idx} ({})", spec.kind()),
        detail: detail.into(),
    }
}

/// Checks that layer dimensions chain, returning the output layout.
pub fn validate_layers(input: Layout, layers: &[LayerSpec]) -> Result<Layout> {
    let mut cur = input;
    let mut stack = Vec::new();
    for (idx, spec) in layers.iter().enumerate() {
        let mismatch = |want: &str| layer_error(idx, spec, format!("expects {want}, got {cur:?}"));
        cur = match (*spec, cur) {
            (LayerSpec::PointAffine { input, output }, Layout::Points(c)) if c == input => Layout::Points(output),
            (LayerSpec::FeatureTransform { dim }, Layout::Points(c)) if c == dim => Layout::Points(dim),
            (LayerSpec::GlobalPoolConcat, Layout::Points(c)) => Layout::Points(2 * c),
            (LayerSpec::MeanPool, Layout::Points(c)) => Layout::Points(c),
            (LayerSpec::Conv2d { kernel, stride, .. }, _) if kernel == 0 || stride == 0 => {
                return Err(layer_error(idx, spec, "kernel and stride must be positive"))
            }
            // Transposed padding is (kernel - stride) / 2.
            (LayerSpec::ConvTranspose2d { kernel, stride, .. }, _) if stride == 0 || kernel < stride => {
                return Err(layer_error(idx, spec, "stride must be positive and at most the kernel"))
            }
            (LayerSpec::Conv2d { input, output, .. }, Layout::Image(c))
            | (LayerSpec::ConvTranspose2d { input, output, .. }, Layout::Image(c))
                if c == input =>
            {
                Layout::Image(output)
            }
            (LayerSpec::LeakyRelu { .. } | LayerSpec::Sigmoid | LayerSpec::Tanh | LayerSpec::Square, l) => l,
            (LayerSpec::SkipPush, Layout::Image(c)) => {
                stack.push(c);
                cur
            }
            (LayerSpec::SkipConcat, Layout::Image(c)) => {
                let s = stack.pop().ok_or_else(|| layer_error(idx, spec, "no saved activation"))?;
                Layout::Image(c + s)
            }
            (LayerSpec::PointAffine { input, .. }, _) => return Err(mismatch(&format!("points with {input} channels"))),
            (LayerSpec::FeatureTransform { dim }, _) => return Err(mismatch(&format!("points with {dim} channels"))),
            (LayerSpec::Conv2d { input, .. } | LayerSpec::ConvTranspose2d { input, .. }, _) => {
                return Err(mismatch(&format!("an image with {input} channels")))
            }
            _ => return Err(mismatch("a compatible input")),
        };
    }
    Ok(cur)
}

/// A network: role, ordered layers, and named parameters (`l{idx}.weight`,
/// `l{idx}.bias`). `meta` holds scalar settings the role needs at
/// inference time, such as coordinate scales.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub role: NetRole,
    pub input: Layout,
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, Tensor>,
    pub seed: u64,
    pub meta: BTreeMap<String, f64>,
}

impl NetParams {
    /// Builds a network with He-normal weights and zero biases.
    pub fn new(role: NetRole, input: Layout, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_layers(input, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (idx, spec) in layers.iter().enumerate() {
            for (suffix, shape) in spec.param_shapes() {
                let n: usize = shape.iter().product();
                let values = match (spec, suffix) {
                    (_, "bias") => vec![0.0; n],
                    (LayerSpec::FeatureTransform { dim }, _) => {
                        (0..n).map(|k| if k / dim == k % dim { 1.0 } else { 0.0 }).collect()
                    }
                    _ => {
                        let fan_in = match spec {
                            LayerSpec::ConvTranspose2d { input, kernel, stride, .. } => {
                                input * (kernel / stride).max(1) * (kernel / stride).max(1)
                            }
                            _ => n / shape[if matches!(spec, LayerSpec::PointAffine { .. }) { 1 } else { 0 }],
                        };
                        let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("positive std");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                };
                params.insert(format!("l{idx}.{suffix}"), Tensor::new(shape, values)?);
            }
        }
        Ok(Self {
            role,
            input,
            layers,
            params,
            seed,
            meta: BTreeMap::new(),
        })
    }

    pub fn meta_or(&self, key: &str, default: f64) -> f64 {
        self.meta.get(key).copied().unwrap_or(default)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn expect_role(&self, role: NetRole) -> Result<()> {
        if self.role != role {
            return Err(PctError::Role {
                expected: role.to_string(),
                found: self.role.to_string(),
            });
        }
        Ok(())
    }

    /// Index of the last layer holding parameters.
    pub fn last_param_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| !l.param_shapes().is_empty())
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let mut nodes = BTreeMap::new();
        for (name, t) in &self.params {
            nodes.insert(name.clone(), g.leaf(t.shape().to_vec(), t.values().to_vec())?);
        }
        Ok(Bound { nodes })
    }

    /// Runs the layer stack on `x`, checking shapes and finiteness per layer.
    pub fn apply(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let expected = match self.input {
            Layout::Points(c) => g.shape(x).len() == 2 && g.shape(x)[1] == c,
            Layout::Image(c) => g.shape(x).len() == 3 && g.shape(x)[0] == c,
        };
        if !expected {
            let first = self.layers.first().map_or("input", LayerSpec::kind);
            return Err(PctError::Shape {
                context: format!("layer 0 ({first})"),
                detail: format!("{} network expects {:?}, got shape {:?}", self.role, self.input, g.shape(x)),
            });
        }
        let mut cur = x;
        let mut stack = Vec::new();
        for (idx, spec) in self.layers.iter().enumerate() {
            let p = |s: &str| bound.nodes[&format!("l{idx}.{s}")];
            let wrap = |e: PctError| match e {
                PctError::Shape { context, detail } => layer_error(idx, spec, format!("{context}: {detail}")),
                other => other,
            };
            cur = match *spec {
                LayerSpec::PointAffine { .. } => {
                    let y = g.matmul(cur, p("weight")).map_err(wrap)?;
                    g.add_bias(y, p("bias")).map_err(wrap)?
                }
                LayerSpec::FeatureTransform { .. } => g.matmul(cur, p("weight")).map_err(wrap)?,
                LayerSpec::GlobalPoolConcat => {
                    let m = g.mean_rows(cur).map_err(wrap)?;
                    g.concat_broadcast(cur, m).map_err(wrap)?
                }
                LayerSpec::MeanPool => g.mean_rows(cur).map_err(wrap)?,
                LayerSpec::Conv2d { kernel, stride, .. } => {
                    g.conv2d(cur, p("weight"), p("bias"), stride, kernel / 2).map_err(wrap)?
                }
                LayerSpec::ConvTranspose2d { kernel, stride, .. } => g
                    .conv_transpose2d(cur, p("weight"), p("bias"), stride, (kernel - stride) / 2)
                    .map_err(wrap)?,
                LayerSpec::LeakyRelu { slope } => g.leaky_relu(cur, slope),
                LayerSpec::Sigmoid => g.sigmoid(cur),
                LayerSpec::Tanh => g.tanh(cur),
                LayerSpec::Square => g.square(cur),
                LayerSpec::SkipPush => {
                    stack.push(cur);
                    cur
                }
                LayerSpec::SkipConcat => {
                    let saved = stack.pop().ok_or_else(|| layer_error(idx, spec, "no saved activation"))?;
                    g.concat_channels(cur, saved).map_err(wrap)?
                }
            };
            if g.value(cur).iter().any(|v| !v.is_finite()) {
                return Err(PctError::Numeric {
                    context: format!("layer {idx} ({})", spec.kind()),
                });
            }
        }
        Ok(cur)
    }

    /// Parameter gradients after `Graph::backward`; parameters the root does
    /// not depend on get zeros.
    pub fn gradients(&self, g: &Graph, bound: &Bound) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &bound.nodes {
            let shape = self.params[name].shape().to_vec();
            let values = g.grad(id).map_or_else(|| vec![0.0; self.params[name].len()], <[f64]>::to_vec);
            if values.iter().any(|v| !v.is_finite()) {
                return Err(PctError::Numeric {
                    context: format!("gradient of {name}"),
                });
            }
            out.insert(name.clone(), Tensor::new(shape, values)?);
        }
        Ok(out)
    }
}

/// Graph leaves for a network's parameters.
#[derive(Debug, Clone)]
pub struct Bound {
    pub nodes: BTreeMap<String, NodeId>,
}

/// Gradient of `loss_head(output)` with respect to each parameter and, under
/// the key `input`, the input itself.
pub fn forward_backward(
    net: &NetParams,
    input: &Tensor,
    loss_head: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g)?;
    let x = g.leaf(input.shape().to_vec(), input.values().to_vec())?;
    let y = net.apply(&mut g, &bound, x)?;
    let loss = loss_head(&mut g, y)?;
    if !g.scalar(loss).is_finite() {
        return Err(PctError::Numeric {
            context: "loss head".into(),
        });
    }
    g.backward(loss)?;
    let mut grads = net.gradients(&g, &bound)?;
    let gx = g.grad(x).map_or_else(|| vec![0.0; input.len()], <[f64]>::to_vec);
    grads.insert("input".into(), Tensor::new(input.shape().to_vec(), gx)?);
    let output = Tensor::new(g.shape(y).to_vec(), g.value(y).to_vec())?;
    Ok((output, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_pointwise_conv_is_valid() {
        let conv = |kernel, stride| LayerSpec::Conv2d {
            input: 2,
            output: 3,
            kernel,
            stride,
        };
        assert_eq!(validate_layers(Layout::Image(2), &[conv(1, 2)]).unwrap(), Layout::Image(3));
        let err = validate_layers(Layout::Image(2), &[conv(0, 1)]).unwrap_err();
        assert!(err.to_string().contains("kernel and stride"), "{err}");
        let convt = LayerSpec::ConvTranspose2d {
            input: 2,
            output: 3,
            kernel: 1,
            stride: 2,
        };
        assert!(validate_layers(Layout::Image(2), &[convt]).is_err());
    }

    #[test]
    fn square_on_scalar() {
        let net = NetParams::new(NetRole::GA, Layout::Points(1), vec![LayerSpec::Square], 0).unwrap();
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let (y, grads) = forward_backward(&net, &x, |g, y| Ok(g.sum(y))).unwrap();
        assert_eq!(y.values(), &[9.0]);
        assert_eq!(grads["input"].values(), &[6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let net = NetParams::new(NetRole::DA, Layout::Points(1), vec![LayerSpec::Sigmoid], 0).unwrap();
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let (y, grads) = forward_backward(&net, &x, |g, y| Ok(g.sum(y))).unwrap();
        assert_eq!(y.values(), &[0.5]);
        assert_eq!(grads["input"].values(), &[0.25]);
    }

    #[test]
    fn chain_mismatch_names_layer() {
        let layers = vec![
            LayerSpec::PointAffine { input: 3, output: 8 },
            LayerSpec::PointAffine { input: 4, output: 1 },
        ];
        let err = NetParams::new(NetRole::DA, Layout::Points(3), layers, 0).unwrap_err();
        assert!(err.to_string().contains("layer 1 (point_affine)"), "{err}");
    }

    #[test]
    fn input_mismatch_is_shape_error() {
        let net = NetParams::new(
            NetRole::DA,
            Layout::Points(3),
            vec![LayerSpec::PointAffine { input: 3, output: 2 }],
            0,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        let err = forward_backward(&net, &x, |g, y| Ok(g.sum(y))).unwrap_err();
        assert!(matches!(err, PctError::Shape { ref context, .. } if context.contains("layer 0")));
    }

    #[test]
    fn non_finite_names_layer() {
        let net = NetParams::new(NetRole::DA, Layout::Points(1), vec![LayerSpec::Square, LayerSpec::Square], 0).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1e200]).unwrap();
        let err = forward_backward(&net, &x, |g, y| Ok(g.sum(y))).unwrap_err();
        assert!(matches!(err, PctError::Numeric { ref context } if context == "layer 0 (square)"), "{err}");
    }

    #[test]
    fn layer_text_round_trip() {
        for spec in [
            LayerSpec::PointAffine { input: 3, output: 64 },
            LayerSpec::ConvTranspose2d {
                input: 16,
                output: 8,
                kernel: 4,
                stride: 2,
            },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::SkipConcat,
        ] {
            assert_eq!(LayerSpec::decode(&spec.encode()).unwrap(), spec);
        }
    }

    #[test]
    fn repeated_calls_identical() {
        let layers = vec![
            LayerSpec::PointAffine { input: 3, output: 8 },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::GlobalPoolConcat,
            LayerSpec::PointAffine { input: 16, output: 1 },
        ];
        let net = NetParams::new(NetRole::DA, Layout::Points(3), layers, 4).unwrap();
        let x = Tensor::new(vec![5, 3], (0..15).map(|v| v as f64 * 0.1).collect()).unwrap();
        let a = forward_backward(&net, &x, |g, y| Ok(g.sum(y))).unwrap();
        let b = forward_backward(&net, &x, |g, y| Ok(g.sum(y))).unwrap();
        assert_eq!(a, b);
    }
}
