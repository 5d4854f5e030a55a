//! Constructors for the four translation networks.

use super::layers::{LayerSpec, Layout, NetParams, NetRole};
use crate::error::{PctError, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Largest per-point displacement G_A can emit, meters.
pub const DEFAULT_MAX_OFFSET: f64 = 0.25;

/// Largest depth correction G_S can emit, meters.
pub const DEFAULT_DEPTH_OFFSET: f64 = 1.0;

/// Initial occupancy logit of G_S, so a fresh generator keeps most pixels.
pub const INITIAL_KEEP_LOGIT: f64 = 2.0;

const LRELU: LayerSpec = LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };

/// Per-point encoder with global context and a zero-initialized residual head.
/// `coord_scale` normalizes coordinates before the first layer.
pub fn generator_a(seed: u64, coord_scale: f64, max_offset: f64) -> Result<NetParams> {
    if !(coord_scale > 0.0) || !(max_offset > 0.0) {
        return Err(PctError::parameter("generator_a", "scales must be positive"));
    }
    let layers = vec![
        LayerSpec::PointAffine { input: 3, output: 64 },
        LRELU,
        LayerSpec::FeatureTransform { dim: 64 },
        LayerSpec::PointAffine { input: 64, output: 128 },
        LRELU,
        LayerSpec::GlobalPoolConcat,
        LayerSpec::PointAffine { input: 256, output: 64 },
        LRELU,
        LayerSpec::PointAffine { input: 64, output: 3 },
        LayerSpec::Tanh,
    ];
    let mut net = NetParams::new(NetRole::GA, Layout::Points(3), layers, seed)?;
    zero_head(&mut net);
    net.meta.insert("coord_scale".into(), coord_scale);
    net.meta.insert("max_offset".into(), max_offset);
    Ok(net)
}

/// Zeroes the last parameterized layer, making the residual output vanish.
pub fn zero_head(net: &mut NetParams) {
    if let Some(idx) = net.last_param_layer() {
        for suffix in ["weight", "bias"] {
            if let Some(t) = net.params.get_mut(&format!("l{idx}.{suffix}")) {
                t.values_mut().fill(0.0);
            }
        }
    }
}

/// Per-point encoder mirrored from G_A, mean-pooled into one logit.
pub fn discriminator_a(seed: u64, coord_scale: f64) -> Result<NetParams> {
    let layers = vec![
        LayerSpec::PointAffine { input: 3, output: 64 },
        LRELU,
        LayerSpec::PointAffine { input: 64, output: 128 },
        LRELU,
        LayerSpec::MeanPool,
        LayerSpec::PointAffine { input: 128, output: 1 },
    ];
    let mut net = NetParams::new(NetRole::DA, Layout::Points(3), layers, seed)?;
    net.meta.insert("coord_scale".into(), coord_scale);
    Ok(net)
}

/// Two-level encoder-decoder over `[depth, occupancy]` images with skip
/// connections. Channel 0 of the output drives a bounded depth residual,
/// channel 1 is the occupancy logit. Image sides must be multiples of 4.
pub fn generator_s(seed: u64, rows: usize, cols: usize, depth_scale: f64, width: usize) -> Result<NetParams> {
    if !rows.is_multiple_of(4) || !cols.is_multiple_of(4) || rows == 0 || cols == 0 {
        return Err(PctError::parameter(
            "generator_s",
            format!("image {rows}x{cols} must have sides divisible by 4"),
        ));
    }
    if !(depth_scale > 0.0) || width == 0 {
        return Err(PctError::parameter("generator_s", "depth scale and width must be positive"));
    }
    let (c1, c2) = (width, 2 * width);
    let layers = vec![
        LayerSpec::Conv2d {
            input: 2,
            output: c1,
            kernel: 3,
            stride: 1,
        },
        LRELU,
        LayerSpec::SkipPush,
        LayerSpec::Conv2d {
            input: c1,
            output: c2,
            kernel: 3,
            stride: 2,
        },
        LRELU,
        LayerSpec::SkipPush,
        LayerSpec::Conv2d {
            input: c2,
            output: c2,
            kernel: 3,
            stride: 2,
        },
        LRELU,
        LayerSpec::ConvTranspose2d {
            input: c2,
            output: c2,
            kernel: 4,
            stride: 2,
        },
        LRELU,
        LayerSpec::SkipConcat,
        LayerSpec::ConvTranspose2d {
            input: 2 * c2,
            output: c1,
            kernel: 4,
            stride: 2,
        },
        LRELU,
        LayerSpec::SkipConcat,
        LayerSpec::Conv2d {
            input: 2 * c1,
            output: 2,
            kernel: 3,
            stride: 1,
        },
    ];
    let mut net = NetParams::new(NetRole::GS, Layout::Image(2), layers, seed)?;
    let head = net.last_param_layer().expect("conv head");
    // Small head so the initial output stays near the input.
    for v in net.params.get_mut(&format!("l{head}.weight")).expect("head weight").values_mut() {
        *v *= 0.1;
    }
    net.params.get_mut(&format!("l{head}.bias")).expect("head bias").values_mut()[1] = INITIAL_KEEP_LOGIT;
    net.meta.insert("rows".into(), rows as f64);
    net.meta.insert("cols".into(), cols as f64);
    net.meta.insert("depth_scale".into(), depth_scale);
    net.meta.insert("depth_offset".into(), DEFAULT_DEPTH_OFFSET);
    Ok(net)
}

/// Strided patch discriminator emitting one logit per coarse cell.
pub fn discriminator_s(seed: u64, width: usize) -> Result<NetParams> {
    let layers = vec![
        LayerSpec::Conv2d {
            input: 2,
            output: width,
            kernel: 3,
            stride: 2,
        },
        LRELU,
        LayerSpec::Conv2d {
            input: width,
            output: 2 * width,
            kernel: 3,
            stride: 2,
        },
        LRELU,
        LayerSpec::Conv2d {
            input: 2 * width,
            output: 1,
            kernel: 3,
            stride: 1,
        },
    ];
    NetParams::new(NetRole::DS, Layout::Image(2), layers, seed)
}
