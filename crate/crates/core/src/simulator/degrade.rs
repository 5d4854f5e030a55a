use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PctError, Result};
use crate::projection::RangeImage;

/// Smallest depth a noisy return may take; keeps perturbed pixels occupied.
const MIN_DEPTH: f32 = 1e-3;

/// Controlled corruption defining a pseudo-real domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeSpec {
    /// Rows whose index is not a multiple of this are emptied.
    pub keep_row_stride: usize,
    pub pixel_dropout_p: f64,
    pub range_noise_sigma: f64,
    /// Upper clamp for perturbed depths.
    pub max_range: f64,
    pub seed: u64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            keep_row_stride: 1,
            pixel_dropout_p: 0.0,
            range_noise_sigma: 0.0,
            max_range: 120.0,
            seed: 0,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.keep_row_stride == 0 {
            return Err(PctError::parameter("keep_row_stride", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.pixel_dropout_p) {
            return Err(PctError::parameter("pixel_dropout_p", "must lie in [0, 1)"));
        }
        if !(self.range_noise_sigma >= 0.0) || !self.range_noise_sigma.is_finite() {
            return Err(PctError::parameter("range_noise_sigma", "must be non-negative"));
        }
        if !(self.max_range > 0.0) {
            return Err(PctError::parameter("max_range", "must be positive"));
        }
        Ok(())
    }
}

/// Row removal, then per-pixel dropout and range noise over surviving
/// pixels in row-major order. Source indices of survivors are kept.
pub fn degrade(image: &RangeImage, spec: &DegradeSpec) -> Result<RangeImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.range_noise_sigma).map_err(|e| PctError::parameter("range_noise_sigma", e.to_string()))?;
    let mut out = image.clone();
    for row in 0..image.rows() {
        for col in 0..image.cols() {
            if !image.is_occupied(row, col) {
                continue;
            }
            if row % spec.keep_row_stride != 0 {
                out.clear(row, col);
                continue;
            }
            if spec.pixel_dropout_p > 0.0 && rng.random::<f64>() < spec.pixel_dropout_p {
                out.clear(row, col);
                continue;
            }
            if spec.range_noise_sigma > 0.0 {
                let k = row * image.cols() + col;
                let d = image.depth_at(row, col) as f64 + noise.sample(&mut rng);
                let d = (d.min(spec.max_range) as f32).max(MIN_DEPTH);
                out.set(row, col, d, image.index_map()[k]);
            }
        }
    }
    Ok(out)
}
