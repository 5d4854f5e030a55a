//! End-to-end translation of a labeled synthetic scan: up-sampling and
//! appearance translation, sparsity translation of the projected scan,
//! fusion, and label transfer.

use crate::cloud::{LabeledCloud, PointCloud};
use crate::error::Result;
use crate::fusion::{fuse, transfer_labels_k};
use crate::neural::{atm_translate, stm_translate, NetParams};
use crate::projection::{project, BeamModel, RangeImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslateOptions {
    pub upsample_factor: usize,
    /// Neighbors voting in label transfer.
    pub label_neighbors: usize,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        Self {
            upsample_factor: crate::sampling::DEFAULT_UPSAMPLE_FACTOR,
            label_neighbors: 1,
        }
    }
}

/// Intermediate and final products of [`translate_scan`].
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    /// Labeled output cloud.
    pub cloud: LabeledCloud,
    /// G_A output before fusion.
    pub appearance: PointCloud,
    /// G_S output used as the fusion guide.
    pub guide: RangeImage,
    pub out_of_fov: usize,
    pub degenerate_guide: bool,
}

/// Runs both generators on `source` and fuses their outputs. The guide is
/// G_S applied to the projection of the untranslated scan, matching the
/// images G_S was trained on.
pub fn translate_scan(
    source: &LabeledCloud,
    g_a: &NetParams,
    g_s: &NetParams,
    beam: &BeamModel,
    options: &TranslateOptions,
) -> Result<Translation> {
    let appearance = atm_translate(g_a, &source.cloud, options.upsample_factor)?;
    let guide = stm_translate(g_s, &project(&source.cloud, beam)?)?;
    let fused = fuse(&appearance, &guide, beam)?;
    let cloud = transfer_labels_k(source, &fused.cloud, options.label_neighbors)?;
    Ok(Translation {
        cloud,
        appearance,
        guide,
        out_of_fov: fused.out_of_fov,
        degenerate_guide: fused.degenerate_guide,
    })
}
