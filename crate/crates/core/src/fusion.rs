//! Fusion of the two translation branches: appearance-translated points are
//! filtered by the occupancy of the sparsity-translated image, then labels
//! are carried over from the original cloud by nearest-neighbor lookup.

use rayon::prelude::*;

use crate::cloud::{LabeledCloud, PointCloud};
use crate::error::{PctError, Result};
use crate::kdtree::KdTree;
use crate::projection::{BeamModel, RangeImage};

/// Result of [`fuse`].
#[derive(Debug, Clone, PartialEq)]
pub struct FuseOutcome {
    pub cloud: PointCloud,
    /// Input index of every kept point, increasing.
    pub kept: Vec<usize>,
    /// Points that fall outside the beam's field of view or range.
    pub out_of_fov: usize,
    /// Set when the guide has no occupied pixel; the output is then empty.
    pub degenerate_guide: bool,
}

/// Keeps a point iff the guide pixel it projects to is occupied. Every point
/// sharing a pixel gets the same verdict; order is preserved and points with
/// no pixel are dropped.
pub fn fuse(appearance: &PointCloud, guide: &RangeImage, beam: &BeamModel) -> Result<FuseOutcome> {
    beam.validate()?;
    if guide.dims() != (beam.rows, beam.cols) {
        return Err(PctError::Shape {
            context: "fusion guide".into(),
            detail: format!(
                "image is {}x{} but the beam is {}x{}",
                guide.rows(),
                guide.cols(),
                beam.rows,
                beam.cols
            ),
        });
    }
    if guide.occupied_count() == 0 {
        return Ok(FuseOutcome {
            cloud: PointCloud::empty(),
            kept: Vec::new(),
            out_of_fov: 0,
            degenerate_guide: true,
        });
    }
    let mut kept = Vec::new();
    let mut out_of_fov = 0;
    for i in 0..appearance.len() {
        match beam.pixel_of(appearance.point(i)) {
            Some((row, col, _)) if guide.is_occupied(row, col) => kept.push(i),
            Some(_) => {}
            None => out_of_fov += 1,
        }
    }
    Ok(FuseOutcome {
        cloud: appearance.select(&kept),
        kept,
        out_of_fov,
        degenerate_guide: false,
    })
}

/// Labels every translated point with the label of its nearest original
/// point; ties go to the lower original index.
pub fn transfer_labels(original: &LabeledCloud, translated: &PointCloud) -> Result<LabeledCloud> {
    transfer_labels_k(original, translated, 1)
}

/// Majority vote over the `k` nearest original points. Vote ties go to the
/// label whose first voter is nearest.
pub fn transfer_labels_k(original: &LabeledCloud, translated: &PointCloud, k: usize) -> Result<LabeledCloud> {
    if original.is_empty() {
        return Err(PctError::EmptyReference);
    }
    if k == 0 {
        return Err(PctError::parameter("k", "must be at least 1"));
    }
    let tree = KdTree::new(original.cloud.to_f64());
    let source = original.labels();
    let labels: Vec<u32> = translated
        .to_f64()
        .par_iter()
        .map(|q| {
            let neighbors = tree.knn(q, k, None);
            let mut votes: Vec<(u32, usize)> = Vec::new();
            for n in &neighbors {
                let label = source[n.index];
                match votes.iter_mut().find(|(l, _)| *l == label) {
                    Some(v) => v.1 += 1,
                    None => votes.push((label, 1)),
                }
            }
            // `max_by_key` keeps the last maximum, so scan in reverse.
            votes.iter().rev().max_by_key(|(_, c)| *c).map(|(l, _)| *l).unwrap_or(source[0])
        })
        .collect();
    LabeledCloud::new(translated.clone(), labels)
}
