//! Distances, losses, and evaluation metrics.

mod assignment;
pub mod confusion;
pub mod emd;

pub use assignment::solve as solve_assignment;
pub use confusion::{miou, ConfusionMatrix, IouReport};
pub use emd::{emd_exact, emd_exact_f64, emd_sinkhorn, Matching, SinkhornResult, EXACT_EMD_LIMIT};

use crate::cloud::PointCloud;
use crate::error::{PctError, Result};
use crate::kdtree::KdTree;
use crate::projection::RangeImage;

fn mean_nearest_sq(from: &[[f64; 3]], to: &KdTree) -> f64 {
    // Fixed summation order keeps the result independent of scheduling.
    let d: Vec<f64> = from.iter().map(|p| to.nearest(p).unwrap().dist_sq).collect();
    d.iter().sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance with the mean-of-squared-distances convention.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(PctError::EmptyInput("chamfer needs two non-empty clouds"));
    }
    let (pa, pb) = (a.to_f64(), b.to_f64());
    let (ta, tb) = (KdTree::new(pa.clone()), KdTree::new(pb.clone()));
    Ok(mean_nearest_sq(&pa, &tb) + mean_nearest_sq(&pb, &ta))
}

/// Root-mean-square depth difference over pixels occupied in both images;
/// zero when the overlap is empty.
pub fn geometry_consistency(a: &RangeImage, b: &RangeImage) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(PctError::shape(
            "geometry consistency",
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..a.depth().len() {
        if a.occupancy()[k] && b.occupancy()[k] {
            let d = a.depth()[k] as f64 - b.depth()[k] as f64;
            sum += d * d;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { (sum / count as f64).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chamfer_examples() {
        let a = PointCloud::from_points(vec![[0.0; 3]]);
        let b = PointCloud::from_points(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &PointCloud::empty()).is_err());
    }

    #[test]
    fn geometry_consistency_examples() {
        let mut a = RangeImage::empty(1, 4);
        let mut b = RangeImage::empty(1, 4);
        a.set(0, 0, 5.0, None);
        a.set(0, 1, 7.0, None);
        a.set(0, 2, 3.0, None);
        b.set(0, 0, 6.0, None);
        b.set(0, 1, 9.0, None);
        b.set(0, 3, 4.0, None);
        let v = geometry_consistency(&a, &b).unwrap();
        assert!((v - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(geometry_consistency(&a, &a).unwrap(), 0.0);

        let mut c = RangeImage::empty(1, 4);
        c.set(0, 3, 1.0, None);
        assert_eq!(geometry_consistency(&a, &c).unwrap(), 0.0, "disjoint masks");
        assert!(geometry_consistency(&a, &RangeImage::empty(2, 2)).is_err());
    }

    #[test]
    fn geometry_consistency_ignores_pixels_outside_overlap() {
        let mut a = RangeImage::empty(1, 3);
        let mut b = RangeImage::empty(1, 3);
        a.set(0, 0, 5.0, None);
        b.set(0, 0, 6.0, None);
        let base = geometry_consistency(&a, &b).unwrap();
        a.set(0, 1, 40.0, None);
        b.set(0, 2, 11.0, None);
        assert_eq!(geometry_consistency(&a, &b).unwrap(), base);
    }

    fn cloud_strategy() -> impl Strategy<Value = Vec<[f32; 3]>> {
        prop::collection::vec(prop::array::uniform3(-3.0f32..3.0), 1..40)
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_non_negative(a in cloud_strategy(), b in cloud_strategy()) {
            let (a, b) = (PointCloud::from_points(a), PointCloud::from_points(b));
            let ab = chamfer(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, chamfer(&b, &a).unwrap());
        }

        #[test]
        fn chamfer_zero_for_mutually_covering_sets(a in cloud_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut b = a.clone();
            b.extend_from_slice(&a[..a.len() / 2]);
            b.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = (PointCloud::from_points(a), PointCloud::from_points(b));
            prop_assert_eq!(chamfer(&a, &b).unwrap(), 0.0);
        }
    }
}
