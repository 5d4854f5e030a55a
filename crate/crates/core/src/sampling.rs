//! Density manipulation: nearest-neighbor midpoint up-sampling, voxel
//! down-sampling, and seeded per-scan point caps.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::{LabeledCloud, PointCloud};
use crate::error::{PctError, Result};
use crate::kdtree::KdTree;

pub const DEFAULT_VOXEL_SIZE: f64 = 0.05;
pub const DEFAULT_MAX_POINTS: usize = 80_000;
pub const DEFAULT_UPSAMPLE_FACTOR: usize = 2;
pub const DEFAULT_UPSAMPLE_NEIGHBORS: usize = 4;

/// Densifies a cloud to `factor × N` points.
///
/// The originals come first, in order. Each inserted point is the midpoint
/// between `p_i` and its `j`-th nearest neighbor, where round `r` uses
/// `j = r mod neighbors + 1` for every `i`; rounds repeat until the target
/// count is reached. Neighbor ties resolve to the lower index.
pub fn upsample(cloud: &PointCloud, factor: usize, neighbors: usize) -> Result<PointCloud> {
    if factor == 0 {
        return Err(PctError::parameter("factor", "must be at least 1"));
    }
    if neighbors == 0 {
        return Err(PctError::parameter("neighbors", "must be at least 1"));
    }
    if factor == 1 {
        return Ok(cloud.clone());
    }
    let n = cloud.len();
    if n < 2 {
        return Err(PctError::InsufficientPoints { needed: 2, found: n });
    }
    let pts = cloud.to_f64();
    let k = neighbors.min(n - 1);
    let tree = KdTree::new(pts.clone());
    let knn: Vec<Vec<usize>> = pts
        .par_iter()
        .enumerate()
        .map(|(i, p)| tree.knn(p, k, Some(i)).into_iter().map(|nb| nb.index).collect())
        .collect();

    let target = factor * n;
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(target);
    out.extend_from_slice(&pts);
    let src_intensity = cloud.intensity();
    let mut intensity: Option<Vec<f32>> = src_intensity.map(|v| {
        let mut o = Vec::with_capacity(target);
        o.extend_from_slice(v);
        o
    });
    let mut round = 0;
    'rounds: loop {
        let j = round % k;
        for i in 0..n {
            if out.len() == target {
                break 'rounds;
            }
            let q = knn[i][j];
            let (a, b) = (pts[i], pts[q]);
            out.push([(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5, (a[2] + b[2]) * 0.5]);
            if let (Some(o), Some(src)) = (intensity.as_mut(), src_intensity) {
                o.push(0.5 * (src[i] + src[q]));
            }
        }
        round += 1;
    }
    PointCloud::from_f64(&out, intensity.take())
}

/// One point per occupied voxel, at the members' centroid. The label is taken
/// from the member nearest that centroid (lowest index on ties). Output order
/// follows each voxel's first member.
pub fn voxel_downsample(cloud: &LabeledCloud, voxel_size: f64) -> Result<LabeledCloud> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(PctError::parameter(
            "voxel_size",
            format!("must be positive and finite, got {voxel_size}"),
        ));
    }
    let pts = cloud.cloud.to_f64();
    let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let key = p.map(|c| (c / voxel_size).floor() as i64);
        let slot = *slots.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(i);
    }

    let intensity = cloud.cloud.intensity();
    let reduced: Vec<([f64; 3], u32, Option<f32>)> = groups
        .par_iter()
        .map(|members| {
            let mut c = [0.0; 3];
            for &m in members {
                for a in 0..3 {
                    c[a] += pts[m][a];
                }
            }
            let inv = 1.0 / members.len() as f64;
            let c = c.map(|v| v * inv);
            let nearest = *members
                .iter()
                .min_by(|&&a, &&b| {
                    crate::kdtree::dist_sq(&pts[a], &c)
                        .total_cmp(&crate::kdtree::dist_sq(&pts[b], &c))
                        .then(a.cmp(&b))
                })
                .unwrap();
            let inten = intensity.map(|v| {
                let s: f64 = members.iter().map(|&m| v[m] as f64).sum();
                (s * inv) as f32
            });
            (c, cloud.labels()[nearest], inten)
        })
        .collect();

    let points: Vec<[f64; 3]> = reduced.iter().map(|r| r.0).collect();
    let labels = reduced.iter().map(|r| r.1).collect();
    let inten = intensity.map(|_| reduced.iter().map(|r| r.2.unwrap()).collect());
    LabeledCloud::new(PointCloud::from_f64(&points, inten)?, labels)
}

/// Uniform random subset of `max_points` points, original order preserved.
pub fn cap_points(cloud: &LabeledCloud, max_points: usize, seed: u64) -> Result<LabeledCloud> {
    if max_points == 0 {
        return Err(PctError::parameter("max_points", "must be at least 1"));
    }
    if cloud.len() <= max_points {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, cloud.len(), max_points).into_vec();
    idx.sort_unstable();
    Ok(cloud.select(&idx))
}
