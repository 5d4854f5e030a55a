//! Earth Mover's Distance between equal-size clouds.
//!
//! The exact path solves the assignment problem on the Euclidean cost
//! matrix. The entropic path runs log-domain Sinkhorn iterations with
//! uniform marginals and reports the transport cost of the resulting plan,
//! scaled by `N` so both paths share the sum-over-points convention.

use std::cmp::Ordering;

use rayon::prelude::*;

use super::assignment;
use crate::cloud::PointCloud;
use crate::error::{PctError, Result};

pub const EXACT_EMD_LIMIT: usize = 512;

/// Optimal bijection from cloud A onto cloud B.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornResult {
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// L1 violation of the row marginals for the returned plan.
    pub marginal_error: f64,
}

pub(crate) fn distance_matrix(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<f64> {
    let m = b.len();
    let mut cost = vec![0.0; a.len() * m];
    cost.par_chunks_mut(m.max(1)).zip(a.par_iter()).for_each(|(row, p)| {
        for (c, q) in row.iter_mut().zip(b) {
            *c = crate::kdtree::dist_sq(p, q).sqrt();
        }
    });
    cost
}

fn check_sizes(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(PctError::SizeMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn emd_exact(a: &PointCloud, b: &PointCloud) -> Result<Matching> {
    emd_exact_f64(&a.to_f64(), &b.to_f64())
}

pub fn emd_exact_f64(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<Matching> {
    check_sizes(a.len(), b.len())?;
    let n = a.len();
    if n > EXACT_EMD_LIMIT {
        return Err(PctError::Capacity {
            size: n,
            limit: EXACT_EMD_LIMIT,
        });
    }
    let cost = distance_matrix(a, b);
    let assignment = assignment::solve(&cost, n);
    let total_cost = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(Matching {
        assignment,
        total_cost,
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Entropic transport plan for an `n × n` cost matrix with uniform marginals.
///
/// Potentials are warm-started through a geometric epsilon schedule that
/// ends at `epsilon`; every sweep counts against `iterations`. Returns the
/// plan (rows sum to ~1/n), convergence flag, sweeps used, and the row
/// marginal L1 error of the returned plan.
pub(crate) fn sinkhorn_plan(cost: &[f64], n: usize, epsilon: f64, iterations: usize) -> (Vec<f64>, bool, usize, f64) {
    const TOLERANCE: f64 = 1e-6;
    const WARM_TOLERANCE: f64 = 1e-3;
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let budget = iterations.max(1);
    let mut used = 0;

    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let mut schedule = Vec::new();
    let mut eps = max_cost;
    while eps > epsilon {
        schedule.push(eps);
        eps *= 0.5;
    }
    schedule.push(epsilon);

    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for (stage, &eps) in schedule.iter().enumerate() {
        let last = stage + 1 == schedule.len();
        let tol = if last { TOLERANCE } else { WARM_TOLERANCE };
        // Warm-up stages always leave at least one sweep for the target epsilon.
        let limit = if last { budget } else { budget - 1 };
        while used < limit {
            used += 1;
            for i in 0..n {
                let row = &cost[i * n..(i + 1) * n];
                f[i] = eps * (log_w - log_sum_exp(row.iter().zip(&g).map(|(c, gj)| (gj - c) / eps)));
            }
            for j in 0..n {
                g[j] = eps * (log_w - log_sum_exp((0..n).map(|i| (f[i] - cost[i * n + j]) / eps)));
            }
            // Columns are exact after the g update; measure the rows.
            let err: f64 = (0..n)
                .map(|i| {
                    let s: f64 = (0..n).map(|j| ((f[i] + g[j] - cost[i * n + j]) / eps).exp()).sum();
                    (s - 1.0 / n as f64).abs()
                })
                .sum();
            if last && best.as_ref().is_none_or(|b| err < b.0) {
                best = Some((err, f.clone(), g.clone()));
            }
            if err < tol {
                break;
            }
        }
    }
    let (best_err, f, g) = best.expect("final stage runs at least once");
    let plan = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            ((f[i] + g[j] - cost[k]) / epsilon).exp()
        })
        .collect();
    (plan, best_err < TOLERANCE, used, best_err)
}

fn cmp_clouds(a: &PointCloud, b: &PointCloud) -> Ordering {
    let key = |c: &PointCloud| -> Vec<u32> { c.points().iter().flat_map(|p| p.map(f32::to_bits)).collect() };
    key(a).cmp(&key(b))
}

pub fn emd_sinkhorn(a: &PointCloud, b: &PointCloud, epsilon: f64, iterations: usize) -> Result<SinkhornResult> {
    check_sizes(a.len(), b.len())?;
    if a.is_empty() {
        return Err(PctError::EmptyInput("entropic EMD needs at least one point"));
    }
    if !(epsilon > 0.0) {
        return Err(PctError::parameter("epsilon", "must be positive"));
    }
    // Canonical argument order makes the result bit-identical under swapping.
    let (a, b) = if cmp_clouds(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let n = a.len();
    let cost = distance_matrix(&a.to_f64(), &b.to_f64());
    let (plan, converged, iterations, marginal_error) = sinkhorn_plan(&cost, n, epsilon, iterations);
    let total: f64 = plan.iter().zip(&cost).map(|(p, c)| p * c).sum();
    Ok(SinkhornResult {
        cost: total * n as f64,
        converged,
        iterations,
        marginal_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::from_points((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
    }

    fn brute_force(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        fn rec(a: &[[f64; 3]], b: &[[f64; 3]], i: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if i == a.len() {
                *best = best.min(acc);
                return;
            }
            for j in 0..b.len() {
                if !used[j] {
                    used[j] = true;
                    let d = crate::kdtree::dist_sq(&a[i], &b[j]).sqrt();
                    rec(a, b, i + 1, used, acc + d, best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(a, b, 0, &mut vec![false; b.len()], 0.0, &mut best);
        best
    }

    #[test]
    fn identical_clouds_cost_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_cloud(&mut rng, 20);
        let m = emd_exact(&a, &a).unwrap();
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn two_point_example() {
        let a = PointCloud::from_points(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = PointCloud::from_points(vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let m = emd_exact(&a, &b).unwrap();
        assert!((m.total_cost - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(m.assignment, vec![0, 1]);
    }

    #[test]
    fn size_and_capacity_errors() {
        let a = PointCloud::from_points(vec![[0.0; 3]]);
        let b = PointCloud::from_points(vec![[0.0; 3]; 2]);
        assert!(matches!(emd_exact(&a, &b), Err(PctError::SizeMismatch { .. })));
        let big = PointCloud::from_points(vec![[0.0; 3]; 513]);
        assert!(matches!(emd_exact(&big, &big), Err(PctError::Capacity { .. })));
    }

    #[test]
    fn matches_enumeration_and_beats_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..40 {
            let n = rng.random_range(1..=6);
            let a = random_cloud(&mut rng, n);
            let b = random_cloud(&mut rng, n);
            let m = emd_exact(&a, &b).unwrap();
            let oracle = brute_force(&a.to_f64(), &b.to_f64());
            assert!((m.total_cost - oracle).abs() < 1e-9);
            let mut sorted = m.assignment.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            let ident: f64 = (0..n)
                .map(|i| crate::kdtree::dist_sq(&a.point(i), &b.point(i)).sqrt())
                .sum();
            assert!(m.total_cost <= ident + 1e-12);
        }
    }

    #[test]
    fn sinkhorn_self_distance_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_cloud(&mut rng, 24);
        let r = emd_sinkhorn(&a, &a, 1e-3, 500).unwrap();
        assert!(r.cost.abs() < 1e-6, "cost {}", r.cost);
    }

    #[test]
    fn sinkhorn_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_cloud(&mut rng, 16);
        let b = random_cloud(&mut rng, 16);
        let x = emd_sinkhorn(&a, &b, 0.05, 300).unwrap();
        let y = emd_sinkhorn(&b, &a, 0.05, 300).unwrap();
        assert_eq!(x.cost.to_bits(), y.cost.to_bits());
    }

    #[test]
    fn sinkhorn_drifts_down_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_cloud(&mut rng, 16);
        let b = random_cloud(&mut rng, 16);
        let exact = emd_exact(&a, &b).unwrap().total_cost;
        let mut prev = f64::INFINITY;
        for eps in [0.5, 0.2, 0.1, 0.05, 0.02, 0.01] {
            let r = emd_sinkhorn(&a, &b, eps, 20_000).unwrap();
            assert!(r.converged, "eps {eps} err {} it {} cost {} exact {exact}", r.marginal_error, r.iterations, r.cost);
            assert!(r.cost <= prev + 1e-9, "eps {eps}: {} > {prev}", r.cost);
            assert!(r.cost >= exact - 1e-6);
            prev = r.cost;
        }
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_cloud(&mut rng, 16);
        let b = random_cloud(&mut rng, 16);
        let r = emd_sinkhorn(&a, &b, 0.001, 1).unwrap();
        assert!(!r.converged);
        assert!(r.cost.is_finite());
        assert_eq!(r.iterations, 1);
    }
}
