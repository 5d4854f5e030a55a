//! Static 3D kd-tree with exact k-nearest-neighbor queries.
//!
//! Results are ordered by `(squared distance, point index)`, so equidistant
//! neighbors always resolve to the lower index regardless of tree layout.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    root: Option<Node>,
}

pub fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = if points.is_empty() {
            None
        } else {
            Some(build(&points, &mut order, 0))
        };
        Self {
            points,
            order,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, query: &[f64; 3]) -> Option<Neighbor> {
        self.knn(query, 1, None).into_iter().next()
    }

    /// The `k` nearest points, optionally skipping one index (the query's own).
    pub fn knn(&self, query: &[f64; 3], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if let (Some(root), true) = (&self.root, k > 0) {
            self.search(root, query, k, exclude, &mut heap);
        }
        let mut out = heap.into_vec();
        out.sort();
        out
    }

    fn search(
        &self,
        node: &Node,
        query: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        match node {
            Node::Leaf { start, end } => {
                for &index in &self.order[*start..*end] {
                    if Some(index) == exclude {
                        continue;
                    }
                    let cand = Neighbor {
                        index,
                        dist_sq: dist_sq(query, &self.points[index]),
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, k, exclude, heap);
                // Equal distance may still hold a lower index, so only prune strictly.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().dist_sq {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }
}

fn build(points: &[[f64; 3]], order: &mut [usize], offset: usize) -> Node {
    if order.len() <= LEAF_SIZE {
        return Node::Leaf {
            start: offset,
            end: offset + order.len(),
        };
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        return Node::Leaf {
            start: offset,
            end: offset + order.len(),
        };
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[mid]][axis];
    // Left holds coordinates <= value; right holds >= value. Both sides are
    // searched when the query sits on the plane, so duplicates are safe.
    let (l, r) = order.split_at_mut(mid);
    Node::Split {
        axis,
        value,
        left: Box::new(build(points, l, offset)),
        right: Box::new(build(points, r, offset + mid)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[[f64; 3]], q: &[f64; 3], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(index, p)| Neighbor {
                index,
                dist_sq: dist_sq(q, p),
            })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            // Coarse grid coordinates force many exact ties.
            let n = 50 + trial * 20;
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.random_range(0..5) as f64, rng.random_range(0..5) as f64, rng.random_range(0..3) as f64])
                .collect();
            let tree = KdTree::new(pts.clone());
            for _ in 0..30 {
                let q = [rng.random_range(-1.0..6.0), rng.random_range(-1.0..6.0), rng.random_range(-1.0..4.0)];
                let k = rng.random_range(1..8);
                assert_eq!(tree.knn(&q, k, None), brute(&pts, &q, k, None));
                let ex = rng.random_range(0..n);
                assert_eq!(tree.knn(&pts[ex], k, Some(ex)), brute(&pts, &pts[ex], k, Some(ex)));
            }
        }
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::new(vec![]);
        assert!(tree.nearest(&[0.0; 3]).is_none());
    }
}
