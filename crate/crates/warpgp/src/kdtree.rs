//! Small 3-D kd-tree for k-nearest-neighbor queries over scaled space-time
//! coordinates. Supports incremental insertion (Vecchia neighbor search
//! conditions each point on previously ordered ones) and balanced bulk
//! construction (prediction-time searches over the full dataset).
//!
//! Ties are broken by `(distance^2, index)` so results match the brute-force
//! oracle exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy)]
struct Node {
    point: [f64; 3],
    index: usize,
    left: i32,
    right: i32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Default)]
pub struct KdTree {
    nodes: Vec<Node>,
    root: i32,
}

impl KdTree {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            root: -1,
        }
    }

    /// Balanced build over all points (indices `0..points.len()`).
    pub fn bulk(points: &[[f64; 3]]) -> Self {
        let mut tree = Self {
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        let mut order: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(points, &mut order, 0);
        tree
    }

    fn build(&mut self, points: &[[f64; 3]], order: &mut [usize], depth: usize) -> i32 {
        if order.is_empty() {
            return -1;
        }
        let axis = depth % 3;
        order.sort_unstable_by(|&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        let mid = order.len() / 2;
        let idx = order[mid];
        let slot = self.nodes.len() as i32;
        self.nodes.push(Node {
            point: points[idx],
            index: idx,
            left: -1,
            right: -1,
        });
        // Children must be built after the parent slot is reserved.
        let (lo, hi) = order.split_at_mut(mid);
        let left = self.build(points, lo, depth + 1);
        let right = self.build(points, &mut hi[1..], depth + 1);
        self.nodes[slot as usize].left = left;
        self.nodes[slot as usize].right = right;
        slot
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn insert(&mut self, point: [f64; 3], index: usize) {
        let slot = self.nodes.len() as i32;
        self.nodes.push(Node {
            point,
            index,
            left: -1,
            right: -1,
        });
        if self.root < 0 {
            self.root = slot;
            return;
        }
        let mut cur = self.root;
        let mut depth = 0usize;
        loop {
            let axis = depth % 3;
            let node = self.nodes[cur as usize];
            if point[axis] < node.point[axis] {
                if node.left < 0 {
                    self.nodes[cur as usize].left = slot;
                    return;
                }
                cur = node.left;
            } else {
                if node.right < 0 {
                    self.nodes[cur as usize].right = slot;
                    return;
                }
                cur = node.right;
            }
            depth += 1;
        }
    }

    /// Indices of the `k` nearest stored points to `query`, sorted by
    /// `(distance^2, index)` ascending. Returns fewer when the tree is small.
    pub fn knn(&self, query: [f64; 3], k: usize) -> Vec<usize> {
        if k == 0 || self.root < 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(self.root, 0, query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|c| c.index).collect()
    }

    fn search(&self, cur: i32, depth: usize, query: [f64; 3], k: usize, heap: &mut BinaryHeap<Candidate>) {
        if cur < 0 {
            return;
        }
        let node = self.nodes[cur as usize];
        let cand = Candidate {
            d2: dist2(query, node.point),
            index: node.index,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
        let axis = depth % 3;
        let delta = query[axis] - node.point[axis];
        let (near, far) = if delta < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, depth + 1, query, k, heap);
        // The far side can only help if the splitting plane is closer than
        // the current worst candidate (or the heap is not full yet).
        if heap.len() < k || delta * delta <= heap.peek().unwrap().d2 {
            self.search(far, depth + 1, query, k, heap);
        }
    }
}

/// Reference `O(n k)` scan with the same tie rule; the correctness oracle
/// for the tree.
pub fn knn_brute_force(points: &[[f64; 3]], query: [f64; 3], k: usize) -> Vec<usize> {
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Candidate {
            d2: dist2(query, *p),
            index,
        })
        .collect();
    all.sort_unstable();
    all.truncate(k);
    all.into_iter().map(|c| c.index).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = stream_rng(seed, 0);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn incremental_matches_brute_force() {
        let points = random_points(500, 41);
        let mut tree = KdTree::new();
        let mut rng = stream_rng(42, 0);
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                let q = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let k = 10.min(i);
                assert_eq!(tree.knn(q, k), knn_brute_force(&points[..i], q, k));
            }
            tree.insert(*p, i);
        }
    }

    #[test]
    fn bulk_matches_brute_force() {
        let points = random_points(400, 43);
        let tree = KdTree::bulk(&points);
        let mut rng = stream_rng(44, 0);
        for _ in 0..100 {
            let q = [
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            ];
            assert_eq!(tree.knn(q, 7), knn_brute_force(&points, q, 7));
        }
    }

    #[test]
    fn exact_ties_resolve_by_index() {
        // Four points at identical distance from the origin.
        let points = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
        ];
        let tree = KdTree::bulk(&points);
        assert_eq!(tree.knn([0.0; 3], 2), vec![0, 1]);
        assert_eq!(knn_brute_force(&points, [0.0; 3], 2), vec![0, 1]);
    }

    #[test]
    fn k_larger_than_tree_returns_everything() {
        let points = random_points(5, 45);
        let tree = KdTree::bulk(&points);
        let got = tree.knn([0.0; 3], 50);
        assert_eq!(got.len(), 5);
    }
}
