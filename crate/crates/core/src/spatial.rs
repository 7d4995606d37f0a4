//! Exact k-nearest-neighbour queries over 3-D points.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub type Point3 = [f64; 3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    /// Compared by squared Euclidean distance.
    #[default]
    Euclidean,
    Manhattan,
}

impl Metric {
    /// Distance key: squared length for Euclidean, L1 length for Manhattan.
    pub fn key(self, a: &Point3, b: &Point3) -> f64 {
        match self {
            Metric::Euclidean => sq_dist(a, b),
            Metric::Manhattan => (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs(),
        }
    }

    /// Actual distance from a key.
    pub fn distance(self, key: f64) -> f64 {
        match self {
            Metric::Euclidean => key.sqrt(),
            Metric::Manhattan => key,
        }
    }

    fn plane_bound(self, diff: f64) -> f64 {
        match self {
            Metric::Euclidean => diff * diff,
            Metric::Manhattan => diff.abs(),
        }
    }
}

pub fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// A neighbour candidate ordered by (distance key, index).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub key: f64,
    pub index: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.total_cmp(&other.key).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree. Results are exact and ties are broken by smaller index, so
/// answers are identical to a brute-force scan.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len(), 0);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = self.widest_dim(start, end).unwrap_or(depth % 3);
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][dim].total_cmp(&pts[b][dim]));
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid, depth + 1);
        let right = self.build_node(mid, end, depth + 1);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    fn widest_dim(&self, start: usize, end: usize) -> Option<usize> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for d in 0..3 {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
    }

    /// The `k` nearest points to `query`, sorted by (distance, index).
    pub fn knn(&self, query: &Point3, k: usize, metric: Metric) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.search(0, query, k, metric, &mut heap);
        }
        let mut out = heap.into_vec();
        out.sort();
        out
    }

    pub fn nearest(&self, query: &Point3, metric: Metric) -> Option<Neighbor> {
        self.knn(query, 1, metric).into_iter().next()
    }

    fn search(&self, node: usize, q: &Point3, k: usize, metric: Metric, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor {
                        key: metric.key(q, &self.points[i]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("nonempty") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, metric, heap);
                let bound = metric.plane_bound(diff);
                if heap.len() < k || bound <= heap.peek().expect("nonempty").key {
                    self.search(far, q, k, metric, heap);
                }
            }
        }
    }
}

/// O(N) scan with the same ordering as [`KdTree::knn`].
pub fn brute_force_knn(points: &[Point3], query: &Point3, k: usize, metric: Metric) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Neighbor {
            key: metric.key(query, p),
            index,
        })
        .collect();
    all.sort();
    all.truncate(k);
    all
}
