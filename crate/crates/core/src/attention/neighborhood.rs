use std::borrow::Cow;
use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::spatial::{KdTree, Metric, Point3};

/// Whether an anchor may appear in its own neighbour row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SelfPolicy {
    #[default]
    Include,
    Exclude,
}

/// `anchors x k` table of neighbour indices with the matching relative
/// offsets `p_neighbor - p_anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    anchors: usize,
    k: usize,
    indices: Vec<usize>,
    offsets: Vec<Point3>,
}

impl Neighborhood {
    pub fn new(anchors: usize, k: usize, indices: Vec<usize>, offsets: Vec<Point3>) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("neighborhood needs k >= 1"));
        }
        if indices.len() != anchors * k || offsets.len() != anchors * k {
            return Err(Error::invalid(format!(
                "neighborhood of {anchors} x {k} given {} indices and {} offsets",
                indices.len(),
                offsets.len()
            )));
        }
        Ok(Self {
            anchors,
            k,
            indices,
            offsets,
        })
    }

    /// Index-only table with zero offsets.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("neighborhood rows must all have k entries"));
        }
        let indices: Vec<usize> = rows.iter().flatten().copied().collect();
        let offsets = vec![[0.0; 3]; indices.len()];
        Self::new(rows.len(), k, indices, offsets)
    }

    /// k nearest points of every point of `points` (Euclidean, ties to the
    /// smaller index).
    pub fn knn(points: &[Point3], k: usize, policy: SelfPolicy) -> Result<Self> {
        let n = points.len();
        let limit = match policy {
            SelfPolicy::Include => n,
            SelfPolicy::Exclude => n.saturating_sub(1),
        };
        if k == 0 || k > limit {
            return Err(Error::invalid(format!(
                "knn: k = {k} invalid for {n} points ({policy:?} self)"
            )));
        }
        let tree = KdTree::build(points);
        let mut indices = Vec::with_capacity(n * k);
        let mut offsets = Vec::with_capacity(n * k);
        for (i, p) in points.iter().enumerate() {
            let want = if policy == SelfPolicy::Exclude { k + 1 } else { k };
            let row = tree.knn(p, want, Metric::Euclidean);
            let row = row
                .into_iter()
                .filter(|nb| policy == SelfPolicy::Include || nb.index != i)
                .take(k);
            for nb in row {
                indices.push(nb.index);
                offsets.push(sub(&points[nb.index], p));
            }
        }
        Ok(Self::new(n, k, indices, offsets)?.canonical())
    }

    /// For every query, its k nearest points of `cloud`; offsets are
    /// `p_neighbor - q`.
    pub fn query(tree: &KdTree, queries: &[Point3], k: usize) -> Result<Self> {
        if tree.is_empty() {
            return Err(Error::invalid("neighbour query against an empty cloud"));
        }
        if k == 0 || k > tree.len() {
            return Err(Error::invalid(format!(
                "query: k = {k} invalid for {} points",
                tree.len()
            )));
        }
        let cloud = tree.points();
        let mut indices = Vec::with_capacity(queries.len() * k);
        let mut offsets = Vec::with_capacity(queries.len() * k);
        for q in queries {
            for nb in tree.knn(q, k, Metric::Euclidean) {
                indices.push(nb.index);
                offsets.push(sub(&cloud[nb.index], q));
            }
        }
        Ok(Self::new(queries.len(), k, indices, offsets)?.canonical())
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pairs(&self) -> usize {
        self.anchors * self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn offsets(&self) -> &[Point3] {
        &self.offsets
    }

    pub fn row(&self, anchor: usize) -> &[usize] {
        &self.indices[anchor * self.k..(anchor + 1) * self.k]
    }

    pub fn row_offsets(&self, anchor: usize) -> &[Point3] {
        &self.offsets[anchor * self.k..(anchor + 1) * self.k]
    }

    /// Anchor index of every (anchor, neighbour) pair.
    pub fn anchor_index(&self) -> Vec<usize> {
        (0..self.anchors).flat_map(|i| std::iter::repeat_n(i, self.k)).collect()
    }

    /// Largest index referenced.
    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }

    /// Same neighbourhood with every row in canonical order: by offset
    /// length, then offset coordinates, then index. Kernels sum neighbours in
    /// this order, so reordering a row never changes their output.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        let mut order: Vec<usize> = (0..self.k).collect();
        for a in 0..self.anchors {
            let idx = self.row(a);
            let off = self.row_offsets(a);
            order.sort_by(|&x, &y| canonical_cmp((off[x], idx[x]), (off[y], idx[y])));
            for (slot, &src) in order.iter().enumerate() {
                out.indices[a * self.k + slot] = idx[src];
                out.offsets[a * self.k + slot] = off[src];
            }
            order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        }
        out
    }

    /// Borrows `self` when already canonical.
    pub fn to_canonical(&self) -> Cow<'_, Self> {
        if self.is_canonical() {
            Cow::Borrowed(self)
        } else {
            Cow::Owned(self.canonical())
        }
    }

    pub fn is_canonical(&self) -> bool {
        (0..self.anchors).all(|a| {
            let idx = self.row(a);
            let off = self.row_offsets(a);
            (1..self.k).all(|j| canonical_cmp((off[j - 1], idx[j - 1]), (off[j], idx[j])) != Ordering::Greater)
        })
    }

    /// Reorders the entries of row `anchor` by `perm` (a permutation of 0..k).
    pub fn permute_row(&mut self, anchor: usize, perm: &[usize]) {
        assert_eq!(perm.len(), self.k);
        let base = anchor * self.k;
        let idx: Vec<usize> = perm.iter().map(|&p| self.indices[base + p]).collect();
        let off: Vec<Point3> = perm.iter().map(|&p| self.offsets[base + p]).collect();
        self.indices[base..base + self.k].copy_from_slice(&idx);
        self.offsets[base..base + self.k].copy_from_slice(&off);
    }
}

fn canonical_cmp(a: (Point3, usize), b: (Point3, usize)) -> Ordering {
    let la = a.0[0] * a.0[0] + a.0[1] * a.0[1] + a.0[2] * a.0[2];
    let lb = b.0[0] * b.0[0] + b.0[1] * b.0[1] + b.0[2] * b.0[2];
    la.total_cmp(&lb)
        .then(a.0[0].total_cmp(&b.0[0]))
        .then(a.0[1].total_cmp(&b.0[1]))
        .then(a.0[2].total_cmp(&b.0[2]))
        .then(a.1.cmp(&b.1))
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
