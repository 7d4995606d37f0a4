//! Chamfer distance, normal consistency and IoU.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{TriangleMesh, VoxelGrid};
use crate::spatial::{KdTree, Metric, Point3};

#[cfg(test)]
mod tests;

/// Points drawn uniformly over a mesh surface with the normal of the
/// triangle each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSample {
    pub points: Vec<Point3>,
    pub normals: Vec<Point3>,
}

/// Area-weighted triangle choice with uniform barycentric coordinates.
pub fn sample_mesh<R: Rng>(mesh: &TriangleMesh, n: usize, rng: &mut R) -> Result<SurfaceSample> {
    let areas = mesh.triangle_areas();
    let mut cdf = Vec::with_capacity(areas.len());
    let mut total = 0.0;
    for a in &areas {
        total += a;
        cdf.push(total);
    }
    if mesh.is_empty() || total <= 0.0 {
        return Err(Error::invalid("cannot sample an empty mesh"));
    }
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        points.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
        normals.push(mesh.face_normal(t));
    }
    Ok(SurfaceSample { points, normals })
}

/// Point distance used to match samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Norm {
    /// Manhattan distance.
    #[default]
    L1,
    L2,
}

impl Norm {
    fn metric(self) -> Metric {
        match self {
            Norm::L1 => Metric::Manhattan,
            Norm::L2 => Metric::Euclidean,
        }
    }
}

/// Mean distance from each point of `from` to its nearest point of `to`.
fn mean_nearest(from: &[Point3], to: &KdTree, norm: Norm) -> f64 {
    let m = norm.metric();
    let sum: f64 = from
        .iter()
        .map(|p| m.distance(to.nearest(p, m).expect("nonempty target").key))
        .sum();
    sum / from.len() as f64
}

/// Symmetric chamfer distance between point sets: half the mean
/// nearest-neighbour distance each way.
pub fn chamfer_points(a: &[Point3], b: &[Point3], norm: Norm) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two nonempty point sets"));
    }
    let (ta, tb) = (KdTree::build(a), KdTree::build(b));
    Ok(0.5 * mean_nearest(a, &tb, norm) + 0.5 * mean_nearest(b, &ta, norm))
}

/// Samples `n` points on each mesh from the same seeded stream, so two
/// identical meshes get identical samples.
fn sample_pair(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<(SurfaceSample, SurfaceSample)> {
    if n == 0 {
        return Err(Error::invalid("metric sampling needs n >= 1"));
    }
    let sa = sample_mesh(a, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let sb = sample_mesh(b, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((sa, sb))
}

/// Chamfer distance between mesh surfaces, Manhattan by default.
pub fn chamfer_distance(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64, norm: Norm) -> Result<f64> {
    let (sa, sb) = sample_pair(a, b, n, seed)?;
    chamfer_points(&sa.points, &sb.points, norm)
}

/// Chamfer-L1 with the default Manhattan norm.
pub fn chamfer_l1(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    chamfer_distance(a, b, n, seed, Norm::L1)
}

fn mean_normal_agreement(from: &SurfaceSample, to: &SurfaceSample, tree: &KdTree) -> f64 {
    let sum: f64 = from
        .points
        .iter()
        .zip(&from.normals)
        .map(|(p, n)| {
            let j = tree.nearest(p, Metric::Euclidean).expect("nonempty target").index;
            let m = to.normals[j];
            n[0] * m[0] + n[1] * m[1] + n[2] * m[2]
        })
        .sum();
    sum / from.points.len() as f64
}

/// Signed normal consistency between sample sets: the symmetric mean of
/// face-normal dot products with the nearest (Euclidean) sample's normal.
pub fn normal_consistency_samples(a: &SurfaceSample, b: &SurfaceSample) -> Result<f64> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::invalid("normal consistency needs two nonempty samples"));
    }
    let (ta, tb) = (KdTree::build(&a.points), KdTree::build(&b.points));
    Ok(0.5 * mean_normal_agreement(a, b, &tb) + 0.5 * mean_normal_agreement(b, a, &ta))
}

pub fn normal_consistency(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    let (sa, sb) = sample_pair(a, b, n, seed)?;
    normal_consistency_samples(&sa, &sb)
}

/// |A ∩ B| / |A ∪ B| over binary grids of identical geometry; 1 when both
/// are empty.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.spec != b.spec {
        return Err(Error::invalid(format!(
            "iou needs identical grids, got {:?} and {:?}",
            a.spec.res, b.spec.res
        )));
    }
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::invalid("iou needs binary grids"));
    }
    Ok(iou_labels(a.values(), b.values()))
}

/// IoU of two occupancy label vectors (nonzero = occupied).
pub fn iou_labels(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cd1: f64,
    pub nc: f64,
    pub iou: f64,
    /// Surface samples per mesh.
    pub n: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "cd1,nc,iou,n,seed";

    /// Chamfer and normal consistency from one shared pair of samples, IoU
    /// from the occupancy grids.
    pub fn evaluate(
        pred: &TriangleMesh,
        truth: &TriangleMesh,
        pred_occ: &VoxelGrid,
        truth_occ: &VoxelGrid,
        n: usize,
        seed: u64,
        norm: Norm,
    ) -> Result<Self> {
        let iou = iou(pred_occ, truth_occ)?;
        let (sa, sb) = sample_pair(pred, truth, n, seed)?;
        let report = Self {
            cd1: chamfer_points(&sa.points, &sb.points, norm)?,
            nc: normal_consistency_samples(&sa, &sb)?,
            iou,
            n,
            seed,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.cd1 >= 0.0 && (-1.0..=1.0).contains(&self.nc) && (0.0..=1.0).contains(&self.iou);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("metrics out of range: {self:?}")))
        }
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.cd1, self.nc, self.iou, self.n, self.seed)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "chamfer-L1   {:.6}", self.cd1)?;
        writeln!(f, "normal cons. {:.6}", self.nc)?;
        writeln!(f, "IoU          {:.6}", self.iou)?;
        write!(f, "samples      {} (seed {})", self.n, self.seed)
    }
}
