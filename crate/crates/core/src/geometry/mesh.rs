//! Indexed triangle meshes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::grid::{GridSpec, VoxelGrid};
use crate::error::{Error, Result};
use crate::spatial::Point3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::invalid(format!(
                "triangle {t:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("mesh vertex is not finite"));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn corners(&self, t: usize) -> [Point3; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    /// Unnormalized normal: twice the area times the unit normal.
    fn cross(&self, t: usize) -> Point3 {
        let [a, b, c] = self.corners(t);
        cross(&sub(&b, &a), &sub(&c, &a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * norm(&self.cross(t))
    }

    pub fn triangle_areas(&self) -> Vec<f64> {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).collect()
    }

    pub fn area(&self) -> f64 {
        self.triangle_areas().iter().sum()
    }

    /// Unit normal of a triangle, following its winding; zero if degenerate.
    pub fn face_normal(&self, t: usize) -> Point3 {
        unit(self.cross(t))
    }

    /// Area-weighted vertex normals, unit length (zero for isolated vertices).
    pub fn vertex_normals(&self) -> Vec<Point3> {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for t in 0..self.triangles.len() {
            let c = self.cross(t);
            for &v in &self.triangles[t] {
                for a in 0..3 {
                    acc[v][a] += c[a];
                }
            }
        }
        acc.into_iter().map(unit).collect()
    }

    /// Undirected edges with their triangle counts, in first-seen order.
    fn edge_counts(&self) -> Vec<((usize, usize), usize)> {
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut out: Vec<((usize, usize), usize)> = Vec::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                match index.get(&key) {
                    Some(&n) => out[n].1 += 1,
                    None => {
                        index.insert(key, out.len());
                        out.push((key, 1));
                    }
                }
            }
        }
        out
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.edge_counts().into_iter().map(|(e, _)| e).collect()
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        !self.is_empty() && self.edge_counts().iter().all(|&(_, n)| n == 2)
    }

    /// Every directed edge appears once, so neighbouring triangles agree on
    /// orientation.
    pub fn is_consistently_oriented(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.triangles
            .iter()
            .all(|t| (0..3).all(|e| seen.insert((t[e], t[(e + 1) % 3]))))
    }

    /// V - E + F over the vertices that some triangle references.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        self.triangles.iter().flatten().for_each(|&v| used[v] = true);
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Positive when triangles wind counter-clockwise seen from outside.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                dot(&a, &cross(&b, &c)) / 6.0
            })
            .sum()
    }

    pub fn flip(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
    }

    pub fn bounding_box(&self) -> Option<(Point3, Point3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (
                [lo[0].min(v[0]), lo[1].min(v[1]), lo[2].min(v[2])],
                [hi[0].max(v[0]), hi[1].max(v[1]), hi[2].max(v[2])],
            )
        }))
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.vertices.len().max(1) as f64;
        let s = self
            .vertices
            .iter()
            .fold([0.0; 3], |s, v| [s[0] + v[0], s[1] + v[1], s[2] + v[2]]);
        s.map(|c| c / n)
    }

    /// Neighbour lists in ascending order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj.iter_mut().for_each(|l| l.sort_unstable());
        adj
    }

    /// Occupancy of `spec`'s sample points by ray parity along +z.
    ///
    /// Expects a closed mesh. Rays that hit an edge or vertex exactly are
    /// resolved by symbolic perturbation, so each crossing counts once.
    pub fn voxelize(&self, spec: &GridSpec) -> VoxelGrid {
        let [nx, ny, nz] = spec.res;
        let mut grid = VoxelGrid::filled(*spec, 0.0);
        // Bin triangles by the columns their xy extent covers.
        let mut bins: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
        let col = |x: f64, o: f64| (x - o) / spec.h;
        for (t, tri) in self.triangles.iter().enumerate() {
            let p = tri.map(|i| self.vertices[i]);
            let (xlo, xhi) = min_max([p[0][0], p[1][0], p[2][0]]);
            let (ylo, yhi) = min_max([p[0][1], p[1][1], p[2][1]]);
            let i0 = col(xlo, spec.origin[0]).floor().max(0.0) as usize;
            let i1 = (col(xhi, spec.origin[0]).ceil() as isize).min(nx as isize - 1);
            let j0 = col(ylo, spec.origin[1]).floor().max(0.0) as usize;
            let j1 = (col(yhi, spec.origin[1]).ceil() as isize).min(ny as isize - 1);
            if i1 < 0 || j1 < 0 {
                continue;
            }
            for i in i0..=i1 as usize {
                for j in j0..=j1 as usize {
                    bins[i * ny + j].push(t);
                }
            }
        }
        let mut hits = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                let q = spec.point(i, j, 0);
                hits.clear();
                for &t in &bins[i * ny + j] {
                    if let Some(z) = ray_z_hit(&self.corners(t), q[0], q[1]) {
                        hits.push(z);
                    }
                }
                if hits.is_empty() {
                    continue;
                }
                hits.sort_by(f64::total_cmp);
                let mut below = 0;
                for k in 0..nz {
                    let z = spec.origin[2] + spec.h * k as f64;
                    while below < hits.len() && hits[below] < z {
                        below += 1;
                    }
                    if below % 2 == 1 {
                        grid.set(i, j, k, 1.0);
                    }
                }
            }
        }
        grid
    }

    /// Wavefront OBJ with `v` and `f` lines.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            writeln!(out, "v {:e} {:e} {:e}", v[0], v[1], v[2]).expect("write to string");
        }
        for t in &self.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).expect("write to string");
        }
        out
    }

    /// Reads `v` and `f` lines; other records are skipped. Faces with more
    /// than three corners are fanned, and `i/t/n` corner syntax is accepted.
    pub fn from_obj(text: &str, source: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("v") => {
                    let c: Vec<f64> = tok
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::parse(source, n + 1, "bad vertex coordinate"))?;
                    if c.len() != 3 || c.iter().any(|x| !x.is_finite()) {
                        return Err(Error::parse(source, n + 1, "vertex needs three finite coordinates"));
                    }
                    vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = tok
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            match head.parse::<usize>() {
                                Ok(i) if i >= 1 => Ok(i - 1),
                                _ => Err(Error::parse(source, n + 1, format!("bad face index `{t}`"))),
                            }
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(Error::parse(source, n + 1, "face needs at least three corners"));
                    }
                    for w in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[w], idx[w + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles).map_err(|e| Error::parse(source, text.lines().count(), e.to_string()))
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_obj(&text, &path.display().to_string())
    }
}

fn min_max(v: [f64; 3]) -> (f64, f64) {
    (v[0].min(v[1]).min(v[2]), v[0].max(v[1]).max(v[2]))
}

/// Sign of the xy edge function of `(a, b)` at `(x, y)` shifted by
/// `(eps, eps^2)`. Computed from the lexicographically smaller endpoint so
/// the two triangles sharing an edge see exactly opposite values.
fn edge_side(a: &Point3, b: &Point3, x: f64, y: f64) -> f64 {
    let (p, q, s) = if (a[0], a[1]) <= (b[0], b[1]) {
        (a, b, 1.0)
    } else {
        (b, a, -1.0)
    };
    let e = (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
    let sign = if e != 0.0 {
        e.signum()
    } else if q[1] != p[1] {
        -(q[1] - p[1]).signum()
    } else {
        (q[0] - p[0]).signum()
    };
    s * sign
}

/// Height at which the vertical line through `(x, y)` crosses the triangle.
fn ray_z_hit(t: &[Point3; 3], x: f64, y: f64) -> Option<f64> {
    let s0 = edge_side(&t[1], &t[2], x, y);
    let s1 = edge_side(&t[2], &t[0], x, y);
    let s2 = edge_side(&t[0], &t[1], x, y);
    if !(s0 == s1 && s1 == s2) || s0 == 0.0 {
        return None;
    }
    let area = (t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[1][1] - t[0][1]) * (t[2][0] - t[0][0]);
    if area == 0.0 {
        return None;
    }
    let w0 = ((t[1][0] - x) * (t[2][1] - y) - (t[1][1] - y) * (t[2][0] - x)) / area;
    let w1 = ((t[2][0] - x) * (t[0][1] - y) - (t[2][1] - y) * (t[0][0] - x)) / area;
    let w2 = 1.0 - w0 - w1;
    Some(w0 * t[0][2] + w1 * t[1][2] + w2 * t[2][2])
}

pub(crate) fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: Point3) -> Point3 {
    let n = norm(&a);
    if n > 0.0 {
        a.map(|c| c / n)
    } else {
        [0.0; 3]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tetrahedron() -> TriangleMesh {
        let s = 1.0 / 3f64.sqrt();
        TriangleMesh::new(
            vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        )
        .unwrap()
    }

    fn unit_cube() -> TriangleMesh {
        let v = (0..8)
            .map(|i| {
                [
                    (i & 1) as f64 - 0.5,
                    ((i >> 1) & 1) as f64 - 0.5,
                    ((i >> 2) & 1) as f64 - 0.5,
                ]
            })
            .collect();
        let quads = [
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let tris = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        TriangleMesh::new(v, tris).unwrap()
    }

    #[test]
    fn tetrahedron_topology() {
        let t = tetrahedron();
        assert!(t.is_closed());
        assert!(t.is_consistently_oriented());
        assert_eq!(t.euler_characteristic(), 2);
        assert!(t.signed_volume() > 0.0);
        for n in t.vertex_normals() {
            assert!((norm(&n) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cube_area_volume_and_normals() {
        let c = unit_cube();
        assert!(c.is_closed());
        assert!((c.area() - 6.0).abs() < 1e-12);
        assert!((c.signed_volume() - 1.0).abs() < 1e-12);
        // Outward normal of the first face (z = -0.5).
        assert_eq!(c.face_normal(0), [0.0, 0.0, -1.0]);
        let mut f = c.clone();
        f.flip();
        assert!((f.signed_volume() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn open_mesh_is_not_closed() {
        let mut c = unit_cube();
        c.triangles.pop();
        assert!(!c.is_closed());
        assert!(!TriangleMesh::default().is_closed());
    }

    #[test]
    fn voxelized_cube_counts_interior_samples() {
        let c = unit_cube();
        // Columns at x = y run through the diagonal edge of the top and
        // bottom faces; that crossing must count once.
        let spec = GridSpec::new([8; 3], [-0.875; 3], 0.25).unwrap();
        let v = c.voxelize(&spec);
        let want = VoxelGrid::from_fn(spec, |p| if p.iter().all(|x| x.abs() < 0.5) { 1.0 } else { 0.0 });
        assert_eq!(v, want);
        assert_eq!(v.count(), 64);
    }

    #[test]
    fn obj_round_trip_and_errors() {
        let c = unit_cube();
        let back = TriangleMesh::from_obj(&c.to_obj(), "mem").unwrap();
        assert_eq!(back, c);
        let quad = TriangleMesh::from_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n", "q").unwrap();
        assert_eq!(quad.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(TriangleMesh::from_obj("v 0 0\n", "x").is_err());
        assert!(TriangleMesh::from_obj("v 0 0 0\nf 1 2 3\n", "x").is_err());
        assert!(TriangleMesh::from_obj("v 0 0 0\nf 0 1 1\n", "x").is_err());
    }
}
