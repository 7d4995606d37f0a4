//! Umbrella (uniform-weight) Laplacian smoothing.

use super::mesh::TriangleMesh;
use crate::error::{Error, Result};

/// Moves every vertex `lambda` of the way to the centroid of its edge
/// neighbours, `iterations` times, updating all vertices simultaneously.
/// Connectivity is untouched and isolated vertices stay put.
pub fn laplacian_smooth(mesh: &TriangleMesh, iterations: usize, lambda: f64) -> Result<TriangleMesh> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!(
            "smoothing lambda must lie in (0, 1], got {lambda}"
        )));
    }
    let adj = mesh.adjacency();
    let mut out = mesh.clone();
    let mut next = out.vertices.clone();
    for _ in 0..iterations {
        for (v, nbrs) in adj.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let mut c = [0.0; 3];
            for &n in nbrs {
                for a in 0..3 {
                    c[a] += out.vertices[n][a];
                }
            }
            let inv = 1.0 / nbrs.len() as f64;
            for a in 0..3 {
                let p = out.vertices[v][a];
                next[v][a] = p + lambda * (c[a] * inv - p);
            }
        }
        std::mem::swap(&mut out.vertices, &mut next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{marching_cubes, GridSpec, Shape, VoxelGrid};

    fn tetrahedron() -> TriangleMesh {
        let s = 1.0 / 3f64.sqrt();
        TriangleMesh::new(
            vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        )
        .unwrap()
    }

    #[test]
    fn full_step_on_tetrahedron_moves_to_opposite_faces() {
        let t = tetrahedron();
        let s = laplacian_smooth(&t, 1, 1.0).unwrap();
        for v in 0..4 {
            let mut want = [0.0; 3];
            for o in (0..4).filter(|&o| o != v) {
                for a in 0..3 {
                    want[a] += t.vertices[o][a] / 3.0;
                }
            }
            for a in 0..3 {
                assert!((s.vertices[v][a] - want[a]).abs() < 1e-12);
            }
        }
        assert!(s.area() < t.area());
        for a in 0..3 {
            assert!(s.centroid()[a].abs() < 1e-12);
        }
        assert_eq!(s.triangles, t.triangles);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let t = tetrahedron();
        assert_eq!(laplacian_smooth(&t, 0, 0.5).unwrap(), t);
        assert!(laplacian_smooth(&t, 1, 0.0).is_err());
        assert!(laplacian_smooth(&t, 1, 1.5).is_err());
    }

    #[test]
    fn sphere_area_shrinks_and_box_never_grows() {
        let spec = GridSpec::unit(32).unwrap();
        let sphere = Shape::sphere(0.4);
        let f = VoxelGrid::from_fn(spec, |p| {
            (0.5 - sphere.signed_distance(p) / (2.0 * spec.h)).clamp(0.0, 1.0)
        });
        let mut m = marching_cubes(&f, 0.5).unwrap();
        let (lo0, hi0) = m.bounding_box().unwrap();
        let mut area = m.area();
        for _ in 0..10 {
            m = laplacian_smooth(&m, 1, 0.5).unwrap();
            let a = m.area();
            assert!(a < area, "area grew from {area} to {a}");
            area = a;
            let (lo, hi) = m.bounding_box().unwrap();
            for d in 0..3 {
                assert!(lo[d] >= lo0[d] && hi[d] <= hi0[d]);
            }
        }
        assert!(m.is_closed());
    }
}
