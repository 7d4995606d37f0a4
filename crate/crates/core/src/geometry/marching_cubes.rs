//! Isosurface extraction with the classic 256-case lookup.

use std::collections::HashMap;

use super::grid::VoxelGrid;
use super::mesh::TriangleMesh;
use super::tables::{EDGE_TABLE, TRI_TABLE};
use crate::error::{Error, Result};

/// Corner offsets in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs of the twelve cube edges.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Welding key: a lattice edge (lower sample, axis) or a sample itself when
/// the field equals `iso` there.
#[derive(Clone, Copy, Hash, PartialEq, Eq)]
enum VertexKey {
    Edge(usize, u8),
    Sample(usize),
}

/// Triangulates the `iso` level set of `field`, treating values at or above
/// `iso` as inside. Vertices shared between cells are welded, triangles that
/// collapse to a point or edge are dropped, and the result winds so that
/// normals point out of the region above `iso`. An `iso` outside the value
/// range yields an empty mesh.
pub fn marching_cubes(field: &VoxelGrid, iso: f64) -> Result<TriangleMesh> {
    if !iso.is_finite() {
        return Err(Error::invalid("iso level must be finite"));
    }
    if field.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("marching cubes needs a finite field"));
    }
    let spec = field.spec;
    let [nx, ny, nz] = spec.res;
    let values = field.values();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut welded: HashMap<VertexKey, usize> = HashMap::new();

    let mut vertex = |a: [usize; 3], b: [usize; 3]| -> usize {
        // Orient the lattice edge from its lower sample so both cells that
        // share it interpolate identically.
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (il, ih) = (spec.index(lo[0], lo[1], lo[2]), spec.index(hi[0], hi[1], hi[2]));
        let (vl, vh) = (values[il], values[ih]);
        let t = ((iso - vl) / (vh - vl)).clamp(0.0, 1.0);
        let key = if t == 0.0 {
            VertexKey::Sample(il)
        } else if t == 1.0 {
            VertexKey::Sample(ih)
        } else {
            let axis = (0..3).find(|&d| lo[d] != hi[d]).expect("edge spans one axis") as u8;
            VertexKey::Edge(il, axis)
        };
        *welded.entry(key).or_insert_with(|| {
            let pl = spec.point(lo[0], lo[1], lo[2]);
            let ph = spec.point(hi[0], hi[1], hi[2]);
            vertices.push([
                pl[0] + t * (ph[0] - pl[0]),
                pl[1] + t * (ph[1] - pl[1]),
                pl[2] + t * (ph[2] - pl[2]),
            ]);
            vertices.len() - 1
        })
    };

    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let corner = CORNERS.map(|c| [i + c[0], j + c[1], k + c[2]]);
                let mut case = 0usize;
                for (bit, c) in corner.iter().enumerate() {
                    if values[spec.index(c[0], c[1], c[2])] < iso {
                        case |= 1 << bit;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut ids = [usize::MAX; 12];
                for (e, pair) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) != 0 {
                        ids[e] = vertex(corner[pair[0]], corner[pair[1]]);
                    }
                }
                for tri in TRI_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [ids[tri[0] as usize], ids[tri[1] as usize], ids[tri[2] as usize]];
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                        triangles.push(t);
                    }
                }
            }
        }
    }
    let mut mesh = TriangleMesh::new(vertices, triangles)?;
    // The tables wind one way for the "below iso" side; pick whichever
    // orientation encloses positive volume.
    if mesh.signed_volume() < 0.0 {
        mesh.flip();
    }
    Ok(mesh)
}
