//! Shape oracles, sampling, voxel grids, isosurfacing and smoothing.

mod grid;
mod io;
mod marching_cubes;
mod mesh;
mod sampling;
mod shape;
mod smoothing;
mod tables;

pub use grid::{GridSpec, VoxelGrid};
pub use io::{load_points, points_from_text, points_to_text, save_points};
pub use marching_cubes::marching_cubes;
pub use mesh::TriangleMesh;
pub use sampling::{sample_surface, QuerySampler};
pub use shape::Shape;
pub use smoothing::laplacian_smooth;
