//! Meshes, voxel volumes, signed distance fields and point sampling.

mod fps;
pub mod io;
mod mesh;
mod sdf;
mod volume;

pub use fps::{coverage_radius, farthest_point_sampling};
pub use mesh::{icosphere, TriangleMesh};
pub use sdf::{closest_point_on_triangle, padded_grid, sdf_on_grid, voxelize_sdf, SurfaceQuery};
pub use volume::{ScalarVolume, VolumeKind};
