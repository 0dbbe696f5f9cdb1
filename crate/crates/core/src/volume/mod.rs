//! Volumetric scene representation: distance grids, resampling, surface
//! extraction and sampling, and the `.wfv` file format.

pub mod distance;
pub mod extract;
pub mod grid;
pub mod io;
pub mod mesh;
pub mod resample;
pub mod sample;

pub use distance::{analytic_udf, truncate_normalize, udf_from_mesh, udf_from_mesh_nearest, MeshDistance, Primitive};
pub use extract::{default_iso, extract_mesh, Extraction};
pub use grid::{ChannelRole, GridSpec, HierarchySpec, LevelSpec, VoxelGrid};
pub use io::{read_volume, write_volume};
pub use mesh::{TriangleMesh, Vec3};
pub use resample::{resample, ResampleMode};
pub use sample::{sample_surface_points, PointSet};
