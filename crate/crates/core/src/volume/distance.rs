use rayon::prelude::*;

use super::grid::{ChannelRole, GridSpec, VoxelGrid};
use super::mesh::{point_triangle_distance_sq, TriangleMesh, Vec3};
use crate::error::{Error, Result};

/// Closed-form solid whose surface distance is known exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f32 },
    Cuboid { min: Vec3, max: Vec3 },
}

impl Primitive {
    /// Unsigned distance from `p` to the primitive's boundary surface.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => {
                let d = [
                    p[0] - center[0] as f64,
                    p[1] - center[1] as f64,
                    p[2] - center[2] as f64,
                ];
                ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius as f64).abs()
            }
            Primitive::Cuboid { min, max } => {
                let mut outside = 0.0;
                let mut inside = f64::INFINITY;
                let mut is_inside = true;
                for a in 0..3 {
                    let (lo, hi) = (min[a] as f64, max[a] as f64);
                    let excess = (lo - p[a]).max(p[a] - hi);
                    if excess > 0.0 {
                        outside += excess * excess;
                        is_inside = false;
                    } else {
                        inside = inside.min(-excess);
                    }
                }
                if is_inside {
                    inside
                } else {
                    outside.sqrt()
                }
            }
        }
    }
}

/// Exact unsigned distance to the union of primitive surfaces at every voxel center.
pub fn analytic_udf(primitives: &[Primitive], grid: GridSpec) -> Result<VoxelGrid> {
    if primitives.is_empty() {
        return Err(Error::NoGeometry("primitive list is empty"));
    }
    grid.validate()?;
    let [nx, ny, nz] = grid.dims;
    let mut data = vec![0.0f32; grid.voxel_count()];
    data.par_chunks_mut(ny * nz).enumerate().for_each(|(x, slab)| {
        for y in 0..ny {
            for z in 0..nz {
                let c = grid.center(x, y, z);
                let p = [c[0] as f64, c[1] as f64, c[2] as f64];
                let d = primitives
                    .iter()
                    .map(|prim| prim.surface_distance(p))
                    .fold(f64::INFINITY, f64::min);
                slab[y * nz + z] = d as f32;
            }
        }
    });
    debug_assert_eq!(data.len(), nx * ny * nz);
    VoxelGrid::from_data(grid, vec![ChannelRole::Udf], data)
}

const BLOCK: usize = 8;

/// Unsigned distance field of a mesh plus the nearest triangle per voxel.
#[derive(Debug, Clone)]
pub struct MeshDistance {
    /// Metric distances, `band` where no triangle is within `band`.
    pub grid: VoxelGrid,
    /// Index of the closest triangle, `u32::MAX` outside the band.
    pub nearest: Vec<u32>,
}

/// Exact point-to-triangle distances inside `band`, clamped to `band` beyond.
pub fn udf_from_mesh(mesh: &TriangleMesh, grid: GridSpec, band: f32) -> Result<VoxelGrid> {
    Ok(udf_from_mesh_nearest(mesh, grid, band)?.grid)
}

/// [`udf_from_mesh`] that also reports which triangle attains each distance.
pub fn udf_from_mesh_nearest(mesh: &TriangleMesh, grid: GridSpec, band: f32) -> Result<MeshDistance> {
    if mesh.is_empty() {
        return Err(Error::NoGeometry("mesh has no triangles"));
    }
    mesh.validate()?;
    grid.validate()?;
    if !(band > 0.0) {
        return Err(Error::param(format!("band must be > 0, got {band}")));
    }
    let [nx, ny, nz] = grid.dims;
    let nb = [nx.div_ceil(BLOCK), ny.div_ceil(BLOCK), nz.div_ceil(BLOCK)];
    let mut blocks: Vec<Vec<u32>> = vec![Vec::new(); nb[0] * nb[1] * nb[2]];
    let s = grid.voxel_size as f64;
    let band64 = band as f64;

    // Bin each triangle into every block its band-expanded bounds touch.
    for t in 0..mesh.triangles.len() {
        let corners = mesh.corners(t);
        let mut range = [(0usize, 0usize); 3];
        let mut outside = false;
        for a in 0..3 {
            let lo = corners.iter().map(|c| c[a] as f64).fold(f64::INFINITY, f64::min) - band64;
            let hi = corners.iter().map(|c| c[a] as f64).fold(f64::NEG_INFINITY, f64::max) + band64;
            let ilo = ((lo - grid.origin[a] as f64) / s).ceil();
            let ihi = ((hi - grid.origin[a] as f64) / s).floor();
            if ihi < 0.0 || ilo > (grid.dims[a] - 1) as f64 || ilo > ihi {
                outside = true;
                break;
            }
            let ilo = ilo.max(0.0) as usize;
            let ihi = (ihi as usize).min(grid.dims[a] - 1);
            range[a] = (ilo / BLOCK, ihi / BLOCK);
        }
        if outside {
            continue;
        }
        for bx in range[0].0..=range[0].1 {
            for by in range[1].0..=range[1].1 {
                for bz in range[2].0..=range[2].1 {
                    blocks[(bx * nb[1] + by) * nb[2] + bz].push(t as u32);
                }
            }
        }
    }

    let tris: Vec<[[f64; 3]; 3]> = (0..mesh.triangles.len())
        .map(|t| {
            let c = mesh.corners(t);
            c.map(|v| [v[0] as f64, v[1] as f64, v[2] as f64])
        })
        .collect();
    let band_sq = band64 * band64;
    let mut dist = vec![band; grid.voxel_count()];
    let mut nearest = vec![u32::MAX; grid.voxel_count()];
    dist.par_chunks_mut(ny * nz)
        .zip(nearest.par_chunks_mut(ny * nz))
        .enumerate()
        .for_each(|(x, (dslab, nslab))| {
            for y in 0..ny {
                for z in 0..nz {
                    let block = &blocks[((x / BLOCK) * nb[1] + y / BLOCK) * nb[2] + z / BLOCK];
                    if block.is_empty() {
                        continue;
                    }
                    let c = grid.center(x, y, z);
                    let p = [c[0] as f64, c[1] as f64, c[2] as f64];
                    let mut best = f64::INFINITY;
                    let mut best_t = u32::MAX;
                    for &t in block {
                        let [a, b, cc] = tris[t as usize];
                        let d = point_triangle_distance_sq(p, a, b, cc);
                        if d < best {
                            best = d;
                            best_t = t;
                        }
                    }
                    if best <= band_sq {
                        dslab[y * nz + z] = best.sqrt() as f32;
                        nslab[y * nz + z] = best_t;
                    }
                }
            }
        });
    Ok(MeshDistance {
        grid: VoxelGrid::from_data(grid, vec![ChannelRole::Udf], dist)?,
        nearest,
    })
}

/// Clamps distance channels at `tau` and rescales them to `[0, 1]`.
///
/// Channels other than [`ChannelRole::Udf`] pass through untouched.
pub fn truncate_normalize(grid: &VoxelGrid, tau: f32) -> Result<VoxelGrid> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!("truncation must be > 0, got {tau}")));
    }
    let udf: Vec<bool> = grid.roles.iter().map(|&r| r == ChannelRole::Udf).collect();
    let c = grid.channels();
    let mut out = grid.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        if udf[i % c] {
            *v = if *v >= tau { 1.0 } else { v.max(0.0) / tau };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_voxel_at(p: Vec3) -> GridSpec {
        GridSpec::new([1, 1, 1], 0.1, p).unwrap()
    }

    #[test]
    fn sphere_examples() {
        let s = [Primitive::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        }];
        assert_eq!(analytic_udf(&s, single_voxel_at([1.5, 0.0, 0.0])).unwrap().data[0], 0.5);
        assert_eq!(analytic_udf(&s, single_voxel_at([0.0; 3])).unwrap().data[0], 1.0);
    }

    #[test]
    fn box_example_matches_dense_surface_samples() {
        let b = Primitive::Cuboid {
            min: [0.0; 3],
            max: [2.0; 3],
        };
        let got = analytic_udf(&[b], single_voxel_at([1.0, 1.0, 3.0])).unwrap().data[0];
        assert_eq!(got, 1.0);
        // Oracle: densest grid of points on the six faces.
        let n = 200;
        let p = [1.0f64, 1.0, 3.0];
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let u = 2.0 * i as f64 / n as f64;
                let v = 2.0 * j as f64 / n as f64;
                for q in [
                    [0.0, u, v],
                    [2.0, u, v],
                    [u, 0.0, v],
                    [u, 2.0, v],
                    [u, v, 0.0],
                    [u, v, 2.0],
                ] {
                    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                    best = best.min(d);
                }
            }
        }
        assert!((got as f64 - best).abs() < 1e-3);
    }

    #[test]
    fn empty_inputs_are_no_geometry() {
        let g = single_voxel_at([0.0; 3]);
        assert!(matches!(analytic_udf(&[], g), Err(Error::NoGeometry(_))));
        assert!(matches!(
            udf_from_mesh(&TriangleMesh::default(), g, 1.0),
            Err(Error::NoGeometry(_))
        ));
    }

    #[test]
    fn unit_cube_mesh_examples() {
        let mesh = TriangleMesh::cuboid([0.0; 3], [1.0; 3]);
        let on_face = udf_from_mesh(&mesh, single_voxel_at([1.0, 0.5, 0.5]), 1.0).unwrap();
        assert_eq!(on_face.data[0], 0.0);
        let off = udf_from_mesh(&mesh, single_voxel_at([1.3, 0.5, 0.5]), 1.0).unwrap();
        assert!((off.data[0] - 0.3).abs() < 1e-6);
        let far = udf_from_mesh(&mesh, single_voxel_at([5.0, 0.5, 0.5]), 1.0).unwrap();
        assert_eq!(far.data[0], 1.0);
    }

    #[test]
    fn mesh_udf_independent_of_slab_count() {
        let mesh = TriangleMesh::icosphere([0.1, 0.0, -0.2], 0.7, 2);
        let spec = GridSpec::covering([-1.0; 3], [20, 20, 20], 0.1).unwrap();
        let a = udf_from_mesh(&mesh, spec, 0.3).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| udf_from_mesh(&mesh, spec, 0.3).unwrap());
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn truncate_examples() {
        let spec = GridSpec::new([3, 1, 1], 1.0, [0.0; 3]).unwrap();
        let g = VoxelGrid::from_data(spec, vec![ChannelRole::Udf], vec![3.0, 0.0, 0.5]).unwrap();
        let t = truncate_normalize(&g, 1.0).unwrap();
        assert_eq!(t.data, vec![1.0, 0.0, 0.5]);
        assert!(truncate_normalize(&g, 0.0).is_err());
        assert!(truncate_normalize(&g, -1.0).is_err());
    }

    #[test]
    fn truncate_leaves_color_channels() {
        let spec = GridSpec::new([1, 1, 1], 1.0, [0.0; 3]).unwrap();
        let g = VoxelGrid::from_data(spec, vec![ChannelRole::Udf, ChannelRole::Red], vec![2.0, 0.7]).unwrap();
        let t = truncate_normalize(&g, 4.0).unwrap();
        assert_eq!(t.data, vec![0.5, 0.7]);
    }
}
