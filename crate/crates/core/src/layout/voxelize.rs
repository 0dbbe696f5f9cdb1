use rayon::prelude::*;

use super::{Extrude, VectorLayout};
use crate::error::{Error, Result};
use crate::volume::{ChannelRole, GridSpec, Vec3, VoxelGrid};

fn seg_dist_sq(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum()
}

fn as_f64(v: Vec3) -> [f64; 3] {
    [v[0] as f64, v[1] as f64, v[2] as f64]
}

/// Index range of voxel centers inside `[lo, hi]` along `axis`, if any.
fn index_range(spec: &GridSpec, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
    let s = spec.voxel_size as f64;
    let o = spec.origin[axis] as f64;
    let n = spec.dims[axis] as i64;
    let a = (((lo - o) / s).floor() as i64).max(0);
    let b = (((hi - o) / s).ceil() as i64).min(n - 1);
    (a <= b).then_some((a as usize, b as usize))
}

/// z layer holding world height 0, clamped into the grid.
pub(crate) fn ground_layer(spec: &GridSpec) -> usize {
    let k = ((0.0 - spec.world_min()[2] as f64) / spec.voxel_size as f64).floor() as i64;
    k.clamp(0, spec.dims[2] as i64 - 1) as usize
}

/// Rasterizes `layout` into a `K`-channel binary mask over `grid`.
pub fn voxelize_layout(layout: &VectorLayout, grid: &GridSpec, thickness: usize) -> Result<VoxelGrid> {
    grid.validate()?;
    layout.validate()?;
    if thickness == 0 {
        return Err(Error::param("layout thickness must be >= 1 voxel"));
    }
    let k = layout.classes;
    let roles = (0..k).map(|c| ChannelRole::Layout(c as u8)).collect();
    let mut out = VoxelGrid::zeros(*grid, roles)?;
    let [nx, ny, nz] = grid.dims;
    let r = thickness as f64 * grid.voxel_size as f64 / 2.0;
    let r2 = r * r;
    let ground = ground_layer(grid);

    // One x slab per task; each slab scans only the primitives that reach it.
    let slab = ny * nz * k;
    out.data.par_chunks_mut(slab).enumerate().for_each(|(x, slab)| {
        let cx = grid.center(x, 0, 0)[0] as f64;
        let mut set = |y: usize, z: usize, c: usize| slab[(y * nz + z) * k + c] = 1.0;
        for line in &layout.polylines {
            let planar = line.extrude != Extrude::None;
            for w in line.points.windows(2) {
                let (mut a, mut b) = (as_f64(w[0]), as_f64(w[1]));
                if planar {
                    a[2] = 0.0;
                    b[2] = 0.0;
                }
                if cx < a[0].min(b[0]) - r || cx > a[0].max(b[0]) + r {
                    continue;
                }
                let Some((y0, y1)) = index_range(grid, 1, a[1].min(b[1]) - r, a[1].max(b[1]) + r) else {
                    continue;
                };
                let zr = match line.extrude {
                    Extrude::None => index_range(grid, 2, a[2].min(b[2]) - r, a[2].max(b[2]) + r),
                    _ => Some((0, 0)),
                };
                let Some((z0, z1)) = zr else { continue };
                for y in y0..=y1 {
                    let cy = grid.center(0, y, 0)[1] as f64;
                    match line.extrude {
                        Extrude::None => {
                            for z in z0..=z1 {
                                let cz = grid.center(0, 0, z)[2] as f64;
                                if seg_dist_sq([cx, cy, cz], a, b) <= r2 {
                                    set(y, z, line.class);
                                }
                            }
                        }
                        Extrude::Wall => {
                            if seg_dist_sq([cx, cy, 0.0], a, b) <= r2 {
                                for z in 0..nz {
                                    set(y, z, line.class);
                                }
                            }
                        }
                        Extrude::Ground => {
                            if seg_dist_sq([cx, cy, 0.0], a, b) <= r2 {
                                set(y, ground, line.class);
                            }
                        }
                    }
                }
            }
        }
        for bx in &layout.boxes {
            let (lo, hi) = (as_f64(bx.min), as_f64(bx.max));
            if cx < lo[0] || cx > hi[0] {
                continue;
            }
            let (Some((y0, y1)), Some((z0, z1))) =
                (index_range(grid, 1, lo[1], hi[1]), index_range(grid, 2, lo[2], hi[2]))
            else {
                continue;
            };
            for y in y0..=y1 {
                let cy = grid.center(0, y, 0)[1] as f64;
                if cy < lo[1] || cy > hi[1] {
                    continue;
                }
                for z in z0..=z1 {
                    let cz = grid.center(0, 0, z)[2] as f64;
                    if cz >= lo[2] && cz <= hi[2] {
                        set(y, z, bx.class);
                    }
                }
            }
        }
    });
    debug_assert!(nx * slab == out.data.len());
    Ok(out)
}
