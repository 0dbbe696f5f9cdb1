use super::grid::{GridSpec, VoxelGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

/// Upsamples by an integer factor with half-voxel (align-corners-false) alignment.
///
/// Output voxel `j` samples input coordinate `(j + 0.5) / r - 0.5`, clamped to
/// the grid, so for odd `r` every input center coincides with an output center.
pub fn resample(grid: &VoxelGrid, factor: usize, mode: ResampleMode) -> Result<VoxelGrid> {
    if factor == 0 {
        return Err(Error::param("resample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let r = factor;
    let [nx, ny, nz] = grid.dims();
    let out_dims = [nx * r, ny * r, nz * r];
    let s = grid.spec.voxel_size;
    let s_out = s / r as f32;
    let min = grid.spec.world_min();
    let spec = GridSpec::new(
        out_dims,
        s_out,
        [min[0] + 0.5 * s_out, min[1] + 0.5 * s_out, min[2] + 0.5 * s_out],
    )?;
    let c = grid.channels();
    let mut data = vec![0.0f32; spec.voxel_count() * c];

    match mode {
        ResampleMode::Nearest => {
            let mut i = 0;
            for x in 0..out_dims[0] {
                for y in 0..out_dims[1] {
                    for z in 0..out_dims[2] {
                        let src = grid.voxel_index(x / r, y / r, z / r) * c;
                        data[i..i + c].copy_from_slice(&grid.data[src..src + c]);
                        i += c;
                    }
                }
            }
        }
        ResampleMode::Trilinear => {
            let taps = |n: usize| -> Vec<(usize, usize, f32)> {
                (0..n * r)
                    .map(|j| {
                        let pos = ((j as f64 + 0.5) / r as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                        let i0 = pos.floor() as usize;
                        let i1 = (i0 + 1).min(n - 1);
                        (i0, i1, (pos - i0 as f64) as f32)
                    })
                    .collect()
            };
            let (tx, ty, tz) = (taps(nx), taps(ny), taps(nz));
            let mut i = 0;
            for &(x0, x1, fx) in &tx {
                for &(y0, y1, fy) in &ty {
                    for &(z0, z1, fz) in &tz {
                        for ch in 0..c {
                            let g = |x, y, z| grid.data[grid.voxel_index(x, y, z) * c + ch];
                            let c00 = g(x0, y0, z0) * (1.0 - fz) + g(x0, y0, z1) * fz;
                            let c01 = g(x0, y1, z0) * (1.0 - fz) + g(x0, y1, z1) * fz;
                            let c10 = g(x1, y0, z0) * (1.0 - fz) + g(x1, y0, z1) * fz;
                            let c11 = g(x1, y1, z0) * (1.0 - fz) + g(x1, y1, z1) * fz;
                            let c0 = c00 * (1.0 - fy) + c01 * fy;
                            let c1 = c10 * (1.0 - fy) + c11 * fy;
                            data[i] = c0 * (1.0 - fx) + c1 * fx;
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    VoxelGrid::from_data(spec, grid.roles.clone(), data)
}
