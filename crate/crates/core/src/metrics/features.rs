use crate::error::{Error, Result};
use crate::volume::{ChannelRole, VoxelGrid};

const THRESHOLDS: [f32; 3] = [0.25, 0.5, 0.75];
const POOLS: [usize; 3] = [1, 2, 4];
const HIST_BINS: usize = 16;

/// Unsigned direction classes of the normal histogram: axes, face diagonals, body diagonals.
pub const NORMAL_DIRECTIONS: [[i8; 3]; 13] = [
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 1, 0],
    [1, -1, 0],
    [1, 0, 1],
    [1, 0, -1],
    [0, 1, 1],
    [0, 1, -1],
    [1, 1, 1],
    [1, 1, -1],
    [1, -1, 1],
    [1, -1, -1],
];

/// Length without color statistics; grids with RGB add six more entries.
pub const FEATURE_DIM: usize = THRESHOLDS.len() * POOLS.len() + HIST_BINS + NORMAL_DIRECTIONS.len();

/// Handcrafted scene descriptor: occupancy fractions at three thresholds and
/// three pooling scales, a 16-bin distance histogram, a 13-bin histogram of
/// distance-gradient directions near the surface, and RGB means and stds.
pub fn featurize(grid: &VoxelGrid) -> Result<Vec<f64>> {
    let u = grid
        .channel_of(ChannelRole::Udf)
        .ok_or_else(|| Error::Validation("grid has no distance channel".into()))?;
    let [nx, ny, nz] = grid.dims();
    let d = |x: usize, y: usize, z: usize| grid.get(x, y, z, u);
    let mut f = Vec::with_capacity(FEATURE_DIM + 6);

    for &t in &THRESHOLDS {
        for &p in &POOLS {
            let (bx, by, bz) = (nx.div_ceil(p), ny.div_ceil(p), nz.div_ceil(p));
            let mut occ = vec![false; bx * by * bz];
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        if d(x, y, z) < t {
                            occ[((x / p) * by + y / p) * bz + z / p] = true;
                        }
                    }
                }
            }
            f.push(occ.iter().filter(|&&o| o).count() as f64 / occ.len() as f64);
        }
    }

    let mut hist = [0.0f64; HIST_BINS];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = d(x, y, z).clamp(0.0, 1.0);
                hist[((v * HIST_BINS as f32) as usize).min(HIST_BINS - 1)] += 1.0;
            }
        }
    }
    let n = (nx * ny * nz) as f64;
    f.extend(hist.iter().map(|h| h / n));

    let mut normals = [0.0f64; 13];
    let mut counted = 0usize;
    let dirs: Vec<[f64; 3]> = NORMAL_DIRECTIONS
        .iter()
        .map(|v| {
            let l = ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) as f64).sqrt();
            [v[0] as f64 / l, v[1] as f64 / l, v[2] as f64 / l]
        })
        .collect();
    for x in 1..nx.saturating_sub(1) {
        for y in 1..ny.saturating_sub(1) {
            for z in 1..nz.saturating_sub(1) {
                if d(x, y, z) >= 0.5 {
                    continue;
                }
                let g = [
                    (d(x + 1, y, z) - d(x - 1, y, z)) as f64,
                    (d(x, y + 1, z) - d(x, y - 1, z)) as f64,
                    (d(x, y, z + 1) - d(x, y, z - 1)) as f64,
                ];
                if g.iter().map(|c| c * c).sum::<f64>() < 1e-12 {
                    continue;
                }
                let mut best = (0, f64::NEG_INFINITY);
                for (k, dir) in dirs.iter().enumerate() {
                    let dot = (g[0] * dir[0] + g[1] * dir[1] + g[2] * dir[2]).abs();
                    if dot > best.1 + 1e-12 {
                        best = (k, dot);
                    }
                }
                normals[best.0] += 1.0;
                counted += 1;
            }
        }
    }
    f.extend(normals.iter().map(|c| if counted > 0 { c / counted as f64 } else { 0.0 }));

    for role in ChannelRole::RGB {
        if let Some(c) = grid.channel_of(role) {
            let vals = grid.channel(c);
            let m = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / vals.len() as f64;
            f.push(m);
            f.push(var.sqrt());
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;

    fn grid(f: impl Fn(usize, usize, usize) -> f32) -> VoxelGrid {
        let spec = GridSpec::new([8, 8, 8], 1.0, [0.5; 3]).unwrap();
        let mut g = VoxelGrid::filled(spec, vec![ChannelRole::Udf], 1.0).unwrap();
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    g.set(x, y, z, 0, f(x, y, z));
                }
            }
        }
        g
    }

    #[test]
    fn empty_grid_has_no_occupancy() {
        let f = featurize(&grid(|_, _, _| 1.0)).unwrap();
        assert_eq!(f.len(), FEATURE_DIM);
        assert!(f[..9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_permutes_normals_only() {
        let shape = |x: usize, y: usize, z: usize| {
            let dx = (x as f32 - 2.0).abs() / 4.0;
            let dz = (z as f32 - 4.5).abs() / 5.0;
            (dx.min(dz) + 0.02 * y as f32).min(1.0)
        };
        let a = grid(shape);
        // 90 degrees about z: (x, y) -> (7 - y, x)
        let b = grid(|x, y, z| shape(y, 7 - x, z));
        let fa = featurize(&a).unwrap();
        let fb = featurize(&b).unwrap();
        assert_eq!(fa[..25], fb[..25]);
        let (na, nb) = (&fa[25..], &fb[25..]);
        assert_ne!(na, nb);
        let rot = |v: [i8; 3]| [-v[1], v[0], v[2]];
        let canon = |v: [i8; 3]| {
            let first = v.iter().find(|&&c| c != 0).copied().unwrap_or(1);
            if first < 0 {
                [-v[0], -v[1], -v[2]]
            } else {
                v
            }
        };
        for (k, dir) in NORMAL_DIRECTIONS.iter().enumerate() {
            let j = NORMAL_DIRECTIONS.iter().position(|&d| d == canon(rot(*dir))).unwrap();
            assert!((na[k] - nb[j]).abs() < 1e-12, "direction {k} -> {j}");
        }
    }
}
