//! Iso-surface extraction from unsigned distance volumes.
//!
//! Marching cubes whose case table is derived at startup from the cube's
//! face configurations: every face resolves its ambiguous (checkerboard)
//! case by cutting off each outside corner separately, which keeps the
//! inside corners connected. Thin bands `{D < iso}` of about one voxel stay
//! in one piece this way instead of fragmenting. Neighbouring cells
//! therefore agree on every shared face, and since vertices are welded per
//! grid edge the result is closed wherever the level set stays inside
//! the grid.

use std::sync::OnceLock;

use super::grid::{ChannelRole, VoxelGrid};
use super::mesh::{triangle_area, TriangleMesh, Vec3};
use crate::error::{Error, Result};

/// Corner `c` of the unit cell sits at `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The twelve cell edges as `(low corner, axis)`, low corner having bit `axis` clear.
fn cell_edges() -> [(usize, usize); 12] {
    let mut edges = [(0, 0); 12];
    let mut k = 0;
    for axis in 0..3 {
        for c in 0..8 {
            if c & (1 << axis) == 0 {
                edges[k] = (c, axis);
                k += 1;
            }
        }
    }
    edges
}

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as usize;
    cell_edges()
        .iter()
        .position(|&e| e == (lo, axis))
        .expect("corners must share an edge")
}

fn edge_midpoint(e: usize) -> [f64; 3] {
    let (c, axis) = cell_edges()[e];
    let o = corner_offset(c);
    let mut p = [o[0] as f64, o[1] as f64, o[2] as f64];
    p[axis] += 0.5;
    p
}

fn build_case(mask: u8) -> Vec<Vec<u8>> {
    let inside = |c: usize| mask & (1 << c) != 0;
    // next[e] = the edge that follows e along its oriented loop.
    let mut next: [Option<usize>; 12] = [None; 12];
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let base = side << axis;
            let cyc = [base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)];
            let mut normal = [0.0f64; 3];
            normal[axis] = if side == 1 { 1.0 } else { -1.0 };
            let crossing: Vec<usize> = (0..4).filter(|&j| inside(cyc[j]) != inside(cyc[(j + 1) % 4])).collect();
            let mut segments: Vec<(usize, usize, [f64; 3])> = Vec::new();
            match crossing.len() {
                0 => {}
                2 => {
                    let ea = edge_between(cyc[crossing[0]], cyc[(crossing[0] + 1) % 4]);
                    let eb = edge_between(cyc[crossing[1]], cyc[(crossing[1] + 1) % 4]);
                    let ins: Vec<usize> = cyc.iter().copied().filter(|&c| inside(c)).collect();
                    let mut p = [0.0; 3];
                    for &c in &ins {
                        let o = corner_offset(c);
                        for a in 0..3 {
                            p[a] += o[a] as f64 / ins.len() as f64;
                        }
                    }
                    segments.push((ea, eb, p));
                }
                4 => {
                    // Cut around each outside corner; the face center is inside.
                    for j in 0..4 {
                        if !inside(cyc[j]) {
                            let prev = edge_between(cyc[(j + 3) % 4], cyc[j]);
                            let here = edge_between(cyc[j], cyc[(j + 1) % 4]);
                            let mut center = [0.5f64; 3];
                            center[axis] = side as f64;
                            segments.push((prev, here, center));
                        }
                    }
                }
                _ => unreachable!("a square has an even number of sign changes"),
            }
            for (ea, eb, p) in segments {
                let a = edge_midpoint(ea);
                let b = edge_midpoint(eb);
                let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let w = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                let cr = [
                    d[1] * w[2] - d[2] * w[1],
                    d[2] * w[0] - d[0] * w[2],
                    d[0] * w[1] - d[1] * w[0],
                ];
                let side_sign = cr[0] * normal[0] + cr[1] * normal[1] + cr[2] * normal[2];
                // Inside region kept on the right when seen from outside the cell.
                let (from, to) = if side_sign < 0.0 { (ea, eb) } else { (eb, ea) };
                debug_assert!(next[from].is_none());
                next[from] = Some(to);
            }
        }
    }
    let mut loops = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12 {
        if seen[start] || next[start].is_none() {
            continue;
        }
        let mut ring = vec![start];
        seen[start] = true;
        let mut e = next[start].expect("loop edge");
        while e != start {
            seen[e] = true;
            ring.push(e);
            e = next[e].expect("loops close");
        }
        loops.push(ring.into_iter().map(|e| e as u8).collect());
    }
    loops
}

/// Oriented edge loops per case. Loops longer than three are fanned around
/// an added centroid vertex so no diagonal is shared with a neighbour cell.
fn case_table() -> &'static Vec<Vec<Vec<u8>>> {
    static TABLE: OnceLock<Vec<Vec<Vec<u8>>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(build_case).collect())
}

/// Result of an extraction; `crossing_cells == 0` flags an empty level set.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub mesh: TriangleMesh,
    pub crossing_cells: usize,
}

impl Extraction {
    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }
}

/// Linear position of the level crossing along the grid edge from `a` to `a + e_axis`.
fn edge_crossing(grid: &VoxelGrid, udf: usize, a: [usize; 3], axis: usize, iso: f32) -> f32 {
    let mut b = a;
    b[axis] += 1;
    let va = grid.get(a[0], a[1], a[2], udf);
    let vb = grid.get(b[0], b[1], b[2], udf);
    ((iso - va) / (vb - va)).clamp(1e-4, 1.0 - 1e-4)
}

/// Default extraction level: half a voxel, in normalized distance units.
pub fn default_iso(voxel_size: f32, truncation: f32) -> f32 {
    0.5 * voxel_size / truncation
}

/// Triangulates `{D = iso}` of the grid's distance channel.
pub fn extract_mesh(grid: &VoxelGrid, iso: f32) -> Result<Extraction> {
    let udf = grid
        .channel_of(ChannelRole::Udf)
        .ok_or_else(|| Error::Validation("grid has no distance channel".into()))?;
    if !(iso > 0.0 && iso < 1.0) {
        return Err(Error::param(format!("iso level must lie in (0, 1), got {iso}")));
    }
    let rgb: Option<[usize; 3]> = match (
        grid.channel_of(ChannelRole::Red),
        grid.channel_of(ChannelRole::Green),
        grid.channel_of(ChannelRole::Blue),
    ) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let table = case_table();
    let edges = cell_edges();
    let [nx, ny, nz] = grid.dims();
    let nvox = grid.spec.voxel_count();
    let mut edge_vertex = vec![u32::MAX; nvox * 3];
    let mut mesh = TriangleMesh::default();
    let mut colors: Vec<Vec3> = Vec::new();
    let mut crossing_cells = 0;
    let value = |x: usize, y: usize, z: usize| grid.get(x, y, z, udf);

    for x in 0..nx.saturating_sub(1) {
        for y in 0..ny.saturating_sub(1) {
            for z in 0..nz.saturating_sub(1) {
                let mut mask = 0u8;
                for c in 0..8 {
                    let o = corner_offset(c);
                    if value(x + o[0], y + o[1], z + o[2]) < iso {
                        mask |= 1 << c;
                    }
                }
                if mask == 0 || mask == 255 {
                    continue;
                }
                crossing_cells += 1;
                for ring in &table[mask as usize] {
                    let mut ids = Vec::with_capacity(ring.len());
                    for &e in ring {
                        let (c, axis) = edges[e as usize];
                        let o = corner_offset(c);
                        let (ax, ay, az) = (x + o[0], y + o[1], z + o[2]);
                        let slot = grid.voxel_index(ax, ay, az) * 3 + axis;
                        if edge_vertex[slot] == u32::MAX {
                            let mut b = [ax, ay, az];
                            b[axis] += 1;
                            let t = edge_crossing(grid, udf, [ax, ay, az], axis, iso);
                            let pa = grid.spec.center(ax, ay, az);
                            let pb = grid.spec.center(b[0], b[1], b[2]);
                            mesh.vertices.push(std::array::from_fn(|k| pa[k] + t * (pb[k] - pa[k])));
                            if let Some(ch) = rgb {
                                colors.push(ch.map(|c| {
                                    let ca = grid.get(ax, ay, az, c);
                                    let cb = grid.get(b[0], b[1], b[2], c);
                                    (ca + t * (cb - ca)).clamp(0.0, 1.0)
                                }));
                            }
                            edge_vertex[slot] = mesh.vertices.len() as u32 - 1;
                        }
                        ids.push(edge_vertex[slot]);
                    }
                    let emit = |tri: [u32; 3], mesh: &mut TriangleMesh| {
                        let [a, b, c] = tri.map(|i| mesh.vertices[i as usize]);
                        if triangle_area(a, b, c) > 0.0 {
                            mesh.triangles.push(tri);
                        }
                    };
                    if ids.len() == 3 {
                        emit([ids[0], ids[1], ids[2]], &mut mesh);
                        continue;
                    }
                    let n = ids.len() as f32;
                    let centroid: Vec3 = std::array::from_fn(|k| {
                        ids.iter().map(|&i| mesh.vertices[i as usize][k]).sum::<f32>() / n
                    });
                    if rgb.is_some() {
                        let c: Vec3 = std::array::from_fn(|k| {
                            ids.iter().map(|&i| colors[i as usize][k]).sum::<f32>() / n
                        });
                        colors.push(c);
                    }
                    mesh.vertices.push(centroid);
                    let center = mesh.vertices.len() as u32 - 1;
                    for k in 0..ids.len() {
                        emit([center, ids[k], ids[(k + 1) % ids.len()]], &mut mesh);
                    }
                }
            }
        }
    }
    if rgb.is_some() {
        mesh.colors = Some(colors);
    }
    Ok(Extraction {
        mesh,
        crossing_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::distance::{analytic_udf, truncate_normalize, Primitive};
    use crate::volume::grid::GridSpec;

    #[test]
    fn every_case_forms_closed_loops() {
        let table = case_table();
        assert!(table[0].is_empty() && table[255].is_empty());
        for mask in 1..255usize {
            assert!(!table[mask].is_empty(), "case {mask} produced no triangles");
            // Each crossing edge appears in exactly one loop.
            let mut all: Vec<u8> = table[mask].iter().flatten().copied().collect();
            let n = all.len();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), n);
            assert!(table[mask].iter().all(|l| l.len() >= 3));
        }
        // Complementary cases cover the same edges.
        for mask in 1..255usize {
            let edges = |m: usize| {
                let mut e: Vec<u8> = table[m].iter().flatten().copied().collect();
                e.sort();
                e.dedup();
                e
            };
            assert_eq!(edges(mask), edges(255 - mask));
        }
    }

    #[test]
    fn single_corner_normal_points_away_from_inside() {
        let t = &case_table()[1];
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 3);
        let p: Vec<[f64; 3]> = t[0].iter().map(|&e| edge_midpoint(e as usize)).collect();
        let u = [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]];
        let v = [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]];
        let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        assert!(n[0] > 0.0 && n[1] > 0.0 && n[2] > 0.0);
    }

    #[test]
    fn constant_grid_is_empty() {
        let spec = GridSpec::new([4, 4, 4], 1.0, [0.0; 3]).unwrap();
        let g = VoxelGrid::filled(spec, vec![ChannelRole::Udf], 1.0).unwrap();
        let e = extract_mesh(&g, 0.25).unwrap();
        assert!(e.is_empty());
        assert_eq!(e.crossing_cells, 0);
    }

    #[test]
    fn isolated_minimum_is_closed() {
        let spec = GridSpec::new([3, 3, 3], 1.0, [0.0; 3]).unwrap();
        let mut g = VoxelGrid::filled(spec, vec![ChannelRole::Udf], 1.0).unwrap();
        g.set(1, 1, 1, 0, 0.0);
        let e = extract_mesh(&g, 0.5).unwrap();
        assert!(!e.is_empty());
        assert!(e.mesh.is_watertight());
    }

    #[test]
    fn rejects_bad_iso() {
        let spec = GridSpec::new([2, 2, 2], 1.0, [0.0; 3]).unwrap();
        let g = VoxelGrid::filled(spec, vec![ChannelRole::Udf], 1.0).unwrap();
        assert!(extract_mesh(&g, 0.0).is_err());
        assert!(extract_mesh(&g, 1.0).is_err());
    }

    #[test]
    fn sphere_shell_area() {
        let (s, tau) = (0.05f32, 0.2f32);
        let spec = GridSpec::covering([-1.413, -1.391, -1.4071], [57; 3], s).unwrap();
        let udf = analytic_udf(
            &[Primitive::Sphere {
                center: [0.0; 3],
                radius: 1.0,
            }],
            spec,
        )
        .unwrap();
        let g = truncate_normalize(&udf, tau).unwrap();
        let e = extract_mesh(&g, 0.125).unwrap();
        assert!(e.mesh.is_watertight());
        let expected = 2.0 * 4.0 * std::f64::consts::PI;
        let area = e.mesh.area();
        assert!((area - expected).abs() / expected < 0.05, "area {area} vs {expected}");
        for v in &e.mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 1.0).abs() < 0.025 + 0.02, "radius {r}");
        }
    }
}
