use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type Vec3 = [f32; 3];

/// Indexed triangle soup in world coordinates (meters).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Optional per-vertex RGB in `[0, 1]`, exported with OBJ.
    pub colors: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Validation(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if let Some(c) = &self.colors {
            if c.len() != self.vertices.len() {
                return Err(Error::Validation("one color per vertex required".into()));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        triangle_area(a, b, c)
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Appends another mesh, re-indexing its triangles.
    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        self.colors = None;
    }

    /// Number of mesh edges not shared by exactly two triangles.
    pub fn open_edge_count(&self) -> usize {
        let mut edges: Vec<(u32, u32)> = self
            .triangles
            .iter()
            .flat_map(|t| {
                [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
                    .into_iter()
                    .map(|(a, b)| (a.min(b), a.max(b)))
            })
            .collect();
        edges.sort_unstable();
        let mut bad = 0;
        let mut i = 0;
        while i < edges.len() {
            let mut j = i;
            while j < edges.len() && edges[j] == edges[i] {
                j += 1;
            }
            if j - i != 2 {
                bad += 1;
            }
            i = j;
        }
        bad
    }

    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.open_edge_count() == 0
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::with_capacity(self.vertices.len() * 32 + self.triangles.len() * 24);
        for (i, v) in self.vertices.iter().enumerate() {
            match &self.colors {
                Some(c) => {
                    let c = c[i];
                    let _ = writeln!(out, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]);
                }
                None => {
                    let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
                }
            }
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    /// Reads the `v` and `f` records of an OBJ file; polygons are fanned.
    pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_obj(&text)
    }

    /// Axis-aligned box with outward-facing triangles.
    pub fn cuboid(min: Vec3, max: Vec3) -> TriangleMesh {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            vertices.push([
                if i & 1 == 0 { min[0] } else { max[0] },
                if i & 2 == 0 { min[1] } else { max[1] },
                if i & 4 == 0 { min[2] } else { max[2] },
            ]);
        }
        let quads: [[u32; 4]; 6] = [
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
        ];
        let triangles = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        TriangleMesh {
            vertices,
            triangles,
            colors: None,
        }
    }

    /// Horizontal rectangle at height `z`, facing +z.
    pub fn quad_z(min: [f32; 2], max: [f32; 2], z: f32) -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                [min[0], min[1], z],
                [max[0], min[1], z],
                [max[0], max[1], z],
                [min[0], max[1], z],
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            colors: None,
        }
    }

    /// Subdivided icosahedron with vertices on the sphere.
    pub fn icosphere(center: Vec3, radius: f32, subdivisions: u32) -> TriangleMesh {
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        let mut verts: Vec<[f64; 3]> = vec![
            [-1.0, p, 0.0],
            [1.0, p, 0.0],
            [-1.0, -p, 0.0],
            [1.0, -p, 0.0],
            [0.0, -1.0, p],
            [0.0, 1.0, p],
            [0.0, -1.0, -p],
            [0.0, 1.0, -p],
            [p, 0.0, -1.0],
            [p, 0.0, 1.0],
            [-p, 0.0, -1.0],
            [-p, 0.0, 1.0],
        ];
        let mut faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        let normalize = |v: [f64; 3]| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        for v in verts.iter_mut() {
            *v = normalize(*v);
        }
        for _ in 0..subdivisions {
            let mut midpoints = std::collections::HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut mid = |a: u32, b: u32, verts: &mut Vec<[f64; 3]>| -> u32 {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let (va, vb) = (verts[a as usize], verts[b as usize]);
                    verts.push(normalize([
                        (va[0] + vb[0]) * 0.5,
                        (va[1] + vb[1]) * 0.5,
                        (va[2] + vb[2]) * 0.5,
                    ]));
                    verts.len() as u32 - 1
                })
            };
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut verts);
                let bc = mid(b, c, &mut verts);
                let ca = mid(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        let r = radius as f64;
        TriangleMesh {
            vertices: verts
                .iter()
                .map(|v| {
                    [
                        (center[0] as f64 + r * v[0]) as f32,
                        (center[1] as f64 + r * v[1]) as f32,
                        (center[2] as f64 + r * v[2]) as f32,
                    ]
                })
                .collect(),
            triangles: faces,
            colors: None,
        }
    }
}

fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    let mut colors = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let bad = |m: &str| Error::Parse {
            line: lineno + 1,
            message: m.to_string(),
        };
        match parts.next() {
            Some("v") => {
                let vals: Vec<f32> = parts
                    .map(|p| p.parse::<f32>().map_err(|_| bad("bad vertex coordinate")))
                    .collect::<Result<_>>()?;
                if vals.len() < 3 {
                    return Err(bad("vertex needs 3 coordinates"));
                }
                mesh.vertices.push([vals[0], vals[1], vals[2]]);
                if vals.len() >= 6 {
                    colors.push([vals[3], vals[4], vals[5]]);
                }
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|p| {
                        p.split('/')
                            .next()
                            .and_then(|s| s.parse::<u32>().ok())
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| bad("bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if !colors.is_empty() && colors.len() == mesh.vertices.len() {
        mesh.colors = Some(colors);
    }
    mesh.validate()?;
    Ok(mesh)
}

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> [f64; 3] {
    [
        a[0] as f64 - b[0] as f64,
        a[1] as f64 - b[1] as f64,
        a[2] as f64 - b[2] as f64,
    ]
}

#[inline]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let n = cross(sub(b, a), sub(c, a));
    0.5 * dot(n, n).sqrt()
}

/// Squared distance from `p` to the closest point of triangle `abc`.
pub fn point_triangle_distance_sq(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let d = |u: [f64; 3], v: [f64; 3]| [u[0] - v[0], u[1] - v[1], u[2] - v[2]];
    let ab = d(b, a);
    let ac = d(c, a);
    let ap = d(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    let closest = if d1 <= 0.0 && d2 <= 0.0 {
        a
    } else {
        let bp = d(p, b);
        let d3 = dot(ab, bp);
        let d4 = dot(ac, bp);
        let vc = d1 * d4 - d3 * d2;
        let cp = d(p, c);
        let d5 = dot(ab, cp);
        let d6 = dot(ac, cp);
        let vb = d5 * d2 - d1 * d6;
        let va = d3 * d6 - d5 * d4;
        let lerp = |o: [f64; 3], dir: [f64; 3], t: f64| {
            [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]]
        };
        if d3 >= 0.0 && d4 <= d3 {
            b
        } else if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
            lerp(a, ab, d1 / (d1 - d3))
        } else if d6 >= 0.0 && d5 <= d6 {
            c
        } else if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
            lerp(a, ac, d2 / (d2 - d6))
        } else if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
            lerp(b, d(c, b), (d4 - d3) / ((d4 - d3) + (d5 - d6)))
        } else {
            let denom = va + vb + vc;
            if denom.abs() < f64::MIN_POSITIVE {
                // Degenerate triangle: fall back to its edges.
                let seg = |s: [f64; 3], e: [f64; 3]| {
                    let se = d(e, s);
                    let len = dot(se, se);
                    let t = if len > 0.0 { (dot(d(p, s), se) / len).clamp(0.0, 1.0) } else { 0.0 };
                    let q = lerp(s, se, t);
                    let w = d(p, q);
                    dot(w, w)
                };
                return seg(a, b).min(seg(b, c)).min(seg(c, a));
            }
            let v = vb / denom;
            let w = vc / denom;
            [
                a[0] + ab[0] * v + ac[0] * w,
                a[1] + ab[1] * v + ac[1] * w,
                a[2] + ab[2] * v + ac[2] * w,
            ]
        }
    };
    let w = d(p, closest);
    dot(w, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cuboid_is_closed_with_expected_area() {
        let m = TriangleMesh::cuboid([0.0; 3], [1.0, 2.0, 3.0]);
        assert!(m.is_watertight());
        assert!((m.area() - 2.0 * (2.0 + 3.0 + 6.0)).abs() < 1e-9);
    }

    #[test]
    fn cuboid_faces_point_outward() {
        let m = TriangleMesh::cuboid([0.0; 3], [1.0; 3]);
        for t in 0..m.triangles.len() {
            let [a, b, c] = m.corners(t);
            let n = cross(sub(b, a), sub(c, a));
            let centroid = [
                (a[0] + b[0] + c[0]) as f64 / 3.0 - 0.5,
                (a[1] + b[1] + c[1]) as f64 / 3.0 - 0.5,
                (a[2] + b[2] + c[2]) as f64 / 3.0 - 0.5,
            ];
            assert!(dot(n, centroid) > 0.0, "triangle {t} faces inward");
        }
    }

    #[test]
    fn icosphere_counts() {
        let m = TriangleMesh::icosphere([0.0; 3], 1.0, 3);
        assert_eq!(m.triangles.len(), 20 * 64);
        assert!(m.is_watertight());
        for v in &m.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn point_triangle_regions() {
        let a = [0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0];
        let c = [0.0, 1.0, 0.0];
        let dist = |p| point_triangle_distance_sq(p, a, b, c).sqrt();
        assert!((dist([0.2, 0.2, 0.5]) - 0.5).abs() < 1e-12);
        assert!((dist([-1.0, -1.0, 0.0]) - 2f64.sqrt()).abs() < 1e-12);
        assert!((dist([0.5, -2.0, 0.0]) - 2.0).abs() < 1e-12);
        assert!((dist([1.0, 1.0, 0.0]) - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((dist([3.0, 0.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn obj_roundtrip_keeps_topology() {
        let mut m = TriangleMesh::cuboid([0.0; 3], [1.0; 3]);
        m.colors = Some(vec![[0.5, 0.25, 1.0]; 8]);
        let back = parse_obj(&m.to_obj()).unwrap();
        assert_eq!(back, m);
    }
}
