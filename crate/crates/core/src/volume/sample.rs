use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mesh::{TriangleMesh, Vec3};
use crate::error::{Error, Result};

/// Surface samples of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<Vec3>>,
}

impl PointSet {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        let set = PointSet { points, colors: None };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Validation("point set is empty".into()));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point set coordinate".into()));
        }
        if let Some(c) = &self.colors {
            if c.len() != self.points.len() {
                return Err(Error::Validation("one color per point required".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointSet> {
    if mesh.is_empty() {
        return Err(Error::NoGeometry("cannot sample an empty mesh"));
    }
    if n == 0 {
        return Err(Error::param("sample count must be >= 1"));
    }
    mesh.validate()?;
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0f64;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::NoGeometry("mesh has zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut colors = mesh.colors.as_ref().map(|_| Vec::with_capacity(n));
    for _ in 0..n {
        let target = rng.random::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let w = 1.0 - u - v;
        let idx = mesh.triangles[t];
        let [a, b, c] = mesh.corners(t);
        let mix = |a: Vec3, b: Vec3, c: Vec3| -> Vec3 {
            std::array::from_fn(|k| (w * a[k] as f64 + u * b[k] as f64 + v * c[k] as f64) as f32)
        };
        points.push(mix(a, b, c));
        if let (Some(out), Some(src)) = (colors.as_mut(), mesh.colors.as_ref()) {
            out.push(mix(src[idx[0] as usize], src[idx[1] as usize], src[idx[2] as usize]));
        }
    }
    Ok(PointSet { points, colors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_stay_on_single_triangle() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 1.0], [2.0, 0.0, 1.0], [0.0, 3.0, 1.0]],
            triangles: vec![[0, 1, 2]],
            colors: None,
        };
        let ps = sample_surface_points(&mesh, 3, 9).unwrap();
        assert_eq!(ps.len(), 3);
        for p in &ps.points {
            assert_eq!(p[2], 1.0);
            assert!(p[0] >= 0.0 && p[1] >= 0.0);
            assert!(p[0] / 2.0 + p[1] / 3.0 <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn area_weighting_binomial_bound() {
        // Areas 1 and 3.
        let mesh = TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [10.0, 0.0, 0.0],
                [12.0, 0.0, 0.0],
                [10.0, 3.0, 0.0],
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
            colors: None,
        };
        let n = 10_000;
        let ps = sample_surface_points(&mesh, n, 1).unwrap();
        let second = ps.points.iter().filter(|p| p[0] >= 10.0).count() as f64;
        let bound = 3.0 * (n as f64 * 0.75 * 0.25).sqrt();
        assert!((second - 7500.0).abs() <= bound, "{second}");
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let mesh = TriangleMesh::icosphere([0.0; 3], 1.0, 1);
        let a = sample_surface_points(&mesh, 5000, 42).unwrap();
        let b = sample_surface_points(&mesh, 5000, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_surface_points(&mesh, 5000, 43).unwrap());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            sample_surface_points(&TriangleMesh::default(), 5, 0),
            Err(Error::NoGeometry(_))
        ));
        let mesh = TriangleMesh::icosphere([0.0; 3], 1.0, 0);
        assert!(sample_surface_points(&mesh, 0, 0).is_err());
    }
}
