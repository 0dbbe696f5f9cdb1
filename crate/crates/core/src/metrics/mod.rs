//! Set-level evaluation of generated scenes against references.

mod assign;
mod features;
mod kdtree;

pub use assign::{auction, hungarian, AuctionResult};
pub use features::{featurize, FEATURE_DIM, NORMAL_DIRECTIONS};
pub use kdtree::KdTree;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{default_iso, extract_mesh, sample_surface_points, ChannelRole, GridSpec, PointSet, Vec3, VoxelGrid};
use kdtree::dist_sq;

/// Largest point count accepted by exact EMD.
pub const EXACT_EMD_LIMIT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmdMode {
    Exact,
    /// Auction assignment certified within 1% of optimal.
    Approx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetDistance {
    Chamfer,
    Emd(EmdMode),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub points_per_scene: usize,
    pub scenes_per_set: usize,
    pub emd_mode: EmdMode,
    /// Chamfer with squared distances (default) or plain distances.
    pub squared_chamfer: bool,
    pub jsd_dims: [usize; 3],
    /// Normalized distance below which a voxel counts as occupied.
    pub occupancy_threshold: f32,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            points_per_scene: 5000,
            scenes_per_set: 1000,
            emd_mode: EmdMode::Approx,
            squared_chamfer: true,
            jsd_dims: [32, 32, 32],
            occupancy_threshold: 0.5,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_scene == 0 || self.scenes_per_set == 0 {
            return Err(Error::Config("points_per_scene and scenes_per_set must be >= 1".into()));
        }
        if self.emd_mode == EmdMode::Exact && self.points_per_scene > EXACT_EMD_LIMIT {
            return Err(Error::Config(format!(
                "exact EMD is limited to {EXACT_EMD_LIMIT} points per scene"
            )));
        }
        if self.jsd_dims.contains(&0) {
            return Err(Error::Config("jsd grid dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Point set with a prebuilt search tree.
#[derive(Debug, Clone)]
pub struct Cloud {
    pub points: Vec<Vec3>,
    tree: KdTree,
}

impl Cloud {
    pub fn new(set: &PointSet) -> Result<Self> {
        set.validate()?;
        Ok(Cloud {
            tree: KdTree::new(&set.points),
            points: set.points.clone(),
        })
    }
}

fn one_way(a: &Cloud, b: &Cloud, squared: bool) -> f64 {
    let s: f64 = a
        .points
        .iter()
        .map(|&p| {
            let d = b.tree.nearest(p).map_or(0.0, |(d, _)| d);
            if squared {
                d
            } else {
                d.sqrt()
            }
        })
        .sum();
    s / a.points.len() as f64
}

/// Symmetric mean nearest-neighbor distance between two clouds.
pub fn chamfer_clouds(a: &Cloud, b: &Cloud, squared: bool) -> f64 {
    one_way(a, b, squared) + one_way(b, a, squared)
}

/// Chamfer distance with squared Euclidean terms.
pub fn chamfer(a: &PointSet, b: &PointSet) -> Result<f64> {
    Ok(chamfer_clouds(&Cloud::new(a)?, &Cloud::new(b)?, true))
}

fn emd_points(a: &[Vec3], b: &[Vec3], mode: EmdMode) -> Result<f64> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::Validation(format!("EMD needs equal point counts, got {n} and {}", b.len())));
    }
    if n == 0 {
        return Err(Error::Validation("point set is empty".into()));
    }
    let cost: Vec<f64> = a
        .iter()
        .flat_map(|&p| b.iter().map(move |&q| dist_sq(p, q).sqrt()))
        .collect();
    let total = match mode {
        EmdMode::Exact => {
            if n > EXACT_EMD_LIMIT {
                return Err(Error::param(format!(
                    "exact EMD refused for {n} points (limit {EXACT_EMD_LIMIT}); use the approximate mode"
                )));
            }
            let asg = hungarian(&cost, n)?;
            (0..n).map(|i| cost[i * n + asg[i]]).sum::<f64>()
        }
        EmdMode::Approx => auction(&cost, n, 0.01)?.cost,
    };
    Ok(total / n as f64)
}

/// Mean matched Euclidean distance under the optimal bijection.
pub fn emd(a: &PointSet, b: &PointSet, mode: EmdMode) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    emd_points(&a.points, &b.points, mode)
}

/// Distance between two clouds under `d`.
pub fn set_distance(a: &Cloud, b: &Cloud, d: SetDistance, squared_chamfer: bool) -> Result<f64> {
    match d {
        SetDistance::Chamfer => Ok(chamfer_clouds(a, b, squared_chamfer)),
        SetDistance::Emd(mode) => emd_points(&a.points, &b.points, mode),
    }
}

/// Row-major `|a| x |b|` distances.
pub fn distance_matrix(a: &[Cloud], b: &[Cloud], d: SetDistance, squared_chamfer: bool) -> Result<Vec<f64>> {
    (0..a.len() * b.len())
        .into_par_iter()
        .map(|k| set_distance(&a[k / b.len()], &b[k % b.len()], d, squared_chamfer))
        .collect()
}

fn argmin(row: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in row.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|b| b.0)
}

/// Percentage of references that are the nearest reference of some generated sample.
/// `d_gr` is `|G| x |R|`.
pub fn cov(d_gr: &[f64], n_g: usize, n_r: usize) -> Result<f64> {
    check_matrix(d_gr, n_g, n_r)?;
    let mut hit = vec![false; n_r];
    for g in 0..n_g {
        if let Some(r) = argmin(d_gr[g * n_r..(g + 1) * n_r].iter().copied()) {
            hit[r] = true;
        }
    }
    Ok(100.0 * hit.iter().filter(|&&h| h).count() as f64 / n_r as f64)
}

/// Mean over references of the distance to the closest generated sample.
pub fn mmd(d_gr: &[f64], n_g: usize, n_r: usize) -> Result<f64> {
    check_matrix(d_gr, n_g, n_r)?;
    let s: f64 = (0..n_r)
        .map(|r| (0..n_g).map(|g| d_gr[g * n_r + r]).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(s / n_r as f64)
}

/// Leave-one-out 1-nearest-neighbor accuracy (percent) over `G u R`.
/// Ties go to the lowest index in the order `G` then `R`.
pub fn one_nna(d_gg: &[f64], d_rr: &[f64], d_gr: &[f64], n_g: usize, n_r: usize) -> Result<f64> {
    check_matrix(d_gg, n_g, n_g)?;
    check_matrix(d_rr, n_r, n_r)?;
    check_matrix(d_gr, n_g, n_r)?;
    if n_g < 2 || n_r < 2 {
        return Err(Error::param("1-NNA needs at least two samples per set"));
    }
    let n = n_g + n_r;
    let dist = |i: usize, j: usize| -> f64 {
        match (i < n_g, j < n_g) {
            (true, true) => d_gg[i * n_g + j],
            (false, false) => d_rr[(i - n_g) * n_r + j - n_g],
            (true, false) => d_gr[i * n_r + j - n_g],
            (false, true) => d_gr[j * n_r + i - n_g],
        }
    };
    let correct = (0..n)
        .filter(|&i| {
            let nn = argmin((0..n).map(|j| if j == i { f64::INFINITY } else { dist(i, j) })).unwrap();
            (nn < n_g) == (i < n_g)
        })
        .count();
    Ok(100.0 * correct as f64 / n as f64)
}

fn check_matrix(m: &[f64], rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::param("scene sets must be non-empty"));
    }
    if m.len() != rows * cols {
        return Err(Error::shape(format!("distance matrix must be {rows}x{cols}")));
    }
    Ok(())
}

/// Per-voxel occupancy counts of a set of grids on a shared grid.
pub fn occupancy_counts(grids: &[VoxelGrid], threshold: f32) -> Result<Vec<f64>> {
    let first = grids.first().ok_or_else(|| Error::param("no grids given"))?;
    let dims = first.dims();
    let mut counts = vec![0.0f64; first.spec.voxel_count()];
    for g in grids {
        if g.dims() != dims {
            return Err(Error::shape(format!(
                "grid dims {:?} differ from the shared grid {dims:?}; resample first",
                g.dims()
            )));
        }
        let u = g
            .channel_of(ChannelRole::Udf)
            .ok_or_else(|| Error::Validation("grid has no distance channel".into()))?;
        let c = g.channels();
        for (k, v) in g.data.chunks_exact(c).enumerate() {
            if v[u] < threshold {
                counts[k] += 1.0;
            }
        }
    }
    Ok(counts)
}

/// Jensen-Shannon divergence (base 2) of two count vectors after normalizing each to sum 1.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("distributions differ in length"));
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if !(sp > 0.0) || !(sq > 0.0) {
        return Err(Error::Validation("occupancy distribution is empty".into()));
    }
    if p.iter().chain(q).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Validation("counts must be finite and non-negative".into()));
    }
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        s += 0.5 * kl(a, m) + 0.5 * kl(b, m);
    }
    Ok(s.clamp(0.0, 1.0))
}

/// JSD between the occupancy distributions of two grid sets.
pub fn jsd_grids(g: &[VoxelGrid], r: &[VoxelGrid], threshold: f32) -> Result<f64> {
    jsd(&occupancy_counts(g, threshold)?, &occupancy_counts(r, threshold)?)
}

fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::param("need at least two embeddings per set"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("embeddings must share one positive dimension"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-8 * scale {
            return Err(Error::Numerical(format!("matrix is not positive semidefinite (eigenvalue {v})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Frechet distance between Gaussians fitted to two embedding sets.
pub fn frechet_distance(g: &[Vec<f64>], r: &[Vec<f64>]) -> Result<f64> {
    let (mg, sg) = moments(g)?;
    let (mr, sr) = moments(r)?;
    if mg.len() != mr.len() {
        return Err(Error::shape("embedding sets differ in dimension"));
    }
    frechet_from_moments(&mg, &sg, &mr, &sr)
}

/// `|mu_g - mu_r|^2 + tr(S_g + S_r - 2 (S_g S_r)^(1/2))`.
pub fn frechet_from_moments(
    mg: &DVector<f64>,
    sg: &DMatrix<f64>,
    mr: &DVector<f64>,
    sr: &DMatrix<f64>,
) -> Result<f64> {
    let root_g = psd_sqrt(sg)?;
    let cross = psd_sqrt(&(&root_g * sr * &root_g))?;
    let fd = (mg - mr).norm_squared() + sg.trace() + sr.trace() - 2.0 * cross.trace();
    Ok(fd.max(0.0))
}

/// One line of evaluation results.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub cov_cd: f64,
    pub cov_emd: f64,
    pub mmd_cd: f64,
    pub mmd_emd: f64,
    pub nna_cd: f64,
    pub nna_emd: f64,
    pub jsd: f64,
    pub fd: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "cov_cd,cov_emd,mmd_cd,mmd_emd,nna_cd,nna_emd,jsd,fd";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.cov_cd, self.cov_emd, self.mmd_cd, self.mmd_emd, self.nna_cd, self.nna_emd, self.jsd, self.fd
        )
    }
}

/// A scene as seen by the metrics.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub points: PointSet,
    /// Grid already on the shared occupancy resolution.
    pub grid: VoxelGrid,
}

/// Voxel range of `src` cells feeding output cell `i` of `dst`.
fn pool_range(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let lo = i * src / dst;
    let hi = ((i + 1) * src).div_ceil(dst).max(lo + 1);
    (lo, hi.min(src))
}

/// `grid` pooled onto `dims` cells over the same box: minimum distance and mean color.
pub fn pool_to(grid: &VoxelGrid, dims: [usize; 3]) -> Result<VoxelGrid> {
    let src = grid.dims();
    if src == dims {
        return Ok(grid.clone());
    }
    let min = grid.spec.world_min();
    let max = grid.spec.world_max();
    let s = (0..3).map(|a| (max[a] - min[a]) / dims[a] as f32).fold(0.0f32, f32::max);
    let spec = GridSpec::covering(min, dims, s)?;
    let c = grid.channels();
    let mut out = VoxelGrid::zeros(spec, grid.roles.clone())?;
    for x in 0..dims[0] {
        let rx = pool_range(x, src[0], dims[0]);
        for y in 0..dims[1] {
            let ry = pool_range(y, src[1], dims[1]);
            for z in 0..dims[2] {
                let rz = pool_range(z, src[2], dims[2]);
                let n = ((rx.1 - rx.0) * (ry.1 - ry.0) * (rz.1 - rz.0)) as f32;
                for ch in 0..c {
                    let udf = grid.roles[ch] == ChannelRole::Udf;
                    let mut acc = if udf { f32::INFINITY } else { 0.0 };
                    for i in rx.0..rx.1 {
                        for j in ry.0..ry.1 {
                            for k in rz.0..rz.1 {
                                let v = grid.get(i, j, k, ch);
                                acc = if udf { acc.min(v) } else { acc + v };
                            }
                        }
                    }
                    out.set(x, y, z, ch, if udf { acc } else { acc / n });
                }
            }
        }
    }
    Ok(out)
}

/// Metric view of one generated or reference volume: surface points from the
/// half-voxel iso-surface and the grid pooled to the occupancy resolution.
/// A volume without any surface is represented by copies of its center point;
/// the flag reports that case.
pub fn scene_sample(grid: &VoxelGrid, truncation: f32, cfg: &MetricConfig, seed: u64) -> Result<(SceneSample, bool)> {
    let u = grid
        .channel_of(ChannelRole::Udf)
        .ok_or_else(|| Error::Validation("grid has no distance channel".into()))?;
    let iso = default_iso(grid.spec.voxel_size, truncation);
    let ex = extract_mesh(&grid.select_channels(&[u])?, iso)?;
    let (points, empty) = if ex.is_empty() {
        let (lo, hi) = (grid.spec.world_min(), grid.spec.world_max());
        let c = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
        (PointSet::new(vec![c; cfg.points_per_scene])?, true)
    } else {
        (sample_surface_points(&ex.mesh, cfg.points_per_scene, seed)?, false)
    };
    let pooled = pool_to(grid, cfg.jsd_dims)?;
    Ok((SceneSample { points, grid: pooled }, empty))
}

/// Full battery on two scene sets.
pub fn evaluate(g: &[SceneSample], r: &[SceneSample], cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if g.len() < 2 || r.len() < 2 {
        return Err(Error::param("each scene set needs at least two scenes"));
    }
    let cg: Vec<Cloud> = g.iter().map(|s| Cloud::new(&s.points)).collect::<Result<_>>()?;
    let cr: Vec<Cloud> = r.iter().map(|s| Cloud::new(&s.points)).collect::<Result<_>>()?;
    let (ng, nr) = (cg.len(), cr.len());
    let mut rep = MetricReport::default();
    for d in [SetDistance::Chamfer, SetDistance::Emd(cfg.emd_mode)] {
        let gr = distance_matrix(&cg, &cr, d, cfg.squared_chamfer)?;
        let gg = distance_matrix(&cg, &cg, d, cfg.squared_chamfer)?;
        let rr = distance_matrix(&cr, &cr, d, cfg.squared_chamfer)?;
        let (c, m, n) = (cov(&gr, ng, nr)?, mmd(&gr, ng, nr)?, one_nna(&gg, &rr, &gr, ng, nr)?);
        if d == SetDistance::Chamfer {
            (rep.cov_cd, rep.mmd_cd, rep.nna_cd) = (c, m, n);
        } else {
            (rep.cov_emd, rep.mmd_emd, rep.nna_emd) = (c, m, n);
        }
    }
    let gg: Vec<VoxelGrid> = g.iter().map(|s| s.grid.clone()).collect();
    let rg: Vec<VoxelGrid> = r.iter().map(|s| s.grid.clone()).collect();
    rep.jsd = jsd_grids(&gg, &rg, cfg.occupancy_threshold)?;
    let fg: Vec<Vec<f64>> = gg.iter().map(featurize).collect::<Result<_>>()?;
    let fr: Vec<Vec<f64>> = rg.iter().map(featurize).collect::<Result<_>>()?;
    rep.fd = frechet_distance(&fg, &fr)?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[Vec3]) -> PointSet {
        PointSet::new(points.to_vec()).unwrap()
    }

    #[test]
    fn pooling_takes_min_distance_and_mean_color() {
        let spec = GridSpec::new([4, 4, 4], 1.0, [0.5; 3]).unwrap();
        let mut g = VoxelGrid::filled(spec, vec![ChannelRole::Udf, ChannelRole::Red], 1.0).unwrap();
        g.set(1, 0, 0, 0, 0.25);
        g.set(0, 0, 0, 1, 0.0);
        let p = pool_to(&g, [2, 2, 2]).unwrap();
        assert_eq!(p.spec.voxel_size, 2.0);
        assert_eq!(p.spec.world_min(), [0.0; 3]);
        assert_eq!(p.get(0, 0, 0, 0), 0.25);
        assert_eq!(p.get(0, 0, 0, 1), 7.0 / 8.0);
        assert_eq!(p.get(1, 1, 1, 0), 1.0);
        assert_eq!(pool_to(&g, [4, 4, 4]).unwrap(), g);
        let up = pool_to(&g, [8, 8, 8]).unwrap();
        assert_eq!(up.get(2, 0, 1, 0), 0.25);
    }

    #[test]
    fn chamfer_and_emd_examples() {
        let a = set(&[[0.0, 0.0, 0.0]]);
        let b = set(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let a = set(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = set(&[[0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        assert_eq!(emd(&a, &b, EmdMode::Exact).unwrap(), 1.0);
        assert_eq!(emd(&a, &a, EmdMode::Exact).unwrap(), 0.0);
        assert!(emd(&a, &set(&[[0.0; 3]]), EmdMode::Exact).is_err());
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        let hand = 0.5 * (1.0f64 / 0.75).log2() + 0.5 * (0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2());
        assert!((jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - hand).abs() < 1e-12);
        // KL(P||M) = log2(4/3) and KL(Q||M) = 0.5 log2(2/3) + 0.5, both about 0.415 / 0.2075
        assert!((hand - 0.3113).abs() < 1e-4);
        assert!(jsd(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn frechet_examples() {
        let mg = DVector::from_vec(vec![0.0]);
        let mr = DVector::from_vec(vec![3.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!((frechet_from_moments(&mg, &one, &mr, &one).unwrap() - 9.0).abs() < 1e-12);
        let z = DVector::zeros(2);
        let i = DMatrix::identity(2, 2);
        let four = DMatrix::identity(2, 2) * 4.0;
        assert!((frechet_from_moments(&z, &i, &z, &four).unwrap() - 2.0).abs() < 1e-12);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(frechet_from_moments(&z, &bad, &z, &i), Err(Error::Numerical(_))));
    }

    #[test]
    fn set_metric_examples() {
        // three references, one generated sample nearest to r1
        let d = [5.0, 1.0, 3.0];
        assert!((cov(&d, 1, 3).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(mmd(&[2.5], 1, 1).unwrap(), 2.5);
        // G and R duplicates: each sample's twin sits in the other set
        let gg = [0.0, 4.0, 4.0, 0.0];
        let gr = [0.0, 4.0, 4.0, 0.0];
        assert_eq!(one_nna(&gg, &gg, &gr, 2, 2).unwrap(), 0.0);
        let far = [100.0; 4];
        let near = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(one_nna(&near, &near, &far, 2, 2).unwrap(), 100.0);
    }
}
