//! Unbounded generation by jointly integrating overlapping chunks.

mod device;

pub use device::{
    current_bytes, estimate_forward_bytes, peak_bytes, reset_peak, tracking_enabled, DeviceStats, StagedDevice,
    TrackingAllocator,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{integrate, layout_channels_for, level_source, refine_spec, LevelModel, SceneCondition};
use crate::layout::{crop_layout, line_thickness, voxelize_layout, VectorLayout, WorldBox};
use crate::volume::{GridSpec, VoxelGrid};

/// Chunk origins along one axis of length `n`: a regular lattice with stride
/// `chunk - overlap`, the last origin clamped so that chunk ends flush.
pub fn axis_origins(n: usize, chunk: usize, overlap: usize) -> Result<Vec<usize>> {
    if chunk == 0 || chunk > n {
        return Err(Error::param(format!("chunk size {chunk} cannot tile an axis of {n} voxels")));
    }
    if overlap >= chunk {
        return Err(Error::param(format!("overlap {overlap} must be below the chunk size {chunk}")));
    }
    let stride = chunk - overlap;
    let mut out = vec![0];
    let mut o = 0;
    while o + chunk < n {
        o = (o + stride).min(n - chunk);
        out.push(o);
    }
    Ok(out)
}

/// Voxel box of one chunk within the global grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub id: usize,
    pub offset: [usize; 3],
    pub dims: [usize; 3],
    /// Per-axis feather weights; the chunk weight is their product.
    pub axis_weights: [Vec<f32>; 3],
    /// Global layout cropped to the chunk's (dilated) world box.
    pub layout: Option<VectorLayout>,
}

impl Chunk {
    pub fn weight(&self, x: usize, y: usize, z: usize) -> f32 {
        self.axis_weights[0][x] * self.axis_weights[1][y] * self.axis_weights[2][z]
    }

    /// Dense weight grid in x-major order.
    pub fn weights(&self) -> Vec<f32> {
        let [nx, ny, nz] = self.dims;
        let mut w = Vec::with_capacity(nx * ny * nz);
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    w.push(self.weight(x, y, z));
                }
            }
        }
        w
    }
}

/// Chunk boxes covering `global` with the given chunk extent and overlap.
pub fn partition(global: [usize; 3], chunk: [usize; 3], overlap: usize) -> Result<Vec<([usize; 3], [usize; 3])>> {
    let axes: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_origins(global[a], chunk[a], overlap.min(chunk[a] - 1)))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                out.push(([x, y, z], chunk));
            }
        }
    }
    Ok(out)
}

/// Linear ramp from the two ends of an axis of `extent` voxels, clamped to `[gamma_min, 1]`.
/// Ends with `feather = false` stay at 1.
pub fn feather_axis(extent: usize, margin: usize, gamma_min: f32, feather: [bool; 2]) -> Result<Vec<f32>> {
    if 2 * margin > extent {
        return Err(Error::param(format!("margin {margin} exceeds half the extent {extent}")));
    }
    if !(0.0..=1.0).contains(&gamma_min) {
        return Err(Error::param(format!("gamma_min must lie in [0, 1], got {gamma_min}")));
    }
    Ok((0..extent)
        .map(|i| {
            if margin == 0 {
                return 1.0;
            }
            let lo = if feather[0] { i } else { usize::MAX };
            let hi = if feather[1] { extent - 1 - i } else { usize::MAX };
            let d = lo.min(hi);
            if d >= margin {
                1.0
            } else {
                (d as f32 / margin as f32).clamp(gamma_min, 1.0)
            }
        })
        .collect())
}

/// Separable feather weights over a chunk with every face ramped.
pub fn feather_weights(extent: [usize; 3], margin: usize, gamma_min: f32) -> Result<Vec<f32>> {
    let axes: Vec<Vec<f32>> = (0..3)
        .map(|a| feather_axis(extent[a], margin, gamma_min, [true, true]))
        .collect::<Result<_>>()?;
    let mut w = Vec::with_capacity(extent.iter().product());
    for &wx in &axes[0] {
        for &wy in &axes[1] {
            for &wz in &axes[2] {
                w.push(wx * wy * wz);
            }
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkConfig {
    /// Chunk extent in voxels, per axis; clamped to the world extent.
    pub chunk: [usize; 3],
    pub overlap: usize,
    pub margin: usize,
    pub gamma_min: f32,
    /// Chunk forwards run concurrently in waves of this many.
    pub workers: usize,
    /// Generate chunk after chunk and paste instead of averaging velocities.
    pub sequential_outpainting: bool,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            chunk: [64; 3],
            overlap: 16,
            margin: 16,
            gamma_min: 0.01,
            workers: 1,
            sequential_outpainting: false,
        }
    }
}

/// Chunks of one level plus per-voxel coverage counts.
#[derive(Debug, Clone)]
pub struct ChunkPlan {
    pub spec: GridSpec,
    pub chunks: Vec<Chunk>,
    coverage: Vec<u16>,
}

impl ChunkPlan {
    /// Faces lying on the world boundary are not feathered.
    pub fn new(spec: GridSpec, cfg: &ChunkConfig, layout: Option<&VectorLayout>, thickness: usize) -> Result<Self> {
        if cfg.workers == 0 {
            return Err(Error::param("workers must be >= 1"));
        }
        let dims = spec.dims;
        let chunk = [0, 1, 2].map(|a| cfg.chunk[a].min(dims[a]));
        let boxes = partition(dims, chunk, cfg.overlap)?;
        let r = thickness.max(1) as f32 * spec.voxel_size * 0.5;
        let mut chunks = Vec::with_capacity(boxes.len());
        for (id, (offset, cdims)) in boxes.into_iter().enumerate() {
            let axis_weights = [0, 1, 2]
                .map(|a| {
                    let margin = cfg.margin.min(cdims[a] / 2);
                    let faces = [offset[a] > 0, offset[a] + cdims[a] < dims[a]];
                    feather_axis(cdims[a], margin, cfg.gamma_min, faces)
                });
            let [wx, wy, wz] = axis_weights;
            let sub = spec.sub_grid(offset, cdims);
            chunks.push(Chunk {
                id,
                offset,
                dims: cdims,
                axis_weights: [wx?, wy?, wz?],
                layout: layout.map(|l| crop_layout(l, &WorldBox::of_grid(&sub).dilate(r + 1e-3))),
            });
        }
        let mut coverage = vec![0u16; spec.voxel_count()];
        for c in &chunks {
            for x in 0..c.dims[0] {
                for y in 0..c.dims[1] {
                    let base = ((c.offset[0] + x) * dims[1] + c.offset[1] + y) * dims[2] + c.offset[2];
                    for v in &mut coverage[base..base + c.dims[2]] {
                        *v = v.saturating_add(1);
                    }
                }
            }
        }
        Ok(ChunkPlan { spec, chunks, coverage })
    }

    /// Number of chunks containing each voxel.
    pub fn coverage(&self) -> &[u16] {
        &self.coverage
    }
}

/// Feather-weighted average of per-chunk velocities over the whole grid.
///
/// Voxels inside exactly one chunk take that chunk's output unchanged.
pub fn averaged_velocity<F>(plan: &ChunkPlan, x: &VoxelGrid, u: f32, workers: usize, velocity: F) -> Result<VoxelGrid>
where
    F: Fn(&Chunk, &VoxelGrid, f32) -> Result<VoxelGrid> + Sync,
{
    if x.spec.dims != plan.spec.dims {
        return Err(Error::shape("state grid does not match the chunk plan"));
    }
    let c = x.channels();
    let dims = plan.spec.dims;
    let mut out = vec![0.0f32; x.data.len()];
    let mut acc = vec![0.0f64; x.data.len()];
    let mut wsum = vec![0.0f64; plan.coverage.len()];
    for wave in plan.chunks.chunks(workers.max(1)) {
        let results: Vec<VoxelGrid> = wave
            .par_iter()
            .map(|ch| {
                let xc = x.crop(ch.offset, ch.dims)?;
                let v = velocity(ch, &xc, u)?;
                if v.dims() != ch.dims || v.channels() != c {
                    return Err(Error::shape(format!("chunk {} velocity has the wrong shape", ch.id)));
                }
                Ok(v)
            })
            .collect::<Result<_>>()?;
        for (ch, v) in wave.iter().zip(results) {
            for lx in 0..ch.dims[0] {
                for ly in 0..ch.dims[1] {
                    for lz in 0..ch.dims[2] {
                        let g = ((ch.offset[0] + lx) * dims[1] + ch.offset[1] + ly) * dims[2] + ch.offset[2] + lz;
                        let src = &v.data[v.voxel_index(lx, ly, lz) * c..][..c];
                        if plan.coverage[g] == 1 {
                            out[g * c..(g + 1) * c].copy_from_slice(src);
                            continue;
                        }
                        let w = ch.weight(lx, ly, lz) as f64;
                        wsum[g] += w;
                        for (a, &s) in acc[g * c..(g + 1) * c].iter_mut().zip(src) {
                            *a += w * s as f64;
                        }
                    }
                }
            }
        }
    }
    for (g, &n) in plan.coverage.iter().enumerate() {
        match n {
            0 => return Err(Error::Coverage(format!("voxel {g} is not covered by any chunk"))),
            1 => {}
            _ => {
                if !(wsum[g] > 0.0) {
                    return Err(Error::Coverage(format!("voxel {g} has zero total feather weight")));
                }
                for k in 0..c {
                    out[g * c + k] = (acc[g * c + k] / wsum[g]) as f32;
                }
            }
        }
    }
    x.with_data(out)
}

/// Chunk-wise integration of one level from `x_src` using `velocity` per chunk.
pub fn integrate_chunked<F>(plan: &ChunkPlan, x_src: &VoxelGrid, steps: usize, workers: usize, velocity: F) -> Result<VoxelGrid>
where
    F: Fn(&Chunk, &VoxelGrid, f32) -> Result<VoxelGrid> + Sync,
{
    integrate(x_src, steps, |x, u| averaged_velocity(plan, x, u, workers, &velocity))
}

/// Baseline without velocity averaging: each chunk is integrated on its own
/// and pasted over earlier chunks in id order.
pub fn outpaint_sequential<F>(plan: &ChunkPlan, x_src: &VoxelGrid, steps: usize, velocity: F) -> Result<VoxelGrid>
where
    F: Fn(&Chunk, &VoxelGrid, f32) -> Result<VoxelGrid> + Sync,
{
    let mut out = x_src.clone();
    for ch in &plan.chunks {
        let xc = x_src.crop(ch.offset, ch.dims)?;
        let done = integrate(&xc, steps, |x, u| velocity(ch, x, u))?;
        out.paste(&done, ch.offset)?;
    }
    Ok(out)
}

/// Result of [`unbounded_generate`].
#[derive(Debug, Clone)]
pub struct UnboundedOutput {
    pub levels: Vec<VoxelGrid>,
    pub chunk_counts: Vec<usize>,
    /// Mean wall time of one integration step at each level.
    pub step_seconds: Vec<f64>,
    pub device: DeviceStats,
}

/// Generates every level over a world of any size, advancing all chunks of a
/// level together. The state stays on the host; only chunk tensors reach `device`.
pub fn unbounded_generate(
    levels: &[LevelModel],
    base: &GridSpec,
    cond: &SceneCondition,
    cfg: &ChunkConfig,
    seed: u64,
    steps: usize,
    device: &StagedDevice,
) -> Result<UnboundedOutput> {
    if levels.is_empty() {
        return Err(Error::Config("no level models given".into()));
    }
    let mut out: Vec<VoxelGrid> = Vec::with_capacity(levels.len());
    let mut counts = Vec::with_capacity(levels.len());
    let mut step_seconds = Vec::with_capacity(levels.len());
    let mut spec = *base;
    for (i, m) in levels.iter().enumerate() {
        if m.transition.level != i + 1 {
            return Err(Error::Config(format!(
                "missing model for level {} (found level {})",
                i + 1,
                m.transition.level
            )));
        }
        if i > 0 {
            spec = refine_spec(&spec, m.transition.ratio)?;
        }
        let started = std::time::Instant::now();
        let k = layout_channels_for(&m.params, cond)?;
        let plan = ChunkPlan::new(
            spec,
            cfg,
            cond.layout.as_ref().filter(|_| k > 0),
            line_thickness(cond.line_width, spec.voxel_size),
        )?;
        for ch in &plan.chunks {
            device.check_budget(&m.params.config, ch.dims)?;
        }
        counts.push(plan.chunks.len());
        let (x_src, extra) = level_source(m, out.last(), &spec, crate::rng::derive_seed(seed, i as u64))?;
        let velocity = |ch: &Chunk, xc: &VoxelGrid, u: f32| -> Result<VoxelGrid> {
            let sub = spec.sub_grid(ch.offset, ch.dims);
            let layout = match (&ch.layout, k) {
                (_, 0) => None,
                (Some(l), _) => Some(voxelize_layout(l, &sub, line_thickness(cond.line_width, sub.voxel_size))?),
                (None, k) => {
                    let roles = (0..k).map(|c| crate::volume::ChannelRole::Layout(c as u8)).collect();
                    Some(VoxelGrid::zeros(sub, roles)?)
                }
            };
            match &extra {
                Some(e) => {
                    let input = xc.concat_channels(&e.crop(ch.offset, ch.dims)?)?;
                    let v = device.forward(&m.params, &input, layout.as_ref(), &cond.attrs, u)?;
                    VoxelGrid::from_data(xc.spec, xc.roles.clone(), v.data)
                }
                None => device.forward(&m.params, xc, layout.as_ref(), &cond.attrs, u),
            }
        };
        let x = if cfg.sequential_outpainting {
            outpaint_sequential(&plan, &x_src, steps, velocity)?
        } else {
            integrate_chunked(&plan, &x_src, steps, cfg.workers, velocity)?
        };
        step_seconds.push(started.elapsed().as_secs_f64() / steps.max(1) as f64);
        out.push(x);
    }
    Ok(UnboundedOutput {
        levels: out,
        chunk_counts: counts,
        step_seconds,
        device: device.stats(),
    })
}
