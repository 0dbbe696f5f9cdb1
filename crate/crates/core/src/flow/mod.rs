//! Rectified flows between adjacent levels of the hierarchy.

mod generate;
mod store;
mod train;

pub use generate::{generate_scene, refine_spec, LevelModel, SceneCondition};
pub(crate) use generate::{layout_channels_for, level_source};
pub use store::{level_checkpoint, level_model_from_checkpoint, LevelContext};
pub use train::{level_net_config, train_step, training_example, LevelPair, StepReport, TrainingExample};

use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::rng::{derive_seed, gaussian};
use crate::volume::{resample, ChannelRole, HierarchySpec, ResampleMode, VoxelGrid};

pub const DEFAULT_BRIDGE_SIGMA: f32 = 0.05;
pub const DEFAULT_STEPS: usize = 50;

/// Source distribution of a level flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowMode {
    /// Start from the bridged previous level.
    ThroughDistributions,
    /// Start from Gaussian noise, with the bridged previous level as extra input channels.
    FromNoise,
}

impl FlowMode {
    pub fn name(self) -> &'static str {
        match self {
            FlowMode::ThroughDistributions => "through",
            FlowMode::FromNoise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "through" | "through-distributions" => Some(FlowMode::ThroughDistributions),
            "noise" | "from-noise" => Some(FlowMode::FromNoise),
            _ => None,
        }
    }
}

/// How level `i - 1` is lifted onto level `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// 1-based index of the target level.
    pub level: usize,
    pub ratio: usize,
    pub sigma: f32,
    /// Channels of the target level that the source level lacks.
    pub new_roles: Vec<ChannelRole>,
    /// Full channel roles of the target level.
    pub roles: Vec<ChannelRole>,
}

impl Transition {
    pub fn from_hierarchy(h: &HierarchySpec, level: usize, sigma: f32) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::param(format!("bridge sigma must be >= 0, got {sigma}")));
        }
        let roles = h.level(level)?.roles();
        let new = h.new_channels(level)?;
        Ok(Transition {
            level,
            ratio: h.ratio(level)?,
            sigma,
            new_roles: roles[roles.len() - new..].to_vec(),
            roles,
        })
    }

    /// Channels of the source level.
    pub fn source_channels(&self) -> usize {
        self.roles.len() - self.new_roles.len()
    }
}

/// `resample(x_prev + sigma * eps, r)` followed by `N(0, 1)` channels for `new_roles`.
pub fn bridge(x_prev: &VoxelGrid, ratio: usize, sigma: f32, new_roles: &[ChannelRole], seed: u64) -> Result<VoxelGrid> {
    x_prev.validate()?;
    if !(sigma >= 0.0) {
        return Err(Error::param(format!("bridge sigma must be >= 0, got {sigma}")));
    }
    let noisy = if sigma > 0.0 {
        let eps = gaussian(x_prev.data.len(), derive_seed(seed, 0));
        let data = x_prev.data.iter().zip(eps).map(|(&x, e)| x + sigma * e).collect();
        x_prev.with_data(data)?
    } else {
        x_prev.clone()
    };
    let up = resample(&noisy, ratio, ResampleMode::Trilinear)?;
    if new_roles.is_empty() {
        return Ok(up);
    }
    let fresh = VoxelGrid::from_data(
        up.spec,
        new_roles.to_vec(),
        gaussian(up.spec.voxel_count() * new_roles.len(), derive_seed(seed, 1)),
    )?;
    up.concat_channels(&fresh)
}

fn same_layout(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::shape(format!(
            "grids differ: {:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    Ok(())
}

/// Point `x_src + u (x_tgt - x_src)` on the straight path.
pub fn interpolate(x_src: &VoxelGrid, x_tgt: &VoxelGrid, u: f32) -> Result<VoxelGrid> {
    same_layout(x_src, x_tgt)?;
    let u = u as f64;
    let data = x_src
        .data
        .iter()
        .zip(&x_tgt.data)
        .map(|(&a, &b)| (a as f64 + u * (b as f64 - a as f64)) as f32)
        .collect();
    x_src.with_data(data)
}

/// Flow-matching loss and its split into distance and attribute channels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean over distance channels.
    pub udf: f64,
    /// Masked attribute error averaged over all attribute entries.
    pub attr: f64,
}

/// Per-voxel weights for attribute channels: 1 inside the surface band of `target`.
pub fn surface_band_mask(target: &VoxelGrid) -> Result<Vec<f32>> {
    let u = target
        .channel_of(ChannelRole::Udf)
        .ok_or_else(|| Error::Validation("target has no distance channel".into()))?;
    let c = target.channels();
    Ok(target.data.chunks_exact(c).map(|v| (v[u] < 1.0) as u8 as f32).collect())
}

/// Entry-wise loss weights: distance channels always count, attribute channels follow `attr_mask`.
pub(crate) fn loss_weights(roles: &[ChannelRole], voxels: usize, attr_mask: Option<&[f32]>) -> Vec<f32> {
    let mut w = Vec::with_capacity(voxels * roles.len());
    for v in 0..voxels {
        for r in roles {
            w.push(match (r.is_attribute(), attr_mask) {
                (true, Some(m)) => m[v],
                _ => 1.0,
            });
        }
    }
    w
}

pub(crate) fn breakdown(pred: &[f32], target: &[f32], weights: &[f32], roles: &[ChannelRole]) -> LossBreakdown {
    let c = roles.len();
    let (mut su, mut sa) = (0.0f64, 0.0f64);
    for i in 0..pred.len() {
        let d = (pred[i] - target[i]) as f64;
        let e = weights[i] as f64 * d * d;
        if roles[i % c].is_attribute() {
            sa += e;
        } else {
            su += e;
        }
    }
    let voxels = (pred.len() / c) as f64;
    let na = roles.iter().filter(|r| r.is_attribute()).count() as f64;
    let nu = c as f64 - na;
    LossBreakdown {
        total: (su + sa) / pred.len() as f64,
        udf: if nu > 0.0 { su / (voxels * nu) } else { 0.0 },
        attr: if na > 0.0 { sa / (voxels * na) } else { 0.0 },
    }
}

/// Mean squared error of `predicted_v` against the constant velocity `x_tgt - x_src`.
pub fn cfm_loss(
    predicted_v: &VoxelGrid,
    x_src: &VoxelGrid,
    x_tgt: &VoxelGrid,
    attr_mask: Option<&[f32]>,
) -> Result<LossBreakdown> {
    same_layout(predicted_v, x_src)?;
    same_layout(x_src, x_tgt)?;
    let voxels = x_src.spec.voxel_count();
    if attr_mask.is_some_and(|m| m.len() != voxels) {
        return Err(Error::shape("attribute mask must have one entry per voxel"));
    }
    let target: Vec<f32> = x_tgt.data.iter().zip(&x_src.data).map(|(&b, &a)| b - a).collect();
    let w = loss_weights(&x_src.roles, voxels, attr_mask);
    Ok(breakdown(&predicted_v.data, &target, &w, &x_src.roles))
}

/// Uniform-step Euler integration of `dx/du = v(x, u)` from `u = 0` to `u = 1`.
pub fn integrate(
    x_src: &VoxelGrid,
    steps: usize,
    mut velocity: impl FnMut(&VoxelGrid, f32) -> Result<VoxelGrid>,
) -> Result<VoxelGrid> {
    if steps == 0 {
        return Err(Error::param("integration needs at least one step"));
    }
    let du = 1.0 / steps as f64;
    let mut acc: Vec<f64> = x_src.data.iter().map(|&v| v as f64).collect();
    let mut x = x_src.clone();
    for k in 0..steps {
        let u = (k as f64 * du) as f32;
        let v = velocity(&x, u)?;
        same_layout(&v, &x)?;
        for (a, &dv) in acc.iter_mut().zip(&v.data) {
            *a += du * dv as f64;
        }
        if let Some(i) = acc.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("integration step {k}: element {i} diverged")));
        }
        x.data.iter_mut().zip(&acc).for_each(|(d, &a)| *d = a as f32);
    }
    Ok(x)
}

/// Velocity field of a trained level model under fixed conditioning.
pub fn net_velocity<'a>(
    params: &'a ModelParams,
    layout: Option<&'a VoxelGrid>,
    attrs: &'a [f32],
    extra: Option<&'a VoxelGrid>,
) -> impl FnMut(&VoxelGrid, f32) -> Result<VoxelGrid> + 'a {
    move |x, u| match extra {
        Some(e) => {
            let v = params.forward(&x.concat_channels(e)?, u, layout, attrs)?;
            VoxelGrid::from_data(x.spec, x.roles.clone(), v.data)
        }
        None => params.forward(x, u, layout, attrs),
    }
}
