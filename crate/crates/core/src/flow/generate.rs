use super::{bridge, integrate, net_velocity, FlowMode, Transition};
use crate::error::{Error, Result};
use crate::layout::{line_thickness, voxelize_layout, VectorLayout};
use crate::net::ModelParams;
use crate::rng::{derive_seed, gaussian_grid};
use crate::volume::{ChannelRole, GridSpec, VoxelGrid};

/// Trained flow into one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelModel {
    pub params: ModelParams,
    pub transition: Transition,
    pub mode: FlowMode,
}

/// Conditioning shared by every level of a generated scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneCondition {
    pub layout: Option<VectorLayout>,
    pub attrs: Vec<f32>,
    /// Layout line width in meters, rounded to whole voxels at each level.
    pub line_width: f32,
}

/// Grid covering the same box as `spec` with voxels `r` times smaller.
pub fn refine_spec(spec: &GridSpec, r: usize) -> Result<GridSpec> {
    let s = spec.voxel_size / r as f32;
    let min = spec.world_min();
    GridSpec::new(
        spec.dims.map(|d| d * r),
        s,
        [min[0] + 0.5 * s, min[1] + 0.5 * s, min[2] + 0.5 * s],
    )
}

/// Layout channel count of `params`, checked against the condition.
pub(crate) fn layout_channels_for(params: &ModelParams, cond: &SceneCondition) -> Result<usize> {
    let k = params.config.layout_channels;
    match &cond.layout {
        Some(_) if k == 0 => Err(Error::Config("a layout was given but the model has no layout input".into())),
        Some(l) if l.classes != k => Err(Error::Config(format!(
            "layout has {} classes but the model expects {k}",
            l.classes
        ))),
        _ => Ok(k),
    }
}

/// Layout channels for `params` on `spec`; zeros when the model expects a layout but none is given.
pub(crate) fn layout_grid(params: &ModelParams, cond: &SceneCondition, spec: &GridSpec) -> Result<Option<VoxelGrid>> {
    let k = layout_channels_for(params, cond)?;
    match &cond.layout {
        _ if k == 0 => Ok(None),
        None => {
            let roles = (0..k).map(|c| ChannelRole::Layout(c as u8)).collect();
            Ok(Some(VoxelGrid::zeros(*spec, roles)?))
        }
        Some(l) => Ok(Some(voxelize_layout(l, spec, line_thickness(cond.line_width, spec.voxel_size))?)),
    }
}

/// Source state of the flow into `model`'s level, plus any extra conditioning channels.
pub(crate) fn level_source(
    model: &LevelModel,
    prev: Option<&VoxelGrid>,
    spec: &GridSpec,
    seed: u64,
) -> Result<(VoxelGrid, Option<VoxelGrid>)> {
    let t = &model.transition;
    let noise = || gaussian_grid(*spec, t.roles.clone(), derive_seed(seed, 0));
    Ok(match (prev, model.mode) {
        (None, _) => (noise()?, None),
        (Some(p), FlowMode::ThroughDistributions) => {
            (bridge(p, t.ratio, t.sigma, &t.new_roles, derive_seed(seed, 1))?, None)
        }
        (Some(p), FlowMode::FromNoise) => (noise()?, Some(bridge(p, t.ratio, t.sigma, &[], derive_seed(seed, 1))?)),
    })
}

/// Samples every level in turn, starting from noise on `base` (the level-1 grid).
pub fn generate_scene(
    levels: &[LevelModel],
    base: &GridSpec,
    cond: &SceneCondition,
    seed: u64,
    steps: usize,
) -> Result<Vec<VoxelGrid>> {
    if levels.is_empty() {
        return Err(Error::Config("no level models given".into()));
    }
    let mut out: Vec<VoxelGrid> = Vec::with_capacity(levels.len());
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
        let level_seed = derive_seed(seed, i as u64);
        let (x_src, extra) = level_source(m, out.last(), &spec, level_seed)?;
        let layout = layout_grid(&m.params, cond, &spec)?;
        let v = net_velocity(&m.params, layout.as_ref(), &cond.attrs, extra.as_ref());
        let x = integrate(&x_src, steps, v)?;
        out.push(x);
    }
    Ok(out)
}
