use rand::Rng;
use rayon::prelude::*;

use super::{bridge, breakdown, interpolate, loss_weights, surface_band_mask, FlowMode, LossBreakdown, Transition};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::net::{forward_tape, AdamW, ModelParams, NetConfig, NetInput};
use crate::rng::{derive_seed, gaussian_grid, rng_from};
use crate::volume::{ChannelRole, VoxelGrid};

/// One scene at two adjacent levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPair {
    /// Previous level; `None` for the first level, whose source is Gaussian noise.
    pub source: Option<VoxelGrid>,
    pub target: VoxelGrid,
    /// Rasterized layout on the target grid.
    pub layout: Option<VoxelGrid>,
    pub attrs: Vec<f32>,
}

impl LevelPair {
    pub fn validate(&self, t: &Transition) -> Result<()> {
        self.target.validate()?;
        if self.target.roles != t.roles {
            return Err(Error::Validation(format!(
                "target roles {:?} do not match level {} roles {:?}",
                self.target.roles, t.level, t.roles
            )));
        }
        if let Some(s) = &self.source {
            s.validate()?;
            let want = self.target.dims().map(|d| d / t.ratio);
            if s.dims().map(|d| d * t.ratio) != self.target.dims() || s.dims() != want {
                return Err(Error::shape(format!(
                    "source dims {:?} times {} do not give target dims {:?}",
                    s.dims(),
                    t.ratio,
                    self.target.dims()
                )));
            }
            if s.roles[..] != t.roles[..t.source_channels()] {
                return Err(Error::Validation("source channels must prefix the target channels".into()));
            }
        }
        if let Some(l) = &self.layout {
            if l.dims() != self.target.dims() {
                return Err(Error::shape("layout grid must match the target grid"));
            }
        }
        Ok(())
    }
}

/// Network config for a level flow.
pub fn level_net_config(t: &Transition, mode: FlowMode, layout_channels: usize, attr_channels: usize) -> NetConfig {
    let mut cfg = NetConfig::new(t.roles.len(), layout_channels, attr_channels);
    if mode == FlowMode::FromNoise && t.level > 1 {
        cfg.extra_channels = t.source_channels();
    }
    cfg
}

/// Inputs for one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x_src: VoxelGrid,
    /// Bridged previous level fed as extra channels in the from-noise mode.
    pub extra: Option<VoxelGrid>,
    pub u: f32,
    pub x_u: VoxelGrid,
}

pub fn training_example(pair: &LevelPair, t: &Transition, mode: FlowMode, seed: u64) -> Result<TrainingExample> {
    let noise = || gaussian_grid(pair.target.spec, t.roles.clone(), derive_seed(seed, 0));
    let (x_src, extra) = match (&pair.source, mode) {
        (None, _) => (noise()?, None),
        (Some(s), FlowMode::ThroughDistributions) => {
            (bridge(s, t.ratio, t.sigma, &t.new_roles, derive_seed(seed, 1))?, None)
        }
        (Some(s), FlowMode::FromNoise) => (noise()?, Some(bridge(s, t.ratio, t.sigma, &[], derive_seed(seed, 1))?)),
    };
    let u: f32 = rng_from(derive_seed(seed, 2)).random();
    let x_u = interpolate(&x_src, &pair.target, u)?;
    Ok(TrainingExample { x_src, extra, u, x_u })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
}

fn stack(grids: &[&VoxelGrid]) -> Tensor<f32> {
    let [x, y, z] = grids[0].dims();
    let c = grids[0].channels();
    let data = grids.iter().flat_map(|g| g.data.iter().copied()).collect();
    Tensor {
        shape: vec![grids.len(), x, y, z, c],
        data,
    }
}

/// One optimizer step on `batch`. Attribute channels are supervised only inside
/// the surface band of the target when `mask_attrs` is set.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &[LevelPair],
    t: &Transition,
    mode: FlowMode,
    mask_attrs: bool,
    seed: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::param("training batch is empty"));
    }
    let cfg = params.config.clone();
    let dims = batch[0].target.dims();
    for p in batch {
        p.validate(t)?;
        if p.target.dims() != dims {
            return Err(Error::shape("all batch items must share grid dims"));
        }
        if cfg.attr_channels > 0 && p.attrs.len() != cfg.attr_channels {
            return Err(Error::shape(format!(
                "expected {} attribute entries, got {}",
                cfg.attr_channels,
                p.attrs.len()
            )));
        }
        if let Some(l) = &p.layout {
            if cfg.layout_channels > 0 && l.channels() != cfg.layout_channels {
                return Err(Error::shape("layout channel count does not match the network"));
            }
        }
    }
    if cfg.state_channels != t.roles.len() {
        return Err(Error::Config("network state channels do not match the level".into()));
    }
    let examples: Vec<TrainingExample> = batch
        .par_iter()
        .enumerate()
        .map(|(i, p)| training_example(p, t, mode, derive_seed(seed, i as u64)))
        .collect::<Result<_>>()?;

    let inputs: Vec<VoxelGrid> = examples
        .iter()
        .map(|e| match &e.extra {
            Some(x) => e.x_u.concat_channels(x),
            None => Ok(e.x_u.clone()),
        })
        .collect::<Result<_>>()?;
    let layout = if cfg.layout_channels > 0 {
        let roles = (0..cfg.layout_channels).map(|k| ChannelRole::Layout(k as u8)).collect();
        let zeros = VoxelGrid::zeros(batch[0].target.spec, roles)?;
        let ls: Vec<&VoxelGrid> = batch.iter().map(|p| p.layout.as_ref().unwrap_or(&zeros)).collect();
        Some(stack(&ls))
    } else {
        None
    };
    let attrs = (cfg.attr_channels > 0)
        .then(|| Tensor::new(vec![batch.len(), cfg.attr_channels], batch.iter().flat_map(|p| p.attrs.clone()).collect()))
        .transpose()?;
    let input = NetInput {
        x: stack(&inputs.iter().collect::<Vec<_>>()),
        layout,
        attrs,
        t: examples.iter().map(|e| e.u).collect(),
    };

    let voxels = batch[0].target.spec.voxel_count();
    let mut target = Vec::with_capacity(batch.len() * voxels * t.roles.len());
    let mut weights = Vec::with_capacity(target.capacity());
    for (p, e) in batch.iter().zip(&examples) {
        target.extend(p.target.data.iter().zip(&e.x_src.data).map(|(&b, &a)| b - a));
        let mask = if mask_attrs { Some(surface_band_mask(&p.target)?) } else { None };
        weights.extend(loss_weights(&t.roles, voxels, mask.as_deref()));
    }

    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, true);
    let out = forward_tape(&mut tape, &bound, &cfg, &input)?;
    let shape = tape.value(out).shape.clone();
    let pred = tape.value(out).data.clone();
    let report = breakdown(&pred, &target, &weights, &t.roles);
    if !report.total.is_finite() {
        let per = voxels * t.roles.len();
        let bad = (0..batch.len())
            .find(|&i| {
                let r = i * per..(i + 1) * per;
                !breakdown(&pred[r.clone()], &target[r.clone()], &weights[r], &t.roles).total.is_finite()
            })
            .unwrap_or(0);
        return Err(Error::Numerical(format!(
            "non-finite loss at batch item {bad} (u = {})",
            examples[bad].u
        )));
    }
    let denom = pred.len() as f32;
    let loss = tape.masked_mse(out, Tensor::new(shape.clone(), target)?, Tensor::new(shape, weights)?, denom)?;
    let mut grads = tape.backward(loss)?;
    let g: Vec<Tensor<f32>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    opt.step(params, &g)?;
    Ok(StepReport { loss: report })
}
