//! Level models as `.wfc` checkpoints: the transition, flow mode and world
//! grid travel in the checkpoint metadata.

use super::{FlowMode, LevelModel, Transition};
use crate::error::{Error, Result};
use crate::net::{AdamW, Checkpoint, RngState};
use crate::volume::{ChannelRole, GridSpec};

/// Everything besides the weights needed to sample from a level model.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelContext {
    /// Level-1 grid of the training worlds.
    pub base: GridSpec,
    pub truncation: f32,
    /// Attribute tag names in encoding order.
    pub vocab: Vec<String>,
    /// Layout line width in meters.
    pub line_width: f32,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn roles_text(roles: &[ChannelRole]) -> String {
    join(&roles.iter().map(|r| r.tag()).collect::<Vec<_>>())
}

/// Checkpoint of `model` with its training state.
pub fn level_checkpoint(
    model: &LevelModel,
    ctx: &LevelContext,
    optimizer: Option<AdamW>,
    step: u64,
    seed: u64,
) -> Checkpoint {
    let t = &model.transition;
    let b = &ctx.base;
    let meta = [
        ("level", t.level.to_string()),
        ("ratio", t.ratio.to_string()),
        ("sigma", t.sigma.to_string()),
        ("roles", roles_text(&t.roles)),
        ("new_roles", roles_text(&t.new_roles)),
        ("mode", model.mode.name().to_string()),
        ("base_dims", join(&b.dims)),
        ("base_voxel", b.voxel_size.to_string()),
        ("base_origin", join(&b.origin)),
        ("truncation", ctx.truncation.to_string()),
        ("vocab", ctx.vocab.join(",")),
        ("line_width", ctx.line_width.to_string()),
    ];
    Checkpoint {
        params: model.params.clone(),
        optimizer,
        step,
        rng: RngState {
            seed,
            stream: 0,
            word_pos: 0,
        },
        meta: meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    }
}

fn field<'a>(ck: &'a Checkpoint, key: &str) -> Result<&'a str> {
    ck.meta(key)
        .ok_or_else(|| Error::Config(format!("checkpoint has no {key:?} entry; not a level model")))
}

fn parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = field(ck, key)?;
    v.parse()
        .map_err(|_| Error::Config(format!("checkpoint entry {key}={v:?} is malformed")))
}

fn parse_list<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<Vec<T>> {
    let v = field(ck, key)?;
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse())
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|_| Error::Config(format!("checkpoint entry {key}={v:?} is malformed")))
}

fn parse_roles(ck: &Checkpoint, key: &str) -> Result<Vec<ChannelRole>> {
    parse_list::<u8>(ck, key)?
        .into_iter()
        .map(|t| ChannelRole::from_tag(t).ok_or_else(|| Error::Config(format!("unknown channel tag {t}"))))
        .collect()
}

fn triple<T: Copy + std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<[T; 3]> {
    let v = parse_list::<T>(ck, key)?;
    <[T; 3]>::try_from(v).map_err(|_| Error::Config(format!("checkpoint entry {key} needs three values")))
}

/// Inverse of [`level_checkpoint`].
pub fn level_model_from_checkpoint(ck: &Checkpoint) -> Result<(LevelModel, LevelContext)> {
    let mode = field(ck, "mode")?;
    let mode = FlowMode::parse(mode).ok_or_else(|| Error::Config(format!("unknown flow mode {mode:?}")))?;
    let transition = Transition {
        level: parse(ck, "level")?,
        ratio: parse(ck, "ratio")?,
        sigma: parse(ck, "sigma")?,
        new_roles: parse_roles(ck, "new_roles")?,
        roles: parse_roles(ck, "roles")?,
    };
    if transition.roles.len() != ck.params.config.state_channels {
        return Err(Error::Config(format!(
            "checkpoint roles {:?} do not match a {}-channel network",
            transition.roles, ck.params.config.state_channels
        )));
    }
    let ctx = LevelContext {
        base: GridSpec::new(triple(ck, "base_dims")?, parse(ck, "base_voxel")?, triple(ck, "base_origin")?)?,
        truncation: parse(ck, "truncation")?,
        vocab: field(ck, "vocab")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
        line_width: parse(ck, "line_width")?,
    };
    let model = LevelModel {
        params: ck.params.clone(),
        transition,
        mode,
    };
    Ok((model, ctx))
}
