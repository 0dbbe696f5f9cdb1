use std::collections::HashMap;

use super::{ModelParams, NetConfig};
use crate::autodiff::{kernels, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// Parameters registered on a tape, addressable by name.
pub struct BoundParams {
    index: HashMap<String, Var>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn from_vars(names: Vec<String>, vars: Vec<Var>) -> Self {
        BoundParams {
            index: names.into_iter().zip(vars.iter().copied()).collect(),
            vars,
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    /// Variables in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// One batch of network inputs; spatial tensors are `[N, X, Y, Z, C]`.
#[derive(Debug, Clone)]
pub struct NetInput<T> {
    /// State channels followed by any extra conditioning channels.
    pub x: Tensor<T>,
    pub layout: Option<Tensor<T>>,
    /// `[N, |A|]` attribute vectors.
    pub attrs: Option<Tensor<T>>,
    pub t: Vec<T>,
}

/// Sinusoidal features of `t`: sines then cosines over a geometric ladder of
/// `dim / 2` frequencies from 1 to 1e4.
pub fn time_features<T: Scalar>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let freqs: Vec<T> = (0..half)
        .map(|j| T::c(1e4f64.powf(j as f64 / (half.max(2) - 1) as f64)))
        .collect();
    let mut out: Vec<T> = freqs.iter().map(|&f| (f * t).sin()).collect();
    out.extend(freqs.iter().map(|&f| (f * t).cos()));
    out
}

fn check_input<T: Scalar>(cfg: &NetConfig, input: &NetInput<T>) -> Result<[usize; 4]> {
    let [n, x, y, z, c] = input.x.dims5()?;
    let want = cfg.state_channels + cfg.extra_channels;
    if c != want {
        return Err(Error::shape(format!("network expects {want} state channels, got {c}")));
    }
    let m = cfg.dim_multiple();
    if [x, y, z].iter().any(|d| d % m != 0) {
        return Err(Error::shape(format!(
            "grid dims {:?} must be multiples of {m}; pad the input to the next multiple",
            [x, y, z]
        )));
    }
    if input.t.len() != n {
        return Err(Error::shape(format!("{} timesteps for batch of {n}", input.t.len())));
    }
    match (&input.layout, cfg.layout_channels) {
        (None, 0) => {}
        (Some(l), k) if l.shape == [n, x, y, z, k] => {}
        (l, k) => {
            return Err(Error::shape(format!(
                "layout must be [{n}, {x}, {y}, {z}, {k}], got {:?}",
                l.as_ref().map(|l| &l.shape)
            )))
        }
    }
    match (&input.attrs, cfg.attr_channels) {
        (None, 0) => {}
        (Some(a), k) if a.shape == [n, k] => {}
        (a, k) => {
            return Err(Error::shape(format!(
                "attributes must be [{n}, {k}], got {:?}",
                a.as_ref().map(|a| &a.shape)
            )))
        }
    }
    let finite = input.x.is_finite()
        && input.layout.as_ref().is_none_or(Tensor::is_finite)
        && input.attrs.as_ref().is_none_or(Tensor::is_finite)
        && input.t.iter().all(|t| t.is_finite());
    if !finite {
        return Err(Error::Validation("network input contains non-finite values".into()));
    }
    Ok([n, x, y, z])
}

struct Net<'a, T> {
    tape: &'a mut Tape<T>,
    p: &'a BoundParams,
    groups: usize,
}

impl<T: Scalar> Net<'_, T> {
    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let (w, b) = (self.p.get(&format!("{name}.w"))?, self.p.get(&format!("{name}.b"))?);
        self.tape.linear(x, w, b)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let (w, b) = (self.p.get(&format!("{name}.w"))?, self.p.get(&format!("{name}.b"))?);
        self.tape.conv3d(x, w, b, stride)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let (g, b) = (self.p.get(&format!("{name}.g"))?, self.p.get(&format!("{name}.b"))?);
        self.tape.group_norm(x, g, b, self.groups)
    }

    fn mlp(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.l1"))?;
        let h = self.tape.silu(h);
        self.linear(h, &format!("{name}.l2"))
    }

    fn res(&mut self, x: Var, name: &str, cond: Var) -> Result<Var> {
        let h = self.norm(x, &format!("{name}.n1"))?;
        let h = self.tape.silu(h);
        let h = self.conv(h, &format!("{name}.c1"), 1)?;
        let h = self.norm(h, &format!("{name}.n2"))?;
        let scale = self.linear(cond, &format!("{name}.fs"))?;
        let shift = self.linear(cond, &format!("{name}.fh"))?;
        let h = self.tape.film(h, scale, shift)?;
        let h = self.tape.silu(h);
        let h = self.conv(h, &format!("{name}.c2"), 1)?;
        let skip = match self.p.get(&format!("{name}.skip.w")) {
            Ok(_) => self.conv(x, &format!("{name}.skip"), 1)?,
            Err(_) => x,
        };
        self.tape.add(h, skip)
    }

    fn attn(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.norm(x, &format!("{name}.n"))?;
        let q = self.conv(h, &format!("{name}.q"), 1)?;
        let k = self.conv(h, &format!("{name}.k"), 1)?;
        let v = self.conv(h, &format!("{name}.v"), 1)?;
        let a = self.tape.attention(q, k, v)?;
        let o = self.conv(a, &format!("{name}.o"), 1)?;
        self.tape.add(x, o)
    }

    fn embedding(&mut self, cfg: &NetConfig, input: &NetInput<T>, layout: Option<Var>, attrs: Option<Var>) -> Result<Var> {
        let n = input.t.len();
        let feats: Vec<T> = input.t.iter().flat_map(|&t| time_features(t, cfg.embed_dim)).collect();
        let tf = self.tape.constant(Tensor::new(vec![n, cfg.embed_dim], feats)?);
        let mut e = self.mlp(tf, "time")?;
        if let Some(l) = layout {
            let pooled = self.tape.mean_pool(l);
            let el = self.mlp(pooled, "lay")?;
            e = self.tape.add(e, el)?;
        }
        if let Some(a) = attrs {
            let ea = self.linear(a, "attr.l1")?;
            e = self.tape.add(e, ea)?;
        }
        Ok(e)
    }
}

/// Records the velocity network on `tape` and returns the `[N, X, Y, Z, state]` output.
pub fn forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    cfg: &NetConfig,
    input: &NetInput<T>,
) -> Result<Var> {
    let [_, x, y, z] = check_input(cfg, input)?;
    let mut net = Net {
        tape,
        p: params,
        groups: cfg.groups,
    };
    let xv = net.tape.constant(input.x.clone());
    let lv = input.layout.as_ref().map(|l| net.tape.constant(l.clone()));
    let av = input.attrs.as_ref().map(|a| net.tape.constant(a.clone()));
    let e = net.embedding(cfg, input, lv, av)?;
    let cond = net.tape.silu(e);

    let mut h = xv;
    if let Some(l) = lv {
        h = net.tape.concat(h, l)?;
    }
    if let Some(a) = av {
        let b = net.tape.broadcast(a, [x, y, z])?;
        h = net.tape.concat(h, b)?;
    }
    h = net.conv(h, "stem", 1)?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        h = net.res(h, &format!("enc{l}.res"), cond)?;
        if cfg.attention_at.contains(&l) {
            h = net.attn(h, &format!("enc{l}.attn"))?;
        }
        skips.push(h);
        h = net.conv(h, &format!("enc{l}.down"), 2)?;
    }
    h = net.res(h, "mid.res1", cond)?;
    if cfg.attention_at.contains(&cfg.depth) {
        h = net.attn(h, "mid.attn")?;
    }
    h = net.res(h, "mid.res2", cond)?;
    for l in (0..cfg.depth).rev() {
        h = net.tape.upsample2(h)?;
        h = net.conv(h, &format!("dec{l}.up"), 1)?;
        h = net.tape.concat(h, skips[l])?;
        h = net.res(h, &format!("dec{l}.res"), cond)?;
        if cfg.attention_at.contains(&l) {
            h = net.attn(h, &format!("dec{l}.attn"))?;
        }
    }
    h = net.norm(h, "out.n")?;
    h = net.tape.silu(h);
    net.conv(h, "out.c", 1)
}

fn grid_tensor(g: &VoxelGrid) -> Tensor<f32> {
    let [x, y, z] = g.dims();
    Tensor {
        shape: vec![1, x, y, z, g.channels()],
        data: g.data.clone(),
    }
}

impl ModelParams {
    /// Batched inference in 32-bit precision.
    pub fn forward_batch(&self, input: &NetInput<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = forward_tape(&mut tape, &bound, &self.config, input)?;
        Ok(tape.take_value(out))
    }

    /// Velocity for one grid; `x_t` carries the state channels followed by any extra channels.
    pub fn forward(&self, x_t: &VoxelGrid, t: f32, layout: Option<&VoxelGrid>, attrs: &[f32]) -> Result<VoxelGrid> {
        if let Some(l) = layout {
            if l.dims() != x_t.dims() {
                return Err(Error::shape(format!(
                    "layout dims {:?} differ from state dims {:?}",
                    l.dims(),
                    x_t.dims()
                )));
            }
        }
        let input = NetInput {
            x: grid_tensor(x_t),
            layout: layout.filter(|_| self.config.layout_channels > 0).map(grid_tensor),
            attrs: (self.config.attr_channels > 0)
                .then(|| Tensor::new(vec![1, attrs.len()], attrs.to_vec()))
                .transpose()?,
            t: vec![t],
        };
        let out = self.forward_batch(&input)?;
        let roles = x_t.roles[..self.config.state_channels].to_vec();
        VoxelGrid::from_data(x_t.spec, roles, out.data)
    }

    /// Time embedding `phi_t(t)` as a plain vector.
    pub fn time_embed(&self, t: f32) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let mut net = Net {
            tape: &mut tape,
            p: &bound,
            groups: self.config.groups,
        };
        let tf = net
            .tape
            .constant(Tensor::new(vec![1, self.config.embed_dim], time_features(t, self.config.embed_dim))?);
        let e = net.mlp(tf, "time")?;
        Ok(tape.take_value(e).data)
    }
}

/// Conditioning embedding `phi_t(t) + phi_L(pool(layout)) + phi_A(attrs)`.
pub fn cond_embedding(params: &ModelParams, t: f32, layout: Option<&VoxelGrid>, attrs: &[f32]) -> Result<Vec<f32>> {
    let cfg = &params.config;
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape, false);
    let input = NetInput {
        x: Tensor::zeros(vec![1, 1, 1, 1, 1]),
        layout: None,
        attrs: None,
        t: vec![t],
    };
    let lv = match (layout, cfg.layout_channels) {
        (_, 0) => None,
        (Some(l), k) if l.channels() == k => Some(tape.constant(grid_tensor(l))),
        (None, k) => Some(tape.constant(Tensor::zeros(vec![1, 1, 1, 1, k]))),
        (Some(l), k) => {
            return Err(Error::shape(format!("layout has {} channels, expected {k}", l.channels())))
        }
    };
    let av = match cfg.attr_channels {
        0 => None,
        k if attrs.len() == k => Some(tape.constant(Tensor::new(vec![1, k], attrs.to_vec())?)),
        k => return Err(Error::shape(format!("{} attributes, expected {k}", attrs.len()))),
    };
    let mut net = Net {
        tape: &mut tape,
        p: &bound,
        groups: cfg.groups,
    };
    let e = net.embedding(cfg, &input, lv, av)?;
    Ok(tape.take_value(e).data)
}

/// Feature-wise modulation `features * (1 + scale) + shift` per channel.
pub fn film(features: &VoxelGrid, scale: &[f32], shift: &[f32]) -> Result<VoxelGrid> {
    let c = features.channels();
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "film needs {c} scales and shifts, got {} and {}",
            scale.len(),
            shift.len()
        )));
    }
    features.with_data(kernels::film_forward(&features.data, 1, c, scale, shift))
}
