//! Conditional 3D UNet velocity field, its parameters, optimizer and checkpoints.

mod checkpoint;
mod optim;
mod unet;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, RngState};
pub use optim::{AdamW, AdamWConfig};
pub use unet::{cond_embedding, film, forward_tape, time_features, BoundParams, NetInput};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    /// Channels of the evolving state `x_t`; also the output channel count.
    pub state_channels: usize,
    /// Extra per-voxel conditioning channels (the previous level in the from-noise mode).
    pub extra_channels: usize,
    pub layout_channels: usize,
    pub attr_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    /// Stage indices in `0..=depth` that get self-attention.
    pub attention_at: Vec<usize>,
    pub embed_dim: usize,
    pub groups: usize,
}

impl NetConfig {
    pub fn new(state_channels: usize, layout_channels: usize, attr_channels: usize) -> Self {
        NetConfig {
            state_channels,
            extra_channels: 0,
            layout_channels,
            attr_channels,
            base_width: 32,
            depth: 3,
            attention_at: vec![3],
            embed_dim: 128,
            groups: 8,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.state_channels + self.extra_channels + self.layout_channels + self.attr_channels
    }

    pub fn out_channels(&self) -> usize {
        self.state_channels
    }

    /// Feature width at stage `l`.
    pub fn width(&self, l: usize) -> usize {
        self.base_width * (1usize << l.min(2))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.state_channels == 0 {
            return bad("state_channels must be >= 1".into());
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.groups == 0 || self.base_width == 0 || self.base_width % self.groups != 0 {
            return bad(format!(
                "base_width {} must be a positive multiple of groups {}",
                self.base_width, self.groups
            ));
        }
        if self.embed_dim < 4 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim must be even and >= 4, got {}", self.embed_dim));
        }
        if let Some(&s) = self.attention_at.iter().find(|&&s| s > self.depth) {
            return bad(format!("attention stage {s} exceeds depth {}", self.depth));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn dim_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct SpecBuilder(Vec<ParamSpec>);

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, zero: bool) {
        let init = if zero { Init::Zeros } else { Init::FanIn(k * k * k * cin) };
        self.push(format!("{name}.w"), vec![k, k, k, cin, cout], init);
        self.push(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, zero: bool) {
        let init = if zero { Init::Zeros } else { Init::FanIn(cin) };
        self.push(format!("{name}.w"), vec![cin, cout], init);
        self.push(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.g"), vec![c], Init::Ones);
        self.push(format!("{name}.b"), vec![c], Init::Zeros);
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, e: usize) {
        self.norm(&format!("{name}.n1"), cin);
        self.conv(&format!("{name}.c1"), 3, cin, cout, false);
        self.norm(&format!("{name}.n2"), cout);
        self.linear(&format!("{name}.fs"), e, cout, true);
        self.linear(&format!("{name}.fh"), e, cout, true);
        self.conv(&format!("{name}.c2"), 3, cout, cout, false);
        if cin != cout {
            self.conv(&format!("{name}.skip"), 1, cin, cout, false);
        }
    }

    fn attn(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.n"), c);
        for p in ["q", "k", "v", "o"] {
            self.conv(&format!("{name}.{p}"), 1, c, c, false);
        }
    }
}

/// Every parameter of the network for `cfg`, in a fixed order.
pub(crate) fn param_specs(cfg: &NetConfig) -> Vec<ParamSpec> {
    let e = cfg.embed_dim;
    let mut b = SpecBuilder(Vec::new());
    b.linear("time.l1", e, e, false);
    b.linear("time.l2", e, e, false);
    if cfg.layout_channels > 0 {
        b.linear("lay.l1", cfg.layout_channels, e, false);
        b.linear("lay.l2", e, e, false);
    }
    if cfg.attr_channels > 0 {
        b.linear("attr.l1", cfg.attr_channels, e, false);
    }
    b.conv("stem", 3, cfg.in_channels(), cfg.width(0), false);
    for l in 0..cfg.depth {
        b.res(&format!("enc{l}.res"), cfg.width(l), cfg.width(l), e);
        if cfg.attention_at.contains(&l) {
            b.attn(&format!("enc{l}.attn"), cfg.width(l));
        }
        b.conv(&format!("enc{l}.down"), 3, cfg.width(l), cfg.width(l + 1), false);
    }
    let wd = cfg.width(cfg.depth);
    b.res("mid.res1", wd, wd, e);
    if cfg.attention_at.contains(&cfg.depth) {
        b.attn("mid.attn", wd);
    }
    b.res("mid.res2", wd, wd, e);
    for l in (0..cfg.depth).rev() {
        b.conv(&format!("dec{l}.up"), 3, cfg.width(l + 1), cfg.width(l), false);
        b.res(&format!("dec{l}.res"), 2 * cfg.width(l), cfg.width(l), e);
        if cfg.attention_at.contains(&l) {
            b.attn(&format!("dec{l}.attn"), cfg.width(l));
        }
    }
    b.norm("out.n", cfg.width(0));
    b.conv("out.c", 3, cfg.width(0), cfg.out_channels(), true);
    b.0
}

/// Number of scalar parameters a network with `cfg` has.
pub fn param_count(cfg: &NetConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Named network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    pub seed: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl ModelParams {
    /// Deterministic initialization: fan-in uniform for weights, zeros for the
    /// FiLM projections, biases and the output convolution.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = param_specs(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(f) => {
                    let bound = 1.0 / (f as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            names.push(s.name);
            tensors.push(Tensor::new(s.shape, data)?);
        }
        Ok(ModelParams {
            config: config.clone(),
            seed,
            names,
            tensors,
        })
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = param_specs(&self.config);
        if specs.len() != self.tensors.len() || specs.len() != self.names.len() {
            return Err(Error::Validation("parameter list does not match the config".into()));
        }
        for ((s, n), t) in specs.iter().zip(&self.names).zip(&self.tensors) {
            if &s.name != n || s.shape != t.shape || t.len() != s.shape.iter().product::<usize>() {
                return Err(Error::Validation(format!("parameter {n} does not match {}", s.name)));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {n}")));
            }
        }
        Ok(())
    }

    /// Order-sensitive checksum of all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in &t.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Registers every parameter on `tape`, converted to `T`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let v = Tensor {
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&x| T::from_single(x)).collect(),
                };
                tape.leaf(v, requires_grad)
            })
            .collect();
        BoundParams::from_vars(self.names.clone(), vars)
    }
}
