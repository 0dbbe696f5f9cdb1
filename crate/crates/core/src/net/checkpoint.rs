//! `.wfc` checkpoints.
//!
//! Layout (little-endian): magic `WFCK`, `u32` version, the network config as
//! `u32` fields, `u64` init seed, `u32` parameter count and per parameter a
//! length-prefixed name, `u32` rank, `u32` dims and `f32` values; then an
//! optimizer flag byte with hyperparameters, step and moments; the training
//! step, RNG state, and length-prefixed key/value metadata.

use std::path::Path;

use super::{AdamW, AdamWConfig, ModelParams, NetConfig};
use crate::autodiff::Tensor;
use crate::binio::{put_f32, put_f32s, put_str, put_u32, put_u64, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub rng: RngState,
    /// Free-form run metadata such as the hierarchy level and flow mode.
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn put_config(out: &mut Vec<u8>, c: &NetConfig) {
    for v in [
        c.state_channels,
        c.extra_channels,
        c.layout_channels,
        c.attr_channels,
        c.base_width,
        c.depth,
        c.embed_dim,
        c.groups,
        c.attention_at.len(),
    ] {
        put_u32(out, v as u32);
    }
    for &a in &c.attention_at {
        put_u32(out, a as u32);
    }
}

fn read_config(r: &mut Reader) -> Result<NetConfig> {
    let mut f = [0usize; 9];
    for v in f.iter_mut() {
        *v = r.u32("config")? as usize;
    }
    if f[8] > 64 {
        return Err(r.error("implausible attention stage count"));
    }
    let attention_at = (0..f[8])
        .map(|_| r.u32("attention stage").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(NetConfig {
        state_channels: f[0],
        extra_channels: f[1],
        layout_channels: f[2],
        attr_channels: f[3],
        base_width: f[4],
        depth: f[5],
        embed_dim: f[6],
        groups: f[7],
        attention_at,
    })
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_config(&mut out, &ck.params.config);
    put_u64(&mut out, ck.params.seed);
    put_u32(&mut out, ck.params.tensors.len() as u32);
    for (name, t) in ck.params.names.iter().zip(&ck.params.tensors) {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, &t.data);
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            let c = o.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                put_f32(&mut out, v);
            }
            put_u64(&mut out, o.step);
            for (m, v) in o.m.iter().zip(&o.v) {
                put_f32s(&mut out, m);
                put_f32s(&mut out, v);
            }
        }
    }
    put_u64(&mut out, ck.step);
    put_u64(&mut out, ck.rng.seed);
    put_u64(&mut out, ck.rng.stream);
    out.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    put_u32(&mut out, ck.meta.len() as u32);
    for (k, v) in &ck.meta {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let config_at = r.pos;
    let config = read_config(&mut r)?;
    config.validate().map_err(|e| Error::Format {
        offset: config_at as u64,
        message: e.to_string(),
    })?;
    let seed = r.u64("seed")?;
    let count = r.u32("parameter count")? as usize;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        names.push(r.string("parameter name")?);
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(r.error("implausible tensor rank"));
        }
        let shape = (0..rank)
            .map(|_| r.u32("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| r.error("tensor size overflows"))?;
        let data = r.f32s(n, "parameter values")?;
        tensors.push(Tensor { shape, data });
    }
    let params = ModelParams {
        config,
        seed,
        names,
        tensors,
    };
    let params_end = r.pos;
    params.validate().map_err(|e| Error::Format {
        offset: params_end as u64,
        message: e.to_string(),
    })?;
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let mut h = [0f32; 5];
            for v in h.iter_mut() {
                *v = r.f32("optimizer settings")?;
            }
            let config = AdamWConfig {
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                eps: h[3],
                weight_decay: h[4],
            };
            let step = r.u64("optimizer step")?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for t in &params.tensors {
                m.push(r.f32s(t.len(), "first moment")?);
                v.push(r.f32s(t.len(), "second moment")?);
            }
            Some(AdamW { config, m, v, step })
        }
        f => return Err(r.error(format!("bad optimizer flag {f}"))),
    };
    let step = r.u64("step")?;
    let rng = RngState {
        seed: r.u64("rng seed")?,
        stream: r.u64("rng stream")?,
        word_pos: u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap()),
    };
    let n_meta = r.u32("metadata count")? as usize;
    let mut meta = Vec::new();
    for _ in 0..n_meta {
        let k = r.string("metadata key")?;
        let v = r.string("metadata value")?;
        meta.push((k, v));
    }
    r.finish()?;
    Ok(Checkpoint {
        params,
        optimizer,
        step,
        rng,
        meta,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut cfg = NetConfig::new(4, 3, 4);
        cfg.base_width = 8;
        cfg.groups = 4;
        cfg.embed_dim = 8;
        cfg.depth = 2;
        cfg.attention_at = vec![1, 2];
        let params = ModelParams::init(&cfg, 11).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        opt.step = 3;
        opt.m[0][0] = 0.25;
        opt.v[1][0] = f32::MIN_POSITIVE;
        Checkpoint {
            params,
            optimizer: Some(opt),
            step: 42,
            rng: RngState {
                seed: 9,
                stream: 2,
                word_pos: (1u128 << 70) + 5,
            },
            meta: vec![("level".into(), "2".into()), ("mode".into(), "through".into())],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.meta("level"), Some("2"));
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wfc");
        let mut ck = sample();
        ck.optimizer = None;
        write_checkpoint(&p, &ck).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), ck);
    }
}
