//! `.wfv` volume files.
//!
//! Layout (little-endian): magic `WF3D`, `u32` version, `u32` X, Y, Z, C,
//! `f32` voxel size, `f32` origin[3], one `u8` role tag per channel padded
//! with zeros to a 4-byte boundary, then `X*Y*Z*C` `f32` values, x-major and
//! channel-fastest.

use std::path::Path;

use super::grid::{ChannelRole, GridSpec, VoxelGrid};
use crate::binio::Reader;
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"WF3D";
pub const VOLUME_VERSION: u32 = 1;

/// Size of the fixed header plus padded role tags for `channels` channels.
pub fn header_len(channels: usize) -> usize {
    40 + channels.div_ceil(4) * 4
}

pub fn encode_volume(grid: &VoxelGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let c = grid.channels();
    let mut out = Vec::with_capacity(header_len(c) + grid.data.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&grid.spec.voxel_size.to_le_bytes());
    for o in grid.spec.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend(grid.roles.iter().map(|r| r.tag()));
    out.resize(header_len(c), 0);
    for v in &grid.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let version = r.u32("version")?;
    if version != VOLUME_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let dims_at = r.pos;
    let dims = [r.u32("X")? as usize, r.u32("Y")? as usize, r.u32("Z")? as usize];
    let c = r.u32("channel count")? as usize;
    if dims.iter().any(|&d| d == 0) || c == 0 {
        return Err(Error::Format {
            offset: dims_at as u64,
            message: format!("empty shape {dims:?} x {c}"),
        });
    }
    let voxel_size = r.f32("voxel size")?;
    let origin = [r.f32("origin")?, r.f32("origin")?, r.f32("origin")?];
    let tags_at = r.pos;
    let tags = r.take(c.div_ceil(4) * 4, "channel tags")?;
    let roles = tags[..c]
        .iter()
        .map(|&t| ChannelRole::from_tag(t))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Format {
            offset: tags_at as u64,
            message: "bad channel tag".into(),
        })?;
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|n| n.checked_mul(dims[2]))
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| Error::Format {
            offset: dims_at as u64,
            message: "shape overflows".into(),
        })?;
    let payload_at = r.pos;
    let payload = r.take(count.checked_mul(4).unwrap_or(usize::MAX), "payload")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after payload", bytes.len() - r.pos),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let spec = GridSpec {
        dims,
        voxel_size,
        origin,
    };
    VoxelGrid::from_data(spec, roles, data).map_err(|e| Error::Format {
        offset: payload_at as u64,
        message: e.to_string(),
    })
}

pub fn write_volume(grid: &VoxelGrid, path: &Path) -> Result<()> {
    let bytes = encode_volume(grid)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<VoxelGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> VoxelGrid {
        let spec = GridSpec::new([2, 2, 2], 0.25, [1.0, -2.0, 0.5]).unwrap();
        VoxelGrid::from_data(spec, vec![ChannelRole::Udf], (0..8).map(|i| i as f32 * 0.1).collect()).unwrap()
    }

    #[test]
    fn payload_size_for_2_cubed() {
        let bytes = encode_volume(&small()).unwrap();
        assert_eq!(header_len(1), 44);
        assert_eq!(bytes.len() - header_len(1), 32);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_volume(&small()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_volume(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode_volume(&small()).unwrap();
        match decode_volume(&bytes[..50]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 44),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_volume(&v2), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wfv");
        let g = small();
        write_volume(&g, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), g);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            dims in prop::array::uniform3(1usize..5),
            roles in prop::collection::vec(0u8..8, 1..6),
            seed in any::<u64>(),
            s in 0.01f32..10.0,
        ) {
            let spec = GridSpec::new(dims, s, [seed as f32 * 1e-20, -1.5, 3.25]).unwrap();
            let roles: Vec<_> = roles.into_iter().map(|t| ChannelRole::from_tag(t).unwrap()).collect();
            let n = spec.voxel_count() * roles.len();
            let data: Vec<f32> = (0..n as u64)
                .map(|i| f32::from_bits((seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15)) as u32 & 0x7F7F_FFFF))
                .collect();
            let g = VoxelGrid::from_data(spec, roles, data).unwrap();
            let back = decode_volume(&encode_volume(&g).unwrap()).unwrap();
            prop_assert_eq!(back.spec, g.spec);
            prop_assert_eq!(&back.roles, &g.roles);
            let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = g.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
