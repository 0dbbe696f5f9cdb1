//! Seed derivation and Gaussian volume sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::volume::{ChannelRole, GridSpec, VoxelGrid};

/// Mixes `tag` into `seed` (splitmix64 finalizer) to get an independent stream seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` standard normal samples.
pub fn gaussian(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Grid of independent `N(0, 1)` values.
pub fn gaussian_grid(spec: GridSpec, roles: Vec<ChannelRole>, seed: u64) -> Result<VoxelGrid> {
    let n = spec.voxel_count() * roles.len();
    VoxelGrid::from_data(spec, roles, gaussian(n, seed))
}
