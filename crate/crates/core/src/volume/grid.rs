use crate::error::{Error, Result};

/// Semantic role of one channel of a [`VoxelGrid`].
///
/// The on-disk tag is `0` for the distance field, `1..=3` for RGB and
/// `4 + k` for layout class `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelRole {
    Udf,
    Red,
    Green,
    Blue,
    Layout(u8),
}

impl ChannelRole {
    pub fn tag(self) -> u8 {
        match self {
            ChannelRole::Udf => 0,
            ChannelRole::Red => 1,
            ChannelRole::Green => 2,
            ChannelRole::Blue => 3,
            ChannelRole::Layout(k) => 4 + k,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ChannelRole::Udf,
            1 => ChannelRole::Red,
            2 => ChannelRole::Green,
            3 => ChannelRole::Blue,
            k @ 4..=255 => ChannelRole::Layout(k - 4),
        })
    }

    pub fn is_attribute(self) -> bool {
        matches!(self, ChannelRole::Red | ChannelRole::Green | ChannelRole::Blue)
    }

    pub const RGB: [ChannelRole; 3] = [ChannelRole::Red, ChannelRole::Green, ChannelRole::Blue];
}

/// Placement of a regular isotropic grid in world space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    /// Edge length of one voxel in meters.
    pub voxel_size: f32,
    /// World position of the center of voxel `(0, 0, 0)`.
    pub origin: [f32; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f32, origin: [f32; 3]) -> Result<Self> {
        let spec = GridSpec {
            dims,
            voxel_size,
            origin,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid whose voxels tile the axis-aligned box starting at `min`.
    pub fn covering(min: [f32; 3], dims: [usize; 3], voxel_size: f32) -> Result<Self> {
        let h = voxel_size * 0.5;
        Self::new(dims, voxel_size, [min[0] + h, min[1] + h, min[2] + h])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::param(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::param(format!(
                "voxel size must be positive, got {}",
                self.voxel_size
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::param("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn center(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        [
            self.origin[0] + x as f32 * self.voxel_size,
            self.origin[1] + y as f32 * self.voxel_size,
            self.origin[2] + z as f32 * self.voxel_size,
        ]
    }

    /// Lower corner of the world box tiled by the voxels.
    pub fn world_min(&self) -> [f32; 3] {
        let h = self.voxel_size * 0.5;
        [self.origin[0] - h, self.origin[1] - h, self.origin[2] - h]
    }

    pub fn world_max(&self) -> [f32; 3] {
        let min = self.world_min();
        [
            min[0] + self.dims[0] as f32 * self.voxel_size,
            min[1] + self.dims[1] as f32 * self.voxel_size,
            min[2] + self.dims[2] as f32 * self.voxel_size,
        ]
    }

    /// Sub-grid starting at voxel `offset` with the given dims.
    pub fn sub_grid(&self, offset: [usize; 3], dims: [usize; 3]) -> GridSpec {
        GridSpec {
            dims,
            voxel_size: self.voxel_size,
            origin: self.center(offset[0], offset[1], offset[2]),
        }
    }
}

/// Dense multi-channel voxel volume, x-major with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub roles: Vec<ChannelRole>,
    pub data: Vec<f32>,
}

impl VoxelGrid {
    pub fn filled(spec: GridSpec, roles: Vec<ChannelRole>, value: f32) -> Result<Self> {
        spec.validate()?;
        if roles.is_empty() {
            return Err(Error::param("grid needs at least one channel"));
        }
        let len = spec.voxel_count() * roles.len();
        Ok(VoxelGrid {
            spec,
            roles,
            data: vec![value; len],
        })
    }

    pub fn zeros(spec: GridSpec, roles: Vec<ChannelRole>) -> Result<Self> {
        Self::filled(spec, roles, 0.0)
    }

    pub fn from_data(spec: GridSpec, roles: Vec<ChannelRole>, data: Vec<f32>) -> Result<Self> {
        let grid = VoxelGrid { spec, roles, data };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.roles.is_empty() {
            return Err(Error::param("grid needs at least one channel"));
        }
        let expected = self.spec.voxel_count() * self.roles.len();
        if self.data.len() != expected {
            return Err(Error::shape(format!(
                "data length {} does not match {:?} x {} channels",
                self.data.len(),
                self.spec.dims,
                self.roles.len()
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.spec.dims
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.roles.len()
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        let [_, ny, nz] = self.spec.dims;
        (x * ny + y) * nz + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.voxel_index(x, y, z) * self.channels() + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: f32) {
        let i = self.voxel_index(x, y, z) * self.channels() + c;
        self.data[i] = v;
    }

    pub fn channel_of(&self, role: ChannelRole) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    /// Copies one channel out into a dense scalar array.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.channels()).copied().collect()
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} is {}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Same placement and channels, different values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::from_data(self.spec, self.roles.clone(), data)
    }

    /// Appends the channels of `other` after the channels of `self`.
    pub fn concat_channels(&self, other: &VoxelGrid) -> Result<Self> {
        if self.spec.dims != other.spec.dims {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.spec.dims,
                other.spec.dims
            )));
        }
        let (ca, cb) = (self.channels(), other.channels());
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for (a, b) in self.data.chunks_exact(ca).zip(other.data.chunks_exact(cb)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        let mut roles = self.roles.clone();
        roles.extend_from_slice(&other.roles);
        Self::from_data(self.spec, roles, data)
    }

    /// Keeps the listed channels, in the listed order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let c = self.channels();
        if let Some(&bad) = channels.iter().find(|&&k| k >= c) {
            return Err(Error::shape(format!("channel {bad} out of range for {c} channels")));
        }
        let mut data = Vec::with_capacity(self.spec.voxel_count() * channels.len());
        for voxel in self.data.chunks_exact(c) {
            data.extend(channels.iter().map(|&k| voxel[k]));
        }
        let roles = channels.iter().map(|&k| self.roles[k]).collect();
        Self::from_data(self.spec, roles, data)
    }

    /// Copies the sub-volume at voxel `offset` with extent `dims`.
    pub fn crop(&self, offset: [usize; 3], dims: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if offset[a] + dims[a] > self.spec.dims[a] || dims[a] == 0 {
                return Err(Error::shape(format!(
                    "crop {offset:?}+{dims:?} outside grid {:?}",
                    self.spec.dims
                )));
            }
        }
        let c = self.channels();
        let row = dims[2] * c;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * row);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                let start = self.voxel_index(offset[0] + x, offset[1] + y, offset[2]) * c;
                data.extend_from_slice(&self.data[start..start + row]);
            }
        }
        Self::from_data(self.spec.sub_grid(offset, dims), self.roles.clone(), data)
    }

    /// Writes `patch` into this grid at voxel `offset`.
    pub fn paste(&mut self, patch: &VoxelGrid, offset: [usize; 3]) -> Result<()> {
        let dims = patch.dims();
        if patch.channels() != self.channels() {
            return Err(Error::shape("paste channel count mismatch"));
        }
        for a in 0..3 {
            if offset[a] + dims[a] > self.spec.dims[a] {
                return Err(Error::shape("paste outside grid"));
            }
        }
        let c = self.channels();
        let row = dims[2] * c;
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                let dst = self.voxel_index(offset[0] + x, offset[1] + y, offset[2]) * c;
                let src = patch.voxel_index(x, y, 0) * c;
                self.data[dst..dst + row].copy_from_slice(&patch.data[src..src + row]);
            }
        }
        Ok(())
    }
}

/// One rung of the coarse-to-fine hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec {
    /// 1-based level index; level 0 is the Gaussian source.
    pub index: usize,
    pub voxel_size: f32,
    pub rgb: bool,
}

impl LevelSpec {
    pub fn roles(&self) -> Vec<ChannelRole> {
        let mut roles = vec![ChannelRole::Udf];
        if self.rgb {
            roles.extend_from_slice(&ChannelRole::RGB);
        }
        roles
    }
}

/// Ordered levels with a shared truncation distance.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchySpec {
    pub levels: Vec<LevelSpec>,
    /// Truncation distance in meters.
    pub truncation: f32,
}

impl HierarchySpec {
    pub fn new(levels: Vec<LevelSpec>, truncation: f32) -> Result<Self> {
        let h = HierarchySpec { levels, truncation };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::param("hierarchy needs at least one level"));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::param(format!("truncation must be > 0, got {}", self.truncation)));
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.index != i + 1 {
                return Err(Error::param(format!(
                    "level {} stored at position {i}; indices must be 1..=N",
                    level.index
                )));
            }
            if !(level.voxel_size > 0.0) {
                return Err(Error::param("voxel sizes must be positive"));
            }
        }
        for pair in self.levels.windows(2) {
            let (coarse, fine) = (&pair[0], &pair[1]);
            if fine.voxel_size > coarse.voxel_size {
                return Err(Error::param(format!(
                    "level {} voxel size {} exceeds level {} voxel size {}",
                    fine.index, fine.voxel_size, coarse.index, coarse.voxel_size
                )));
            }
            ratio_of(coarse.voxel_size, fine.voxel_size)?;
            if coarse.rgb && !fine.rgb {
                return Err(Error::param("channel sets must not shrink with level"));
            }
        }
        Ok(())
    }

    pub fn level(&self, index: usize) -> Result<&LevelSpec> {
        index
            .checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .ok_or_else(|| Error::param(format!("no level {index} in a {}-level hierarchy", self.levels.len())))
    }

    /// Integer upsampling factor from level `index - 1` to `index`.
    pub fn ratio(&self, index: usize) -> Result<usize> {
        if index <= 1 {
            return Ok(1);
        }
        let fine = self.level(index)?;
        let coarse = self.level(index - 1)?;
        ratio_of(coarse.voxel_size, fine.voxel_size)
    }

    /// Channels introduced at level `index` that the previous level lacks.
    pub fn new_channels(&self, index: usize) -> Result<usize> {
        let level = self.level(index)?;
        let prev = if index > 1 { self.level(index - 1)?.roles().len() } else { 0 };
        Ok(level.roles().len().saturating_sub(prev))
    }

    /// Grid dims of level `index` given the dims of level 1.
    pub fn dims_at(&self, base: [usize; 3], index: usize) -> Result<[usize; 3]> {
        let mut dims = base;
        for i in 2..=index {
            let r = self.ratio(i)?;
            dims = [dims[0] * r, dims[1] * r, dims[2] * r];
        }
        Ok(dims)
    }
}

fn ratio_of(coarse: f32, fine: f32) -> Result<usize> {
    let r = coarse / fine;
    let rounded = r.round();
    if rounded < 1.0 || (r - rounded).abs() > 1e-4 * rounded {
        return Err(Error::param(format!(
            "voxel size ratio {coarse}/{fine} is not a positive integer"
        )));
    }
    Ok(rounded as usize)
}
