//! Dense volumetric containers, masks, tissue label maps, and block tiling.
//!
//! Memory layout is row-major with the channel axis outermost and `z`
//! fastest: element `(c, x, y, z)` lives at `((c * nx + x) * ny + y) * nz + z`.
//! The NIfTI reader/writer transposes to and from the file's `x`-fastest
//! order, so this layout never leaks into files on disk.

use thiserror::Error;

pub type Dims = [usize; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("data length {got} does not match channels*nx*ny*nz = {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("voxel size must be positive, got {0:?}")]
    VoxelSize([f32; 3]),
    #[error("zero-sized dimension in {0:?}")]
    EmptyDims(Dims),
    #[error("dimension mismatch along axis {axis}: {left} vs {right}")]
    AxisMismatch { axis: char, left: usize, right: usize },
    #[error("channel {channel} out of range (volume has {channels})")]
    Channel { channel: usize, channels: usize },
    #[error("invalid block spec: {0}")]
    BlockSpec(String),
    #[error("voxel ({0}, {1}, {2}) is not covered by any block")]
    Uncovered(usize, usize, usize),
    #[error("block at origin {origin:?} with size {size:?} does not start inside {dims:?}")]
    BlockOutside { origin: Dims, size: Dims, dims: Dims },
}

pub(crate) fn check_dims(a: Dims, b: Dims) -> Result<(), VolumeError> {
    for (axis, name) in ['x', 'y', 'z'].iter().enumerate() {
        if a[axis] != b[axis] {
            return Err(VolumeError::AxisMismatch { axis: *name, left: a[axis], right: b[axis] });
        }
    }
    Ok(())
}

#[inline]
fn n_voxels(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
fn spatial_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

/// Multi-channel 3D image of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: Dims,
    voxel_size: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(channels: usize, dims: Dims, voxel_size: [f32; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        if channels == 0 || dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyDims(dims));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0)) {
            return Err(VolumeError::VoxelSize(voxel_size));
        }
        let expected = channels * n_voxels(dims);
        if data.len() != expected {
            return Err(VolumeError::DataLength { expected, got: data.len() });
        }
        Ok(Self { channels, dims, voxel_size, data })
    }

    pub fn zeros(channels: usize, dims: Dims, voxel_size: [f32; 3]) -> Result<Self, VolumeError> {
        Self::new(channels, dims, voxel_size, vec![0.0; channels * n_voxels(dims)])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        self.voxel_size
    }

    pub fn n_voxels(&self) -> usize {
        n_voxels(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        c * self.n_voxels() + spatial_index(self.dims, x, y, z)
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> Result<&[f32], VolumeError> {
        if c >= self.channels {
            return Err(VolumeError::Channel { channel: c, channels: self.channels });
        }
        let n = self.n_voxels();
        Ok(&self.data[c * n..(c + 1) * n])
    }

    pub fn channel_mut(&mut self, c: usize) -> Result<&mut [f32], VolumeError> {
        if c >= self.channels {
            return Err(VolumeError::Channel { channel: c, channels: self.channels });
        }
        let n = self.n_voxels();
        Ok(&mut self.data[c * n..(c + 1) * n])
    }

    /// New single-channel volume holding a copy of channel `c`.
    pub fn extract_channel(&self, c: usize) -> Result<Volume, VolumeError> {
        let data = self.channel(c)?.to_vec();
        Volume::new(1, self.dims, self.voxel_size, data)
    }

    /// Gather the listed channels, in order, into a new volume.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Volume, VolumeError> {
        let mut data = Vec::with_capacity(channels.len() * self.n_voxels());
        for &c in channels {
            data.extend_from_slice(self.channel(c)?);
        }
        Volume::new(channels.len(), self.dims, self.voxel_size, data)
    }

    /// Stack single- or multi-channel volumes of equal dims along the channel axis.
    pub fn stack(parts: &[&Volume]) -> Result<Volume, VolumeError> {
        let first = parts.first().ok_or(VolumeError::EmptyDims([0, 0, 0]))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            check_dims(first.dims, p.dims)?;
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Volume::new(channels, first.dims, first.voxel_size, data)
    }

    /// Copy a `size` sub-box starting at `origin`; reads past the edge are zero.
    pub fn crop_padded(&self, origin: Dims, size: Dims) -> Volume {
        let mut out = vec![0.0f32; self.channels * n_voxels(size)];
        let nz_copy = size[2].min(self.dims[2].saturating_sub(origin[2]));
        for c in 0..self.channels {
            for bx in 0..size[0] {
                let x = origin[0] + bx;
                if x >= self.dims[0] {
                    break;
                }
                for by in 0..size[1] {
                    let y = origin[1] + by;
                    if y >= self.dims[1] {
                        break;
                    }
                    let src = self.index(c, x, y, origin[2]);
                    let dst = c * n_voxels(size) + spatial_index(size, bx, by, 0);
                    out[dst..dst + nz_copy].copy_from_slice(&self.data[src..src + nz_copy]);
                }
            }
        }
        Volume { channels: self.channels, dims: size, voxel_size: self.voxel_size, data: out }
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }
}

/// Boolean voxel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self, VolumeError> {
        if bits.len() != n_voxels(dims) {
            return Err(VolumeError::DataLength { expected: n_voxels(dims), got: bits.len() });
        }
        Ok(Self { dims, bits })
    }

    pub fn filled(dims: Dims, value: bool) -> Self {
        Self { dims, bits: vec![value; n_voxels(dims)] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n_voxels(dims));
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    bits.push(f(x, y, z));
                }
            }
        }
        Self { dims, bits }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[spatial_index(self.dims, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = spatial_index(self.dims, x, y, z);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask, VolumeError> {
        check_dims(self.dims, other.dims)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        Ok(Mask { dims: self.dims, bits })
    }

    pub fn and_not(&self, other: &Mask) -> Result<Mask, VolumeError> {
        check_dims(self.dims, other.dims)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect();
        Ok(Mask { dims: self.dims, bits })
    }

    pub fn crop_padded(&self, origin: Dims, size: Dims) -> Mask {
        Mask::from_fn(size, |bx, by, bz| {
            let (x, y, z) = (origin[0] + bx, origin[1] + by, origin[2] + bz);
            x < self.dims[0] && y < self.dims[1] && z < self.dims[2] && self.get(x, y, z)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    WhiteMatter = 1,
    CorticalGray = 2,
    DeepGray = 3,
    Csf = 4,
    CorpusCallosum = 5,
}

impl Tissue {
    pub const FOREGROUND: [Tissue; 5] =
        [Tissue::WhiteMatter, Tissue::CorticalGray, Tissue::DeepGray, Tissue::Csf, Tissue::CorpusCallosum];

    pub fn from_label(label: u8) -> Option<Tissue> {
        match label {
            0 => Some(Tissue::Background),
            1 => Some(Tissue::WhiteMatter),
            2 => Some(Tissue::CorticalGray),
            3 => Some(Tissue::DeepGray),
            4 => Some(Tissue::Csf),
            5 => Some(Tissue::CorpusCallosum),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Background => "background",
            Tissue::WhiteMatter => "white_matter",
            Tissue::CorticalGray => "cortical_gray",
            Tissue::DeepGray => "deep_gray",
            Tissue::Csf => "csf",
            Tissue::CorpusCallosum => "corpus_callosum",
        }
    }
}

/// Per-voxel tissue class; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueLabels {
    dims: Dims,
    labels: Vec<u8>,
}

impl TissueLabels {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self, VolumeError> {
        if labels.len() != n_voxels(dims) {
            return Err(VolumeError::DataLength { expected: n_voxels(dims), got: labels.len() });
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, tissue: Tissue) -> usize {
        self.labels.iter().filter(|&&l| l == tissue as u8).count()
    }

    /// Nonzero labels as a mask.
    pub fn foreground(&self) -> Mask {
        Mask { dims: self.dims, bits: self.labels.iter().map(|&l| l != 0).collect() }
    }

    pub fn tissue_mask(&self, tissue: Tissue) -> Mask {
        Mask { dims: self.dims, bits: self.labels.iter().map(|&l| l == tissue as u8).collect() }
    }
}

/// Block size and stride for tiling a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub block_size: Dims,
    pub stride: Dims,
}

impl BlockSpec {
    pub fn new(block_size: Dims, stride: Dims) -> Result<Self, VolumeError> {
        for a in 0..3 {
            if stride[a] == 0 || stride[a] > block_size[a] {
                return Err(VolumeError::BlockSpec(format!(
                    "stride {:?} must satisfy 1 <= stride <= block size {:?}",
                    stride, block_size
                )));
            }
        }
        Ok(Self { block_size, stride })
    }

    pub fn cubic(size: usize, stride: usize) -> Result<Self, VolumeError> {
        Self::new([size; 3], [stride; 3])
    }

    /// Block origins in row-major order. The last origin on each axis is
    /// clamped to `n - b` so blocks never hang past the edge; when the axis
    /// is shorter than the block, the single origin 0 is used and the block
    /// is zero-padded.
    pub fn origins(&self, dims: Dims) -> Vec<Dims> {
        let axis: Vec<Vec<usize>> = (0..3)
            .map(|a| axis_origins(dims[a], self.block_size[a], self.stride[a]))
            .collect();
        let mut out = Vec::with_capacity(axis[0].len() * axis[1].len() * axis[2].len());
        for &ox in &axis[0] {
            for &oy in &axis[1] {
                for &oz in &axis[2] {
                    out.push([ox, oy, oz]);
                }
            }
        }
        out
    }
}

fn axis_origins(n: usize, block: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    if block >= n {
        return out;
    }
    let mut o = 0;
    while o + block < n {
        o = (o + stride).min(n - block);
        out.push(o);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub volume: Volume,
    pub origin: Dims,
    pub mask: Mask,
}

/// Tile `vol` into blocks. With `drop_empty`, blocks whose mask is all-false
/// are skipped.
pub fn extract_blocks(vol: &Volume, mask: &Mask, spec: &BlockSpec, drop_empty: bool) -> Result<Vec<Block>, VolumeError> {
    check_dims(vol.dims(), mask.dims())?;
    let mut blocks = Vec::new();
    for origin in spec.origins(vol.dims()) {
        let mask_block = mask.crop_padded(origin, spec.block_size);
        if drop_empty && !mask_block.any() {
            continue;
        }
        blocks.push(Block { volume: vol.crop_padded(origin, spec.block_size), origin, mask: mask_block });
    }
    Ok(blocks)
}

/// Reassemble blocks into a `dims` volume, averaging where blocks overlap.
/// Block voxels that fall outside `dims` (padding) are ignored.
pub fn stitch_blocks(blocks: &[(Volume, Dims)], dims: Dims) -> Result<Volume, VolumeError> {
    let first = blocks.first().ok_or(VolumeError::Uncovered(0, 0, 0))?;
    let channels = first.0.channels();
    let voxel_size = first.0.voxel_size();
    let n = n_voxels(dims);
    let mut sum = vec![0.0f64; channels * n];
    let mut count = vec![0u32; n];
    for (block, origin) in blocks {
        if block.channels() != channels {
            return Err(VolumeError::Channel { channel: block.channels(), channels });
        }
        if (0..3).any(|a| origin[a] >= dims[a]) {
            return Err(VolumeError::BlockOutside { origin: *origin, size: block.dims(), dims });
        }
        let bd = block.dims();
        let ex = bd[0].min(dims[0] - origin[0]);
        let ey = bd[1].min(dims[1] - origin[1]);
        let ez = bd[2].min(dims[2] - origin[2]);
        for bx in 0..ex {
            for by in 0..ey {
                let dst = spatial_index(dims, origin[0] + bx, origin[1] + by, origin[2]);
                for c in 0..channels {
                    let src = block.index(c, bx, by, 0);
                    let row = &block.data()[src..src + ez];
                    for (s, &v) in sum[c * n + dst..c * n + dst + ez].iter_mut().zip(row) {
                        *s += v as f64;
                    }
                }
                for k in &mut count[dst..dst + ez] {
                    *k += 1;
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&k| k == 0) {
        let z = i % dims[2];
        let y = (i / dims[2]) % dims[1];
        let x = i / (dims[1] * dims[2]);
        return Err(VolumeError::Uncovered(x, y, z));
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| (s / count[i % n] as f64) as f32)
        .collect();
    Volume::new(channels, dims, voxel_size, data)
}

/// Values of one channel at the voxels where `mask` is set, in layout order.
pub fn masked_values(vol: &Volume, mask: &Mask, channel: usize) -> Result<Vec<f32>, VolumeError> {
    check_dims(vol.dims(), mask.dims())?;
    let ch = vol.channel(channel)?;
    Ok(ch.iter().zip(mask.bits()).filter(|(_, &m)| m).map(|(&v, _)| v).collect())
}
