//! Uncompressed single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Supports little-endian files with datatype float32 (16), uint8 (2) and
//! int16 (4), 3D or 4D. The 4th dimension maps to volume channels. Files are
//! written with a 348-byte header, four zero extension bytes, and the payload
//! at offset 352 in the format's `x`-fastest order.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::volume::{Dims, Mask, TissueLabels, Volume, VolumeError};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

/// Byte offsets of the header fields this module reads or writes.
pub mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const REGULAR: usize = 38;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("file too short for a NIfTI-1 header ({0} bytes)")]
    TooShort(usize),
    #[error("big-endian NIfTI files are not supported")]
    BigEndian,
    #[error("sizeof_hdr is {0}, expected 348")]
    BadHeaderSize(i32),
    #[error("bad magic {0:?}, expected \"n+1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensions {0:?}")]
    BadDims([i16; 8]),
    #[error("truncated payload: need {expected} bytes after offset, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("dimension {0} does not fit in a signed 16-bit field")]
    DimOverflow(usize),
    #[error("payload kind does not match the requested image type")]
    WrongKind,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Header fields retained after parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub datatype: i16,
    pub bitpix: i16,
    pub dim: [i16; 8],
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
}

impl NiftiHeader {
    pub fn spatial_dims(&self) -> Dims {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    pub fn channels(&self) -> usize {
        if self.dim[0] == 4 {
            self.dim[4] as usize
        } else {
            1
        }
    }

    pub fn voxel_size(&self) -> [f32; 3] {
        [self.pixdim[1], self.pixdim[2], self.pixdim[3]]
    }
}

/// Voxel payload in this crate's channel-major, `z`-fastest layout.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I16(Vec<i16>),
}

impl VoxelData {
    fn datatype(&self) -> (i16, i16) {
        match self {
            VoxelData::F32(_) => (DT_FLOAT32, 32),
            VoxelData::U8(_) => (DT_UINT8, 8),
            VoxelData::I16(_) => (DT_INT16, 16),
        }
    }

    fn len(&self) -> usize {
        match self {
            VoxelData::F32(v) => v.len(),
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub channels: usize,
    pub dims: Dims,
    pub voxel_size: [f32; 3],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub data: VoxelData,
}

impl NiftiImage {
    pub fn from_volume(vol: &Volume) -> Self {
        Self {
            channels: vol.channels(),
            dims: vol.dims(),
            voxel_size: vol.voxel_size(),
            scl_slope: 1.0,
            scl_inter: 0.0,
            data: VoxelData::F32(vol.data().to_vec()),
        }
    }

    pub fn from_mask(mask: &Mask, voxel_size: [f32; 3]) -> Self {
        Self {
            channels: 1,
            dims: mask.dims(),
            voxel_size,
            scl_slope: 1.0,
            scl_inter: 0.0,
            data: VoxelData::U8(mask.bits().iter().map(|&b| b as u8).collect()),
        }
    }

    pub fn from_labels(labels: &TissueLabels, voxel_size: [f32; 3]) -> Self {
        Self {
            channels: 1,
            dims: labels.dims(),
            voxel_size,
            scl_slope: 1.0,
            scl_inter: 0.0,
            data: VoxelData::U8(labels.labels().to_vec()),
        }
    }

    fn scale(&self) -> Option<(f32, f32)> {
        (self.scl_slope != 0.0 && (self.scl_slope != 1.0 || self.scl_inter != 0.0))
            .then_some((self.scl_slope, self.scl_inter))
    }

    /// Float view of any payload, with intensity scaling applied.
    pub fn to_volume(&self) -> Result<Volume, NiftiError> {
        let raw: Vec<f32> = match &self.data {
            VoxelData::F32(v) => v.clone(),
            VoxelData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f32).collect(),
        };
        let data = match self.scale() {
            Some((m, b)) => raw.into_iter().map(|x| x * m + b).collect(),
            None => raw,
        };
        Ok(Volume::new(self.channels, self.dims, self.voxel_size, data)?)
    }

    /// Nonzero voxels of the first channel.
    pub fn to_mask(&self) -> Result<Mask, NiftiError> {
        let vol = self.to_volume()?;
        let bits = vol.channel(0)?.iter().map(|&v| v != 0.0).collect();
        Ok(Mask::new(self.dims, bits)?)
    }

    pub fn to_labels(&self) -> Result<TissueLabels, NiftiError> {
        match &self.data {
            VoxelData::U8(v) if self.channels == 1 => Ok(TissueLabels::new(self.dims, v.clone())?),
            _ => Err(NiftiError::WrongKind),
        }
    }
}

#[inline]
fn nifti_to_layout(dims: Dims, channels: usize) -> impl Iterator<Item = usize> {
    // yields, for each file-order element, its index in our layout
    let [nx, ny, nz] = dims;
    (0..channels).flat_map(move |c| {
        (0..nz).flat_map(move |z| {
            (0..ny).flat_map(move |y| (0..nx).map(move |x| ((c * nx + x) * ny + y) * nz + z))
        })
    })
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}
fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}
fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn to_i16(n: usize) -> Result<i16, NiftiError> {
    i16::try_from(n).map_err(|_| NiftiError::DimOverflow(n))
}

/// Serialize an image to `.nii` bytes. Output is a pure function of the image.
pub fn encode(img: &NiftiImage) -> Result<Vec<u8>, NiftiError> {
    let n = img.channels * img.dims.iter().product::<usize>();
    if img.data.len() != n {
        return Err(VolumeError::DataLength { expected: n, got: img.data.len() }.into());
    }
    let mut dim = [0i16; 8];
    dim[0] = if img.channels > 1 { 4 } else { 3 };
    for a in 0..3 {
        dim[a + 1] = to_i16(img.dims[a])?;
    }
    dim[4] = to_i16(img.channels)?;
    for d in dim.iter_mut().skip(5) {
        *d = 1;
    }
    let (datatype, bitpix) = img.data.datatype();
    let mut pixdim = [1.0f32; 8];
    pixdim[1..4].copy_from_slice(&img.voxel_size);

    let mut out = vec![0u8; VOX_OFFSET + n * (bitpix as usize / 8)];
    put_i32(&mut out, offsets::SIZEOF_HDR, HEADER_SIZE as i32);
    out[offsets::REGULAR] = b'r';
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut out, offsets::DIM + 2 * i, *d);
    }
    put_i16(&mut out, offsets::DATATYPE, datatype);
    put_i16(&mut out, offsets::BITPIX, bitpix);
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut out, offsets::PIXDIM + 4 * i, *p);
    }
    put_f32(&mut out, offsets::VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut out, offsets::SCL_SLOPE, img.scl_slope);
    put_f32(&mut out, offsets::SCL_INTER, img.scl_inter);
    out[offsets::XYZT_UNITS] = 2; // millimetres
    put_i16(&mut out, offsets::QFORM_CODE, 0);
    put_i16(&mut out, offsets::SFORM_CODE, 1);
    for (row, off) in [offsets::SROW_X, offsets::SROW_Y, offsets::SROW_Z].into_iter().enumerate() {
        put_f32(&mut out, off + 4 * row, img.voxel_size[row]);
    }
    out[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&MAGIC);

    let payload = &mut out[VOX_OFFSET..];
    let order = nifti_to_layout(img.dims, img.channels);
    match &img.data {
        VoxelData::F32(v) => {
            for (k, src) in order.enumerate() {
                payload[4 * k..4 * k + 4].copy_from_slice(&v[src].to_le_bytes());
            }
        }
        VoxelData::U8(v) => {
            for (k, src) in order.enumerate() {
                payload[k] = v[src];
            }
        }
        VoxelData::I16(v) => {
            for (k, src) in order.enumerate() {
                payload[2 * k..2 * k + 2].copy_from_slice(&v[src].to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TooShort(bytes.len()));
    }
    let sizeof_hdr = get_i32(bytes, offsets::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(NiftiError::BigEndian);
        }
        return Err(NiftiError::BadHeaderSize(sizeof_hdr));
    }
    let magic: [u8; 4] = bytes[offsets::MAGIC..offsets::MAGIC + 4].try_into().unwrap();
    if magic != MAGIC {
        return Err(NiftiError::BadMagic(magic));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = get_i16(bytes, offsets::DIM + 2 * i);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = get_f32(bytes, offsets::PIXDIM + 4 * i);
    }
    let rank = dim[0];
    if !(rank == 3 || rank == 4) || dim[1..=rank as usize].iter().any(|&d| d < 1) {
        return Err(NiftiError::BadDims(dim));
    }
    Ok(NiftiHeader {
        sizeof_hdr,
        datatype: get_i16(bytes, offsets::DATATYPE),
        bitpix: get_i16(bytes, offsets::BITPIX),
        dim,
        pixdim,
        vox_offset: get_f32(bytes, offsets::VOX_OFFSET),
        scl_slope: get_f32(bytes, offsets::SCL_SLOPE),
        scl_inter: get_f32(bytes, offsets::SCL_INTER),
        magic,
    })
}

/// Parse `.nii` bytes.
pub fn decode(bytes: &[u8]) -> Result<(NiftiImage, NiftiHeader), NiftiError> {
    let hdr = parse_header(bytes)?;
    let width = match hdr.datatype {
        DT_FLOAT32 => 4,
        DT_UINT8 => 1,
        DT_INT16 => 2,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let dims = hdr.spatial_dims();
    let channels = hdr.channels();
    let n = channels * dims.iter().product::<usize>();
    let offset = (hdr.vox_offset as usize).max(HEADER_SIZE);
    let available = bytes.len().saturating_sub(offset);
    if available < n * width {
        return Err(NiftiError::Truncated { expected: n * width, got: available });
    }
    let payload = &bytes[offset..offset + n * width];
    let order = nifti_to_layout(dims, channels);
    let data = match hdr.datatype {
        DT_FLOAT32 => {
            let mut v = vec![0f32; n];
            for (k, dst) in order.enumerate() {
                v[dst] = get_f32(payload, 4 * k);
            }
            VoxelData::F32(v)
        }
        DT_UINT8 => {
            let mut v = vec![0u8; n];
            for (k, dst) in order.enumerate() {
                v[dst] = payload[k];
            }
            VoxelData::U8(v)
        }
        _ => {
            let mut v = vec![0i16; n];
            for (k, dst) in order.enumerate() {
                v[dst] = get_i16(payload, 2 * k);
            }
            VoxelData::I16(v)
        }
    };
    let img = NiftiImage {
        channels,
        dims,
        voxel_size: hdr.voxel_size(),
        scl_slope: hdr.scl_slope,
        scl_inter: hdr.scl_inter,
        data,
    };
    Ok((img, hdr))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io { path: path.display().to_string(), source }
}

/// Write an image to `path`; returns the number of bytes written.
pub fn write_nifti(path: impl AsRef<Path>, img: &NiftiImage) -> Result<usize, NiftiError> {
    let bytes = encode(img)?;
    fs::write(path.as_ref(), &bytes).map_err(io_err(path.as_ref()))?;
    Ok(bytes.len())
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<(NiftiImage, NiftiHeader), NiftiError> {
    let bytes = fs::read(path.as_ref()).map_err(io_err(path.as_ref()))?;
    decode(&bytes)
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<usize, NiftiError> {
    write_nifti(path, &NiftiImage::from_volume(vol))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, NiftiError> {
    read_nifti(path)?.0.to_volume()
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask, voxel_size: [f32; 3]) -> Result<usize, NiftiError> {
    write_nifti(path, &NiftiImage::from_mask(mask, voxel_size))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask, NiftiError> {
    read_nifti(path)?.0.to_mask()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &TissueLabels, voxel_size: [f32; 3]) -> Result<usize, NiftiError> {
    write_nifti(path, &NiftiImage::from_labels(labels, voxel_size))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<TissueLabels, NiftiError> {
    read_nifti(path)?.0.to_labels()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(channels: usize, dims: Dims) -> Volume {
        let n = channels * dims.iter().product::<usize>();
        let data = (0..n).map(|i| (i as f32 * 0.37).sin() * 100.0).collect();
        Volume::new(channels, dims, [1.25, 1.25, 2.0], data).unwrap()
    }

    #[test]
    fn header_field_offsets_and_widths() {
        // (name, offset, width) from the NIfTI-1 header definition
        let table: &[(&str, usize, usize)] = &[
            ("sizeof_hdr", 0, 4),
            ("regular", 38, 1),
            ("dim", 40, 16),
            ("datatype", 70, 2),
            ("bitpix", 72, 2),
            ("pixdim", 76, 32),
            ("vox_offset", 108, 4),
            ("scl_slope", 112, 4),
            ("scl_inter", 116, 4),
            ("xyzt_units", 123, 1),
            ("qform_code", 252, 2),
            ("sform_code", 254, 2),
            ("srow_x", 280, 16),
            ("srow_y", 296, 16),
            ("srow_z", 312, 16),
            ("magic", 344, 4),
        ];
        let ours = [
            offsets::SIZEOF_HDR,
            offsets::REGULAR,
            offsets::DIM,
            offsets::DATATYPE,
            offsets::BITPIX,
            offsets::PIXDIM,
            offsets::VOX_OFFSET,
            offsets::SCL_SLOPE,
            offsets::SCL_INTER,
            offsets::XYZT_UNITS,
            offsets::QFORM_CODE,
            offsets::SFORM_CODE,
            offsets::SROW_X,
            offsets::SROW_Y,
            offsets::SROW_Z,
            offsets::MAGIC,
        ];
        for ((name, off, width), ours) in table.iter().zip(ours) {
            assert_eq!(*off, ours, "{name}");
            assert!(off + width <= HEADER_SIZE, "{name}");
        }
        // consecutive fields must not overlap
        for w in table.windows(2) {
            assert!(w[0].1 + w[0].2 <= w[1].1, "{} overlaps {}", w[0].0, w[1].0);
        }
    }

    #[test]
    fn single_voxel_file_layout() {
        let v = Volume::new(1, [1, 1, 1], [1.0; 3], vec![42.5]).unwrap();
        let bytes = encode(&NiftiImage::from_volume(&v)).unwrap();
        assert_eq!(bytes.len(), 352 + 4);
        assert_eq!(i32::from_le_bytes(bytes[0..4].try_into().unwrap()), 348);
        assert_eq!(&bytes[344..348], &[0x6E, 0x2B, 0x31, 0x00]);
        assert_eq!(&bytes[348..352], &[0, 0, 0, 0]);
        assert_eq!(f32::from_le_bytes(bytes[352..356].try_into().unwrap()), 42.5);
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let v = sample(3, [4, 5, 6]);
        let bytes = encode(&NiftiImage::from_volume(&v)).unwrap();
        let (img, hdr) = decode(&bytes).unwrap();
        assert_eq!(hdr.dim[0], 4);
        assert_eq!(hdr.vox_offset, 352.0);
        let back = img.to_volume().unwrap();
        assert_eq!(back.dims(), v.dims());
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(encode(&img).unwrap(), bytes);
    }

    #[test]
    fn file_is_x_fastest() {
        let mut v = Volume::zeros(1, [2, 3, 1], [1.0; 3]).unwrap();
        v.set(0, 1, 0, 0, 7.0);
        let bytes = encode(&NiftiImage::from_volume(&v)).unwrap();
        assert_eq!(f32::from_le_bytes(bytes[356..360].try_into().unwrap()), 7.0);
    }

    #[test]
    fn byte_and_short_payloads_double_round_trip() {
        let labels = TissueLabels::new([3, 2, 2], vec![0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]).unwrap();
        let b1 = encode(&NiftiImage::from_labels(&labels, [1.0; 3])).unwrap();
        let (img, _) = decode(&b1).unwrap();
        assert_eq!(img.to_labels().unwrap(), labels);
        assert_eq!(encode(&img).unwrap(), b1);

        let shorts = NiftiImage {
            channels: 1,
            dims: [2, 2, 1],
            voxel_size: [1.0; 3],
            scl_slope: 1.0,
            scl_inter: 0.0,
            data: VoxelData::I16(vec![-3, 0, 7, 32000]),
        };
        let b2 = encode(&shorts).unwrap();
        let (img2, _) = decode(&b2).unwrap();
        assert_eq!(img2, shorts);
        assert_eq!(encode(&img2).unwrap(), b2);
    }

    #[test]
    fn slope_and_intercept_applied_on_read() {
        let img = NiftiImage {
            channels: 1,
            dims: [2, 1, 1],
            voxel_size: [1.0; 3],
            scl_slope: 2.0,
            scl_inter: 1.0,
            data: VoxelData::I16(vec![3, -1]),
        };
        let (back, _) = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back.to_volume().unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn rejects_float64_datatype() {
        let v = sample(1, [2, 2, 2]);
        let mut bytes = encode(&NiftiImage::from_volume(&v)).unwrap();
        bytes[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(NiftiError::UnsupportedDatatype(64))));
    }

    #[test]
    fn distinct_errors_for_magic_truncation_endianness() {
        let v = sample(1, [2, 2, 2]);
        let good = encode(&NiftiImage::from_volume(&v)).unwrap();

        let mut bad = good.clone();
        bad[344] = b'x';
        assert!(matches!(decode(&bad), Err(NiftiError::BadMagic(_))));

        assert!(matches!(decode(&good[..good.len() - 1]), Err(NiftiError::Truncated { .. })));
        assert!(matches!(decode(&good[..100]), Err(NiftiError::TooShort(100))));

        let mut be = good.clone();
        be[0..4].copy_from_slice(&348i32.to_be_bytes());
        assert!(matches!(decode(&be), Err(NiftiError::BigEndian)));
    }

    #[test]
    fn dimension_overflow_is_rejected() {
        let img = NiftiImage {
            channels: 1,
            dims: [40000, 1, 1],
            voxel_size: [1.0; 3],
            scl_slope: 1.0,
            scl_inter: 0.0,
            data: VoxelData::U8(vec![0; 40000]),
        };
        assert!(matches!(encode(&img), Err(NiftiError::DimOverflow(40000))));
    }

    #[test]
    fn write_and_read_files() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample(2, [3, 3, 3]);
        let p = dir.path().join("v.nii");
        let n = write_volume(&p, &v).unwrap();
        assert_eq!(n, 352 + 2 * 27 * 4);
        assert_eq!(read_volume(&p).unwrap(), v);
        let m = Mask::from_fn([3, 3, 3], |x, _, z| x == z);
        write_mask(dir.path().join("m.nii"), &m, [1.0; 3]).unwrap();
        assert_eq!(read_mask(dir.path().join("m.nii")).unwrap(), m);
        assert!(matches!(read_volume(dir.path().join("missing.nii")), Err(NiftiError::Io { .. })));
    }
}
