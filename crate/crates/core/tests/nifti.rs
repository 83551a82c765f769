use mcdqmri_core::nifti::*;
use mcdqmri_core::volume::{Mask, TissueLabels, Volume};

fn ramp(channels: usize, dims: [usize; 3]) -> Volume {
    let n = channels * dims.iter().product::<usize>();
    Volume::new(channels, dims, [1.25, 1.5, 2.0], (0..n).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap()
}

#[test]
fn float_volume_round_trips_exactly() {
    let v = ramp(7, [4, 5, 6]);
    let bytes = encode(&NiftiImage::from_volume(&v)).unwrap();
    assert_eq!(&bytes[0..4], &348i32.to_le_bytes());
    assert_eq!(&bytes[offsets::MAGIC..offsets::MAGIC + 4], b"n+1\0");
    let (img, hdr) = decode(&bytes).unwrap();
    assert_eq!(hdr.dim[..5], [4, 4, 5, 6, 7]);
    assert_eq!(hdr.datatype, DT_FLOAT32);
    assert_eq!(hdr.bitpix, 32);
    assert_eq!(hdr.vox_offset, 352.0);
    assert_eq!(img.to_volume().unwrap(), v);
}

#[test]
fn minimal_file_size() {
    let v = Volume::new(1, [1, 1, 1], [1.0; 3], vec![2.5]).unwrap();
    let bytes = encode(&NiftiImage::from_volume(&v)).unwrap();
    assert_eq!(bytes.len(), 356);
    assert_eq!(&bytes[352..356], &2.5f32.to_le_bytes());
}

#[test]
fn header_fields_sit_at_their_offsets() {
    let v = ramp(1, [3, 2, 4]);
    let bytes = encode(&NiftiImage::from_volume(&v)).unwrap();
    let i16_at = |o: usize| i16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    assert_eq!(i16_at(offsets::DIM), 3);
    assert_eq!([i16_at(offsets::DIM + 2), i16_at(offsets::DIM + 4), i16_at(offsets::DIM + 6)], [3, 2, 4]);
    assert_eq!(i16_at(offsets::DATATYPE), 16);
    assert_eq!(i16_at(offsets::BITPIX), 32);
    assert_eq!([f32_at(offsets::PIXDIM + 4), f32_at(offsets::PIXDIM + 8), f32_at(offsets::PIXDIM + 12)], [1.25, 1.5, 2.0]);
    assert_eq!(f32_at(offsets::VOX_OFFSET), 352.0);
    assert_eq!(f32_at(offsets::SCL_SLOPE), 1.0);
    assert_eq!(f32_at(offsets::SCL_INTER), 0.0);
    assert_eq!(i16_at(offsets::SFORM_CODE), 1);
    assert_eq!(f32_at(offsets::SROW_X), 1.25);
    assert_eq!(f32_at(offsets::SROW_Y + 4), 1.5);
    assert_eq!(f32_at(offsets::SROW_Z + 8), 2.0);
}

#[test]
fn payload_is_x_fastest_on_disk() {
    let v = ramp(1, [2, 3, 2]);
    let bytes = encode(&NiftiImage::from_volume(&v)).unwrap();
    let at = |k: usize| f32::from_le_bytes(bytes[352 + 4 * k..356 + 4 * k].try_into().unwrap());
    assert_eq!(at(0), v.get(0, 0, 0, 0));
    assert_eq!(at(1), v.get(0, 1, 0, 0));
    assert_eq!(at(2), v.get(0, 0, 1, 0));
    assert_eq!(at(6), v.get(0, 0, 0, 1));
}

#[test]
fn double_round_trip_is_byte_identical() {
    let dims = [3, 4, 5];
    let mask = Mask::from_fn(dims, |x, y, z| (x * y + z) % 3 == 0);
    let labels = TissueLabels::new(dims, (0..60).map(|i| (i % 6) as u8).collect()).unwrap();
    let images = [
        NiftiImage::from_volume(&ramp(3, dims)),
        NiftiImage::from_mask(&mask, [1.25; 3]),
        NiftiImage::from_labels(&labels, [1.25; 3]),
        NiftiImage {
            channels: 1,
            dims,
            voxel_size: [1.0; 3],
            scl_slope: 1.0,
            scl_inter: 0.0,
            data: VoxelData::I16((0..60).map(|i| i * 100 - 3000).collect()),
        },
    ];
    for img in images {
        let b1 = encode(&img).unwrap();
        let (back, _) = decode(&b1).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode(&back).unwrap(), b1);
    }
    let (m, _) = decode(&encode(&NiftiImage::from_mask(&mask, [1.25; 3])).unwrap()).unwrap();
    assert_eq!(m.to_mask().unwrap(), mask);
    let (l, _) = decode(&encode(&NiftiImage::from_labels(&labels, [1.25; 3])).unwrap()).unwrap();
    assert_eq!(l.to_labels().unwrap(), labels);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = ramp(2, [3, 3, 3]);
    let p = dir.path().join("v.nii");
    let n = write_volume(&p, &v).unwrap();
    assert_eq!(n, 352 + 4 * 54);
    assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, n);
    assert_eq!(read_volume(&p).unwrap(), v);
    assert!(matches!(read_volume(dir.path().join("missing.nii")), Err(NiftiError::Io { .. })));
}

#[test]
fn malformed_inputs_are_rejected() {
    let v = ramp(1, [2, 2, 2]);
    let good = encode(&NiftiImage::from_volume(&v)).unwrap();

    assert!(matches!(decode(&good[..100]), Err(NiftiError::TooShort(100))));
    assert!(matches!(decode(&good[..good.len() - 1]), Err(NiftiError::Truncated { expected: 32, got: 31 })));

    let mut bad = good.clone();
    bad[offsets::DATATYPE..offsets::DATATYPE + 2].copy_from_slice(&64i16.to_le_bytes());
    assert!(matches!(decode(&bad), Err(NiftiError::UnsupportedDatatype(64))));

    let mut bad = good.clone();
    bad[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"ni1\0");
    assert!(matches!(decode(&bad), Err(NiftiError::BadMagic(_))));

    let mut bad = good.clone();
    bad[0..4].copy_from_slice(&348i32.to_be_bytes());
    assert!(matches!(decode(&bad), Err(NiftiError::BigEndian)));

    let mut bad = good.clone();
    bad[0..4].copy_from_slice(&100i32.to_le_bytes());
    assert!(matches!(decode(&bad), Err(NiftiError::BadHeaderSize(100))));

    let mut bad = good;
    bad[offsets::DIM..offsets::DIM + 2].copy_from_slice(&2i16.to_le_bytes());
    assert!(matches!(decode(&bad), Err(NiftiError::BadDims(_))));
}

#[test]
fn wrong_kind_conversions_fail() {
    let img = NiftiImage::from_volume(&ramp(1, [2, 2, 2]));
    assert!(matches!(img.to_labels(), Err(NiftiError::WrongKind)));
    assert_eq!(img.to_mask().unwrap().count(), 8);
    let too_big = Volume::zeros(1, [40000, 1, 1], [1.0; 3]).unwrap();
    assert!(matches!(encode(&NiftiImage::from_volume(&too_big)), Err(NiftiError::DimOverflow(40000))));
}
