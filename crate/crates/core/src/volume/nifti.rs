//! Single-file NIfTI-1 (`.nii`) reader and writer.

use std::fs;
use std::path::Path;

use super::{Volume, VolumeError};

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

#[derive(Clone, Copy)]
struct Endian {
    little: bool,
}

impl Endian {
    fn i16(self, b: &[u8], off: usize) -> i16 {
        let a = [b[off], b[off + 1]];
        if self.little {
            i16::from_le_bytes(a)
        } else {
            i16::from_be_bytes(a)
        }
    }

    fn i32(self, b: &[u8], off: usize) -> i32 {
        let a = [b[off], b[off + 1], b[off + 2], b[off + 3]];
        if self.little {
            i32::from_le_bytes(a)
        } else {
            i32::from_be_bytes(a)
        }
    }

    fn f32(self, b: &[u8], off: usize) -> f32 {
        f32::from_bits(self.i32(b, off) as u32)
    }

    fn f64(self, b: &[u8], off: usize) -> f64 {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[off..off + 8]);
        if self.little {
            f64::from_le_bytes(a)
        } else {
            f64::from_be_bytes(a)
        }
    }
}

/// Read a `.nii` file, applying `scl_slope`/`scl_inter` when the slope is
/// non-zero.
pub fn read_nifti(path: &Path) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
    parse_nifti(&bytes).map(|v| v.with_name(path.display().to_string()))
}

pub(crate) fn parse_nifti(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::TruncatedPayload {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic = [bytes[344], bytes[345], bytes[346], bytes[347]];
    if &magic != b"n+1\0" {
        return Err(VolumeError::BadMagic(magic));
    }
    let little = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == HEADER_LEN as i32;
    let e = Endian { little };

    let ndim = e.i16(bytes, 40);
    let raw_dims: Vec<i64> = (0..8).map(|i| e.i16(bytes, 40 + 2 * i) as i64).collect();
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::UnsupportedDims(raw_dims));
    }
    let mut dims = [1usize; 3];
    for (i, d) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let v = raw_dims[i + 1];
        if v < 1 {
            return Err(VolumeError::UnsupportedDims(raw_dims));
        }
        *d = v as usize;
    }
    if raw_dims[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(VolumeError::UnsupportedDims(raw_dims));
    }

    let datatype = e.i16(bytes, 70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(VolumeError::UnsupportedDatatype(other)),
    };
    let mut spacing = [1.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let v = e.f32(bytes, 80 + 4 * i);
        if v.is_finite() && v > 0.0 {
            *s = v;
        }
    }
    let vox_offset = e.f32(bytes, 108);
    let offset = if vox_offset.is_finite() && vox_offset >= HEADER_LEN as f32 {
        vox_offset as usize
    } else {
        DATA_OFFSET
    };
    let slope = e.f32(bytes, 112);
    let inter = e.f32(bytes, 116);
    let (slope, inter) = if slope != 0.0 && slope.is_finite() {
        (
            slope as f64,
            if inter.is_finite() { inter as f64 } else { 0.0 },
        )
    } else {
        (1.0, 0.0)
    };
    let identity = slope == 1.0 && inter == 0.0;

    let n: usize = dims.iter().product();
    let needed = offset + n * width;
    if bytes.len() < needed {
        return Err(VolumeError::TruncatedPayload {
            expected: needed,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[offset..needed];
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = i * width;
        let raw = match datatype {
            DT_UINT8 => payload[off] as f64,
            DT_INT16 => e.i16(payload, off) as f64,
            DT_FLOAT32 => e.f32(payload, off) as f64,
            _ => e.f64(payload, off),
        };
        // the identity scaling is skipped so stored values (−0 included)
        // come back bit-for-bit
        let v = if identity {
            raw as f32
        } else {
            (raw * slope + inter) as f32
        };
        if !v.is_finite() {
            return Err(VolumeError::NonFiniteVoxel(i));
        }
        data.push(v);
    }
    Volume::new(dims, spacing, data)
}

/// Write a volume as little-endian float32 NIfTI-1.
pub fn write_nifti(path: &Path, volume: &Volume) -> Result<(), VolumeError> {
    fs::write(path, encode_nifti(volume)).map_err(|e| VolumeError::io(path, e))
}

pub(crate) fn encode_nifti(volume: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 =
        |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    h[38] = b'r';
    let dims = volume.dims();
    put_i16(&mut h, 40, 3);
    for (i, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in 3..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 76, 1.0);
    for (i, &s) in volume.spacing().iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, s);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    h[344..348].copy_from_slice(b"n+1\0");

    h.reserve(volume.len() * 4);
    for &v in volume.data() {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        Volume::new(
            [3, 2, 2],
            [1.0, 1.5, 2.0],
            (0..12).map(|i| i as f32 * 0.5 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let v = sample();
        let back = parse_nifti(&encode_nifti(&v)).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), v.spacing());
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_nifti(&sample());
        bytes[344] = b'x';
        assert!(matches!(parse_nifti(&bytes), Err(VolumeError::BadMagic(_))));
    }

    #[test]
    fn truncated() {
        let bytes = encode_nifti(&sample());
        let r = parse_nifti(&bytes[..bytes.len() - 3]);
        assert!(matches!(r, Err(VolumeError::TruncatedPayload { .. })));
    }

    #[test]
    fn unsupported_datatype() {
        let mut bytes = encode_nifti(&sample());
        bytes[70..72].copy_from_slice(&128i16.to_le_bytes());
        assert!(matches!(
            parse_nifti(&bytes),
            Err(VolumeError::UnsupportedDatatype(128))
        ));
    }

    #[test]
    fn int16_with_scaling() {
        let mut bytes = encode_nifti(&Volume::filled([2, 1, 1], 0.0));
        bytes.truncate(DATA_OFFSET);
        bytes[70..72].copy_from_slice(&DT_INT16.to_le_bytes());
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        bytes.extend_from_slice(&7i16.to_le_bytes());
        bytes.extend_from_slice(&(-3i16).to_le_bytes());
        let v = parse_nifti(&bytes).unwrap();
        assert_eq!(v.data(), &[13.0, -7.0]);
    }

    #[test]
    fn non_finite_voxel() {
        let mut bytes = encode_nifti(&sample());
        bytes[DATA_OFFSET + 4..DATA_OFFSET + 8].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            parse_nifti(&bytes),
            Err(VolumeError::NonFiniteVoxel(1))
        ));
    }
}
