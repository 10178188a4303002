//! Read-only NIfTI-1 import (single-file `.nii` or `.hdr`/`.img` pairs, uncompressed).

use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

const HEADER_LEN: usize = 348;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NiftiHeader {
    pub little_endian: bool,
    pub dims: [usize; 3],
    pub datatype: i16,
    pub spacing: [f64; 3],
    pub vox_offset: f64,
    pub scl_slope: f64,
    pub scl_inter: f64,
    /// True for `n+1` (data in the same file), false for `ni1` (separate `.img`).
    pub single_file: bool,
}

fn read_i16(le: bool, b: &[u8]) -> i16 {
    if le {
        LittleEndian::read_i16(b)
    } else {
        BigEndian::read_i16(b)
    }
}

fn read_f32(le: bool, b: &[u8]) -> f32 {
    if le {
        LittleEndian::read_f32(b)
    } else {
        BigEndian::read_f32(b)
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let le = if LittleEndian::read_i32(&bytes[0..4]) == 348 {
        true
    } else if BigEndian::read_i32(&bytes[0..4]) == 348 {
        false
    } else {
        return Err(Error::BadMagic { what: "NIfTI-1 header", expected: "sizeof_hdr = 348" });
    };
    let single_file = match &bytes[344..348] {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(Error::BadMagic { what: "NIfTI-1 header", expected: "n+1 or ni1" }),
    };
    let dim: Vec<i16> = (0..8).map(|i| read_i16(le, &bytes[40 + 2 * i..42 + 2 * i])).collect();
    if dim[0] != 3 {
        return Err(Error::UnsupportedRank(dim[0] as i64));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::Corrupt(format!("NIfTI dims {:?} not positive", &dim[1..4])));
    }
    let datatype = read_i16(le, &bytes[70..72]);
    if !matches!(datatype, 2 | 4 | 16) {
        return Err(Error::UnsupportedDtype(datatype as i32));
    }
    let pix: Vec<f64> = (0..8).map(|i| read_f32(le, &bytes[76 + 4 * i..80 + 4 * i]) as f64).collect();
    let spacing = [pix[1].abs(), pix[2].abs(), pix[3].abs()];
    Ok(NiftiHeader {
        little_endian: le,
        dims: [dim[1] as usize, dim[2] as usize, dim[3] as usize],
        datatype,
        spacing,
        vox_offset: read_f32(le, &bytes[108..112]) as f64,
        scl_slope: read_f32(le, &bytes[112..116]) as f64,
        scl_inter: read_f32(le, &bytes[116..120]) as f64,
        single_file,
    })
}

/// Decodes samples and applies `value * scl_slope + scl_inter` when the slope is nonzero.
pub fn decode(h: &NiftiHeader, payload: &[u8]) -> Result<Volume> {
    let n = h.dims.iter().product::<usize>();
    let width = match h.datatype {
        2 => 1,
        4 => 2,
        _ => 4,
    };
    if payload.len() < n * width {
        return Err(Error::Truncated { expected: n * width, found: payload.len() });
    }
    let le = h.little_endian;
    let raw: Vec<f64> = (0..n)
        .map(|i| match h.datatype {
            2 => payload[i] as f64,
            4 => read_i16(le, &payload[2 * i..2 * i + 2]) as f64,
            _ => read_f32(le, &payload[4 * i..4 * i + 4]) as f64,
        })
        .collect();
    let scaled = if h.scl_slope != 0.0 && h.scl_slope.is_finite() {
        let inter = if h.scl_inter.is_finite() { h.scl_inter } else { 0.0 };
        raw.iter().map(|v| v * h.scl_slope + inter).collect()
    } else {
        raw
    };
    let spacing = h.spacing.map(|s| if s > 0.0 { s } else { 1.0 });
    Volume::new(Grid::new(h.dims, spacing)?, scaled)
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes)?;
    if h.single_file {
        let off = h.vox_offset.max(HEADER_LEN as f64) as usize;
        if off > bytes.len() {
            return Err(Error::Truncated { expected: off, found: bytes.len() });
        }
        decode(&h, &bytes[off..])
    } else {
        let img = path.with_extension("img");
        let data = std::fs::read(&img).map_err(|e| Error::io(&img, e))?;
        let off = h.vox_offset.max(0.0) as usize;
        if off > data.len() {
            return Err(Error::Truncated { expected: off, found: data.len() });
        }
        decode(&h, &data[off..])
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use byteorder::WriteBytesExt;

    /// Builds a single-file NIfTI-1 image.
    pub(crate) fn craft(
        le: bool,
        dim0: i16,
        dims: [i16; 3],
        datatype: i16,
        spacing: [f32; 3],
        slope: f32,
        inter: f32,
        payload: &[u8],
    ) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        let put_i32 = |b: &mut [u8], v: i32| if le { LittleEndian::write_i32(b, v) } else { BigEndian::write_i32(b, v) };
        let put_i16 = |b: &mut [u8], v: i16| if le { LittleEndian::write_i16(b, v) } else { BigEndian::write_i16(b, v) };
        let put_f32 = |b: &mut [u8], v: f32| if le { LittleEndian::write_f32(b, v) } else { BigEndian::write_f32(b, v) };
        put_i32(&mut h[0..4], 348);
        put_i16(&mut h[40..42], dim0);
        for (i, d) in dims.iter().enumerate() {
            put_i16(&mut h[42 + 2 * i..44 + 2 * i], *d);
        }
        put_i16(&mut h[70..72], datatype);
        put_i16(&mut h[72..74], match datatype { 2 => 8, 4 => 16, _ => 32 });
        put_f32(&mut h[76..80], 1.0);
        for (i, s) in spacing.iter().enumerate() {
            put_f32(&mut h[80 + 4 * i..84 + 4 * i], *s);
        }
        put_f32(&mut h[108..112], 352.0);
        put_f32(&mut h[112..116], slope);
        put_f32(&mut h[116..120], inter);
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    fn write(bytes: &[u8]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.nii");
        std::fs::write(&p, bytes).unwrap();
        (dir, p)
    }

    #[test]
    fn applies_slope_and_intercept() {
        let (_d, p) = write(&craft(true, 3, [1, 1, 1], 2, [1.0; 3], 2.0, 1.0, &[3]));
        assert_eq!(read_nifti(&p).unwrap().data(), &[7.0]);
    }

    #[test]
    fn zero_slope_means_raw_values() {
        let mut payload = Vec::new();
        for v in [-5i16, 0, 300, 12] {
            payload.write_i16::<LittleEndian>(v).unwrap();
        }
        let (_d, p) = write(&craft(true, 3, [2, 2, 1], 4, [0.5, 0.75, 2.0], 0.0, 9.0, &payload));
        let v = read_nifti(&p).unwrap();
        assert_eq!(v.data(), &[-5.0, 0.0, 300.0, 12.0]);
        assert_eq!(v.spacing(), [0.5, 0.75, 2.0]);
    }

    #[test]
    fn big_endian_float() {
        let mut payload = Vec::new();
        for v in [1.5f32, -2.0] {
            payload.write_f32::<BigEndian>(v).unwrap();
        }
        let (_d, p) = write(&craft(false, 3, [2, 1, 1], 16, [1.0; 3], 0.5, -1.0, &payload));
        assert_eq!(read_nifti(&p).unwrap().data(), &[-0.25, -2.0]);
    }

    #[test]
    fn rejects_rank_dtype_and_truncation() {
        let (_d, p) = write(&craft(true, 4, [1, 1, 1], 2, [1.0; 3], 0.0, 0.0, &[1]));
        assert!(matches!(read_nifti(&p), Err(Error::UnsupportedRank(4))));
        let (_d, p) = write(&craft(true, 3, [1, 1, 1], 64, [1.0; 3], 0.0, 0.0, &[0; 8]));
        assert!(matches!(read_nifti(&p), Err(Error::UnsupportedDtype(64))));
        let (_d, p) = write(&craft(true, 3, [2, 2, 2], 2, [1.0; 3], 0.0, 0.0, &[0; 5]));
        assert!(matches!(read_nifti(&p), Err(Error::Truncated { .. })));
        let (_d, p) = write(&[0u8; 100]);
        assert!(matches!(read_nifti(&p), Err(Error::Truncated { .. })));
        let (_d, p) = write(&[0u8; 400]);
        assert!(matches!(read_nifti(&p), Err(Error::BadMagic { .. })));
    }
}
