//! Native little-endian volume container.
//!
//! Layout: `"DVOL"`, u32 version (1), u32 dims[3], f32 spacing_mm[3], u8 dtype
//! (0 = u8, 1 = i16, 2 = f32), then the samples x-fastest.

use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Grid, Volume};
use crate::warp::DeformationField;

pub const DVOL_MAGIC: &[u8; 4] = b"DVOL";
pub const DVOL_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 12 + 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RawData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl RawData {
    pub fn len(&self) -> usize {
        match self {
            RawData::U8(v) => v.len(),
            RawData::I16(v) => v.len(),
            RawData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            RawData::U8(_) => 0,
            RawData::I16(_) => 1,
            RawData::F32(_) => 2,
        }
    }

    fn to_f64(&self) -> Vec<f64> {
        match self {
            RawData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            RawData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            RawData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// A DVOL file held in memory with its on-disk sample type.
#[derive(Debug, Clone, PartialEq)]
pub struct Dvol {
    pub dims: [u32; 3],
    pub spacing: [f32; 3],
    pub data: RawData,
}

impl Dvol {
    pub fn from_volume(v: &Volume) -> Self {
        Dvol {
            dims: v.dims().map(|d| d as u32),
            spacing: v.spacing().map(|s| s as f32),
            data: RawData::F32(v.data().iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn from_mask(m: &BinaryMask) -> Self {
        Dvol {
            dims: m.dims().map(|d| d as u32),
            spacing: m.grid().spacing.map(|s| s as f32),
            data: RawData::U8(m.data().to_vec()),
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims.map(|d| d as usize), self.spacing.map(f64::from))
    }

    pub fn to_volume(&self) -> Result<Volume> {
        Volume::new(self.grid()?, self.data.to_f64())
    }

    /// Any nonzero sample is foreground.
    pub fn to_mask(&self) -> Result<BinaryMask> {
        let bits = self.data.to_f64().iter().map(|&v| (v != 0.0) as u8).collect();
        BinaryMask::new(self.grid()?, bits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let width = match self.data {
            RawData::U8(_) => 1,
            RawData::I16(_) => 2,
            RawData::F32(_) => 4,
        };
        let mut out = vec![0u8; HEADER_LEN + width * self.data.len()];
        out[..4].copy_from_slice(DVOL_MAGIC);
        LittleEndian::write_u32(&mut out[4..8], DVOL_VERSION);
        LittleEndian::write_u32_into(&self.dims, &mut out[8..20]);
        LittleEndian::write_f32_into(&self.spacing, &mut out[20..32]);
        out[32] = self.data.code();
        let payload = &mut out[HEADER_LEN..];
        match &self.data {
            RawData::U8(v) => payload.copy_from_slice(v),
            RawData::I16(v) => LittleEndian::write_i16_into(v, payload),
            RawData::F32(v) => LittleEndian::write_f32_into(v, payload),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        if &bytes[..4] != DVOL_MAGIC {
            return Err(Error::BadMagic { what: "DVOL file", expected: "DVOL" });
        }
        let version = LittleEndian::read_u32(&bytes[4..8]);
        if version != DVOL_VERSION {
            return Err(Error::UnsupportedVersion { what: "DVOL file", found: version });
        }
        let mut dims = [0u32; 3];
        LittleEndian::read_u32_into(&bytes[8..20], &mut dims);
        let mut spacing = [0f32; 3];
        LittleEndian::read_f32_into(&bytes[20..32], &mut spacing);
        let code = bytes[32];
        let width = match code {
            0 => 1,
            1 => 2,
            2 => 4,
            other => return Err(Error::UnsupportedDtype(other as i32)),
        };
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let expected = n
            .and_then(|n| n.checked_mul(width))
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Corrupt(format!("DVOL dims {dims:?} overflow")))?;
        if bytes.len() < expected {
            return Err(Error::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(Error::Corrupt(format!("DVOL has {} trailing bytes", bytes.len() - expected)));
        }
        let payload = &bytes[HEADER_LEN..];
        let n = n.expect("checked above");
        let data = match code {
            0 => RawData::U8(payload.to_vec()),
            1 => {
                let mut v = vec![0i16; n];
                LittleEndian::read_i16_into(payload, &mut v);
                RawData::I16(v)
            }
            _ => {
                let mut v = vec![0f32; n];
                LittleEndian::read_f32_into(payload, &mut v);
                RawData::F32(v)
            }
        };
        Ok(Dvol { dims, spacing, data })
    }
}

pub fn write_dvol(path: &Path, d: &Dvol) -> Result<()> {
    std::fs::write(path, d.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dvol(path: &Path) -> Result<Dvol> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Dvol::from_bytes(&bytes)
}

/// Writes `v` as f32 samples.
pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    write_dvol(path, &Dvol::from_volume(v))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    read_dvol(path)?.to_volume()
}

pub fn save_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write_dvol(path, &Dvol::from_mask(m))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    read_dvol(path)?.to_mask()
}

/// Component files of a displacement field stored under `stem`: `<stem>_ux.dvol` etc.
pub fn field_paths(stem: &Path) -> [PathBuf; 3] {
    let base = stem.as_os_str().to_string_lossy().into_owned();
    ["ux", "uy", "uz"].map(|c| PathBuf::from(format!("{base}_{c}.dvol")))
}

pub fn save_field(stem: &Path, f: &DeformationField) -> Result<()> {
    for (c, p) in field_paths(stem).iter().enumerate() {
        save_volume(p, &f.component(c))?;
    }
    Ok(())
}

pub fn load_field(stem: &Path) -> Result<DeformationField> {
    let comps = field_paths(stem).map(|p| load_volume(&p));
    let [ux, uy, uz] = comps;
    let (ux, uy, uz) = (ux?, uy?, uz?);
    ux.grid().ensure_matches(uy.grid(), "field components")?;
    ux.grid().ensure_matches(uz.grid(), "field components")?;
    let grid = *ux.grid();
    let mut data = ux.into_data();
    data.extend_from_slice(uy.data());
    data.extend_from_slice(uz.data());
    DeformationField::from_channels(grid, data)
}
