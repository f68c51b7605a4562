//! GVOL: a minimal bit-exact container for volumes and masks.
//!
//! Layout: bytes 0-7 ASCII magic `GVOL0001`; bytes 8-11 little-endian u32
//! header byte length N; N bytes of UTF-8 JSON header
//! `{"dims":[z,y,x],"spacing_mm":[sz,sy,sx],"dtype":"f32"|"u8"}`; then
//! `z*y*x` payload elements, little-endian, x-fastest. `f32` payloads are
//! images, `u8` payloads are binary masks.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::volume::{Dims, MaskVolume, Spacing, Volume, VolumeError};

pub const GVOL_MAGIC: &[u8; 8] = b"GVOL0001";

#[derive(Debug)]
pub enum GvolError {
    Io(io::Error),
    /// The first eight bytes are not the GVOL magic.
    BadMagic([u8; 8]),
    /// The header is not valid UTF-8 JSON of the expected shape.
    BadHeader(String),
    /// Fewer payload bytes than the header's dims require.
    TruncatedPayload { expected: usize, got: usize },
    /// More payload bytes than the header's dims require.
    TrailingData { expected: usize },
    /// A mask payload contained a value other than 0 or 1.
    NonBinaryMask { index: usize, value: u8 },
    /// Header dims/spacing violate the grid invariants.
    InvalidGrid(String),
}

impl fmt::Display for GvolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GvolError::Io(e) => write!(f, "i/o error: {e}"),
            GvolError::BadMagic(m) => write!(f, "bad magic {m:?}, expected {GVOL_MAGIC:?}"),
            GvolError::BadHeader(msg) => write!(f, "bad header: {msg}"),
            GvolError::TruncatedPayload { expected, got } => {
                write!(f, "truncated payload: expected {expected} bytes, got {got}")
            }
            GvolError::TrailingData { expected } => {
                write!(f, "trailing data after {expected} payload bytes")
            }
            GvolError::NonBinaryMask { index, value } => {
                write!(f, "mask voxel {index} has non-binary value {value}")
            }
            GvolError::InvalidGrid(msg) => write!(f, "invalid grid: {msg}"),
        }
    }
}

impl std::error::Error for GvolError {}

impl From<io::Error> for GvolError {
    fn from(e: io::Error) -> Self {
        GvolError::Io(e)
    }
}

impl From<VolumeError> for GvolError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::NonBinaryMask { index, value } => {
                GvolError::NonBinaryMask { index, value }
            }
            other => GvolError::InvalidGrid(other.to_string()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: Dims,
    spacing_mm: Spacing,
    dtype: String,
}

/// Either kind of grid a GVOL file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum GvolContents {
    Image(Volume),
    Mask(MaskVolume),
}

impl GvolContents {
    pub fn dims(&self) -> Dims {
        match self {
            GvolContents::Image(v) => v.dims,
            GvolContents::Mask(m) => m.dims,
        }
    }

    pub fn into_image(self) -> Option<Volume> {
        match self {
            GvolContents::Image(v) => Some(v),
            GvolContents::Mask(_) => None,
        }
    }

    pub fn into_mask(self) -> Option<MaskVolume> {
        match self {
            GvolContents::Mask(m) => Some(m),
            GvolContents::Image(_) => None,
        }
    }
}

pub fn read_gvol(path: &Path) -> Result<GvolContents, GvolError> {
    let mut reader = BufReader::new(File::open(path)?);
    read_gvol_from(&mut reader)
}

pub fn read_gvol_from<R: Read>(reader: &mut R) -> Result<GvolContents, GvolError> {
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != GVOL_MAGIC {
        return Err(GvolError::BadMagic(magic));
    }
    let mut len_bytes = [0u8; 4];
    reader.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| GvolError::BadHeader(e.to_string()))?;

    let n_vox = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| GvolError::InvalidGrid(format!("dims overflow: {:?}", header.dims)))?;
    let elem_size = match header.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => return Err(GvolError::BadHeader(format!("unknown dtype {other:?}"))),
    };
    let expected = n_vox * elem_size;
    let mut payload = Vec::with_capacity(expected);
    reader.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(GvolError::TruncatedPayload {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(GvolError::TrailingData { expected });
    }

    match header.dtype.as_str() {
        "f32" => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(GvolContents::Image(Volume::new(
                header.dims,
                header.spacing_mm,
                data,
            )?))
        }
        _ => Ok(GvolContents::Mask(MaskVolume::new(
            header.dims,
            header.spacing_mm,
            payload,
        )?)),
    }
}

pub fn write_gvol_image(vol: &Volume, path: &Path) -> Result<(), GvolError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_image_to(vol, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn write_gvol_mask(mask: &MaskVolume, path: &Path) -> Result<(), GvolError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_mask_to(mask, &mut writer)?;
    writer.flush()?;
    Ok(())
}

fn write_preamble<W: Write>(
    writer: &mut W,
    dims: Dims,
    spacing_mm: Spacing,
    dtype: &str,
) -> Result<(), GvolError> {
    let header = Header {
        dims,
        spacing_mm,
        dtype: dtype.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization cannot fail");
    writer.write_all(GVOL_MAGIC)?;
    writer.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    writer.write_all(&header_bytes)?;
    Ok(())
}

pub fn write_image_to<W: Write>(vol: &Volume, writer: &mut W) -> Result<(), GvolError> {
    write_preamble(writer, vol.dims, vol.spacing_mm, "f32")?;
    let mut buf = Vec::with_capacity(vol.data.len() * 4);
    for &v in &vol.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)?;
    Ok(())
}

pub fn write_mask_to<W: Write>(mask: &MaskVolume, writer: &mut W) -> Result<(), GvolError> {
    write_preamble(writer, mask.dims, mask.spacing_mm, "u8")?;
    writer.write_all(&mask.data)?;
    Ok(())
}
