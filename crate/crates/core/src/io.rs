//! Volume and mask persistence.
//!
//! The portable format is `b"SEGQCVOL"`, a little-endian `u32` header length,
//! a compact JSON header, then the raw little-endian payload in `(z, y, x)`
//! order. NIfTI-1 (`.nii`, `.nii.gz`) is accepted for ingestion only.

use std::fs;
use std::io::Write;
use std::path::Path;

use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Mask, Shape, Spacing, Volume};

const MAGIC: &[u8; 8] = b"SEGQCVOL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Nifti,
    Portable,
}

impl VolumeFormat {
    /// Guesses the format from the file name.
    pub fn from_path(path: &Path) -> Self {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            VolumeFormat::Nifti
        } else {
            VolumeFormat::Portable
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DType {
    F32,
    U8,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: DType,
    shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spacing: Option<Spacing>,
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_id: Option<u8>,
}

fn encode(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptHeader("bad magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| Error::CorruptHeader("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::CorruptHeader(format!("header json: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::CorruptHeader(format!("unsupported version {}", header.version)));
    }
    if header.shape.iter().any(|&d| d == 0) {
        return Err(Error::CorruptHeader(format!("non-positive shape {:?}", header.shape)));
    }
    let payload = &bytes[12 + len..];
    let expected = voxel_count(header.shape) * header.dtype.width();
    if payload.len() != expected {
        return Err(Error::PayloadMismatch { expected, actual: payload.len() });
    }
    Ok((header, payload))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Portable-format bytes for a volume (what [`save_volume`] writes).
pub fn volume_to_bytes(v: &Volume) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_VERSION,
        dtype: DType::F32,
        shape: v.shape,
        spacing: Some(v.spacing),
        id: v.id.clone(),
        class_id: None,
    };
    let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    encode(&header, &payload)
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<Volume> {
    let (h, payload) = decode(bytes)?;
    let data: Vec<f32> = match h.dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::U8 => payload.iter().map(|&b| b as f32).collect(),
    };
    let spacing = h.spacing.unwrap_or([1.0; 3]);
    Volume::new(h.id, h.shape, spacing, data).map_err(|e| Error::CorruptHeader(e.to_string()))
}

pub fn mask_to_bytes(m: &Mask) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_VERSION,
        dtype: DType::U8,
        shape: m.shape,
        spacing: None,
        id: m.id.clone(),
        class_id: m.class_id,
    };
    encode(&header, &m.data)
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<Mask> {
    let (h, payload) = decode(bytes)?;
    if h.dtype != DType::U8 {
        return Err(Error::CorruptHeader("mask payload must be u8".into()));
    }
    Mask::new(h.id, h.shape, h.class_id, payload.to_vec())
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match format {
        VolumeFormat::Portable => volume_from_bytes(&read_bytes(path)?),
        VolumeFormat::Nifti => {
            let (id, shape, spacing, data) = read_nifti(path)?;
            Volume::new(id, shape, spacing, data)
        }
    }
}

pub fn save_volume(v: &Volume, path: &Path, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Portable => write_bytes(path, &volume_to_bytes(v)?),
        VolumeFormat::Nifti => Err(Error::InvalidArgument("NIfTI is supported for reading only".into())),
    }
}

/// Loads a label mask. NIfTI labels are rounded to the nearest integer.
pub fn load_mask(path: &Path, format: VolumeFormat) -> Result<Mask> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match format {
        VolumeFormat::Portable => mask_from_bytes(&read_bytes(path)?),
        VolumeFormat::Nifti => {
            let (id, shape, _, data) = read_nifti(path)?;
            let labels = data
                .iter()
                .map(|&v| {
                    let r = v.round();
                    if (0.0..=255.0).contains(&r) {
                        Ok(r as u8)
                    } else {
                        Err(Error::InvalidArgument(format!("label value {v} outside 0..=255")))
                    }
                })
                .collect::<Result<Vec<u8>>>()?;
            Mask::new(id, shape, None, labels)
        }
    }
}

pub fn save_mask(m: &Mask, path: &Path, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Portable => write_bytes(path, &mask_to_bytes(m)?),
        VolumeFormat::Nifti => Err(Error::InvalidArgument("NIfTI is supported for reading only".into())),
    }
}

/// Reads a 3D NIfTI image, reordering from file order `(x, y, z)` to `(z, y, x)`.
fn read_nifti(path: &Path) -> Result<(String, Shape, Spacing, Vec<f32>)> {
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if !(3..=7).contains(&ndim) || header.dim[4..=ndim].iter().any(|&d| d > 1) {
        return Err(Error::CorruptHeader(format!("expected a 3D image, dim = {:?}", header.dim)));
    }
    let (nx, ny, nz) = (header.dim[1] as usize, header.dim[2] as usize, header.dim[3] as usize);
    let spacing = [header.pixdim[3] as f64, header.pixdim[2] as f64, header.pixdim[1] as f64]
        .map(|s| if s > 0.0 { s } else { 1.0 });
    let arr = obj.into_volume().into_ndarray::<f32>()?;
    let arr = arr
        .into_shape(ndarray::IxDyn(&[nx, ny, nz]))
        .map_err(|e| Error::CorruptHeader(format!("nifti array: {e}")))?;
    let shape = [nz, ny, nx];
    let mut data = vec![0f32; voxel_count(shape)];
    for ((x, y, z), v) in arr
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::CorruptHeader(e.to_string()))?
        .indexed_iter()
        .map(|(i, v)| (i, *v))
    {
        data[(z * ny + y) * nx + x] = v;
    }
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.trim_end_matches(".gz").trim_end_matches(".nii").to_string())
        .unwrap_or_default();
    Ok((id, shape, spacing, data))
}
