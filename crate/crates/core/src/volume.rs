//! Volume containers.
//!
//! Two on-disk formats are accepted:
//!
//! * NIfTI-1 single files (`.nii`, `.nii.gz`), read and written through the
//!   `nifti` crate. The first three array axes are taken as H, W, S.
//! * A raw container (`.vol`) with a plain-text header followed by the
//!   voxel payload:
//!
//! ```text
//! dims: <H> <W> <S>\n
//! dtype: f32\n
//! modality: CT|MR\n
//! spacing: <dx> <dy> <dz>\n      (optional)
//! \n
//! <H·W·S little-endian f32, row-major over (H, W, S): S varies fastest>
//! ```

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_IN_PLANE: usize = 64;
const MAX_HEADER: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Ct,
    Mr,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CT" => Ok(Modality::Ct),
            "MR" | "MRI" => Ok(Modality::Mr),
            other => Err(Error::Validation(format!("unknown modality {other:?}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    /// H×W×S.
    pub voxels: Array3<f64>,
    pub modality: Modality,
    pub voxel_spacing: Option<[f64; 3]>,
    pub source_id: String,
}

impl VolumeRecord {
    pub fn new(voxels: Array3<f64>, modality: Modality, source_id: impl Into<String>) -> Result<Self> {
        let v = VolumeRecord {
            voxels,
            modality,
            voxel_spacing: None,
            source_id: source_id.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, s) = self.voxels.dim();
        if s < 1 || h < MIN_IN_PLANE || w < MIN_IN_PLANE {
            return Err(Error::Validation(format!(
                "volume {} has shape ({h}, {w}, {s}); need H, W >= {MIN_IN_PLANE} and S >= 1",
                self.source_id
            )));
        }
        if let Some(pos) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "volume {} contains a non-finite voxel at flat index {pos}",
                self.source_id
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn n_slices(&self) -> usize {
        self.voxels.dim().2
    }

    pub fn slice(&self, index: usize) -> Array2<f64> {
        self.voxels.index_axis(Axis(2), index).to_owned()
    }

    /// Builds a volume from equally sized H×W slices.
    pub fn from_slices(slices: &[Array2<f64>], modality: Modality, source_id: impl Into<String>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Validation("a volume needs at least one slice".into()))?;
        let (h, w) = first.dim();
        let mut voxels = Array3::zeros((h, w, slices.len()));
        for (i, s) in slices.iter().enumerate() {
            if s.dim() != (h, w) {
                return Err(Error::Contract("slices of one volume must share a shape".into()));
            }
            voxels.index_axis_mut(Axis(2), i).assign(s);
        }
        VolumeRecord::new(voxels, modality, source_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Raw,
    Nifti,
}

impl VolumeFormat {
    pub fn of(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        if name.ends_with(".vol") {
            Some(VolumeFormat::Raw)
        } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Some(VolumeFormat::Nifti)
        } else {
            None
        }
    }
}

/// File stem without `.nii.gz` / `.vol` suffixes.
pub fn source_id_of(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    for suffix in [".nii.gz", ".nii", ".vol"] {
        if let Some(stem) = name.strip_suffix(suffix) {
            return stem.to_string();
        }
    }
    name.to_string()
}

/// Supported volume files of a directory, sorted by file name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && VolumeFormat::of(&path).is_some() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_volume(path: &Path, modality: Modality) -> Result<VolumeRecord> {
    let record = match VolumeFormat::of(path) {
        Some(VolumeFormat::Raw) => read_raw(path, modality)?,
        Some(VolumeFormat::Nifti) => read_nifti(path, modality)?,
        None => {
            return Err(Error::format(
                path,
                "unsupported extension (expected .vol, .nii or .nii.gz)",
            ))
        }
    };
    record.validate()?;
    Ok(record)
}

/// Writes `v` in the format implied by the extension of `path`.
pub fn save_volume(v: &VolumeRecord, path: &Path) -> Result<()> {
    match VolumeFormat::of(path) {
        Some(VolumeFormat::Raw) => write_raw(v, path),
        Some(VolumeFormat::Nifti) => write_nifti(v, path),
        None => Err(Error::format(path, "unsupported extension (expected .vol, .nii or .nii.gz)")),
    }
}

pub fn encode_raw(v: &VolumeRecord) -> Vec<u8> {
    let (h, w, s) = v.voxels.dim();
    let mut out = format!("dims: {h} {w} {s}\ndtype: f32\nmodality: {}\n", v.modality.tag()).into_bytes();
    if let Some([a, b, c]) = v.voxel_spacing {
        out.extend_from_slice(format!("spacing: {a} {b} {c}\n").as_bytes());
    }
    out.push(b'\n');
    out.reserve(h * w * s * 4);
    // Standard layout iterates in row-major (H, W, S) order.
    for &x in v.voxels.iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

fn write_raw(v: &VolumeRecord, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_raw(v)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn decode_raw(bytes: &[u8], path: &Path, expected: Modality) -> Result<VolumeRecord> {
    let end = bytes
        .windows(2)
        .take(MAX_HEADER)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::format(path, "missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let payload = &bytes[end + 2..];

    let mut dims = None;
    let mut dtype = None;
    let mut modality = None;
    let mut spacing = None;
    for line in header.lines() {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::format(path, format!("bad header line {line:?}")))?;
        let value = value.trim();
        match key.trim() {
            "dims" => {
                let d: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(path, format!("bad dims {value:?}")))?;
                if d.len() != 3 {
                    return Err(Error::format(path, "dims needs three values"));
                }
                dims = Some((d[0], d[1], d[2]));
            }
            "dtype" => dtype = Some(value.to_string()),
            "modality" => modality = Some(Modality::parse(value).map_err(|_| Error::format(path, "bad modality"))?),
            "spacing" => {
                let s: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(path, format!("bad spacing {value:?}")))?;
                if s.len() != 3 {
                    return Err(Error::format(path, "spacing needs three values"));
                }
                spacing = Some([s[0], s[1], s[2]]);
            }
            other => return Err(Error::format(path, format!("unknown header key {other:?}"))),
        }
    }
    let (h, w, s) = dims.ok_or_else(|| Error::format(path, "missing dims"))?;
    if dtype.as_deref() != Some("f32") {
        return Err(Error::format(path, format!("unsupported dtype {dtype:?}")));
    }
    let modality = modality.ok_or_else(|| Error::format(path, "missing modality"))?;
    if modality != expected {
        return Err(Error::Validation(format!(
            "{} holds a {modality} volume, expected {expected}",
            path.display()
        )));
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(s))
        .ok_or_else(|| Error::format(path, "dims overflow"))?;
    if payload.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, dims need {}", payload.len(), n * 4),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let voxels = Array3::from_shape_vec((h, w, s), data).expect("length checked");
    Ok(VolumeRecord {
        voxels,
        modality,
        voxel_spacing: spacing,
        source_id: source_id_of(path),
    })
}

fn read_raw(path: &Path, modality: Modality) -> Result<VolumeRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, path, modality)
}

fn read_nifti(path: &Path, modality: Modality) -> Result<VolumeRecord> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let header = obj.header().clone();
    let data = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let shape = data.shape().to_vec();
    let voxels = match shape.len() {
        2 => data
            .into_shape_with_order((shape[0], shape[1], 1))
            .map_err(|e| Error::format(path, e.to_string()))?,
        3 => data
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::format(path, e.to_string()))?,
        4 if shape[3] == 1 => data
            .into_shape_with_order((shape[0], shape[1], shape[2]))
            .map_err(|e| Error::format(path, e.to_string()))?,
        _ => return Err(Error::format(path, format!("expected a 3-d volume, got shape {shape:?}"))),
    };
    let p = header.pixdim;
    Ok(VolumeRecord {
        voxels: voxels.as_standard_layout().to_owned(),
        modality,
        voxel_spacing: Some([p[1] as f64, p[2] as f64, p[3] as f64]),
        source_id: source_id_of(path),
    })
}

fn write_nifti(v: &VolumeRecord, path: &Path) -> Result<()> {
    let data = v.voxels.mapv(|x| x as f32);
    nifti::writer::WriterOptions::new(path)
        .write_nifti(&data)
        .map_err(|e| Error::format(path, e.to_string()))
}
