//! Volume and mask containers, the on-disk format, and nodule-centered patch
//! extraction.
//!
//! On disk a volume is a pair of files: `<name>.json` holding dims, spacing,
//! scalar type and byte order, and `<name>.raw` holding the voxels as
//! little-endian f32 in x-fastest order. A dataset is a directory of such
//! pairs plus a `manifest.json` listing `{id, label, volume_path, mask_path}`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 3D scalar grid with physical spacing, voxels in x-fastest linear order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub voxels: Vec<f64>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), voxels: Vec<f64>) -> Result<Self> {
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(Error::InvalidVolume(format!("dims must all be >= 1, got {dims:?}")));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(Error::InvalidVolume(format!("spacing must all be > 0, got {spacing:?}")));
        }
        let n = dims.0 * dims.1 * dims.2;
        if voxels.len() != n {
            return Err(Error::PayloadSize { expected: n, found: voxels.len() });
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume voxels".into()));
        }
        Ok(Volume { dims, spacing, voxels })
    }

    pub fn filled(dims: (usize, usize, usize), spacing: (f64, f64, f64), value: f64) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, spacing, vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.voxels[i] = v;
    }
}

/// Binary mask paired with a Volume of equal dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: (usize, usize, usize),
    pub voxels: Vec<u8>,
}

impl Mask {
    pub fn new(dims: (usize, usize, usize), voxels: Vec<u8>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if voxels.len() != n {
            return Err(Error::PayloadSize { expected: n, found: voxels.len() });
        }
        if voxels.iter().any(|&v| v > 1) {
            return Err(Error::InvalidVolume("mask voxels must be 0 or 1".into()));
        }
        Ok(Mask { dims, voxels })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Mask { dims, voxels: vec![0; dims.0 * dims.1 * dims.2] }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.voxels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: u8) {
        let i = self.index(x, y, z);
        self.voxels[i] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    /// Masked voxel coordinates in scan order.
    pub fn foreground(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for z in 0..self.dims.2 {
            for y in 0..self.dims.1 {
                for x in 0..self.dims.0 {
                    if self.get(x, y, z) == 1 {
                        out.push((x, y, z));
                    }
                }
            }
        }
        out
    }
}

/// Four-grade pathological invasiveness, ordinal AAH < AIS < MIA < IA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InvasivenessLabel {
    AAH = 0,
    AIS = 1,
    MIA = 2,
    IA = 3,
}

impl InvasivenessLabel {
    pub const ALL: [InvasivenessLabel; 4] = [
        InvasivenessLabel::AAH,
        InvasivenessLabel::AIS,
        InvasivenessLabel::MIA,
        InvasivenessLabel::IA,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("label code {code} out of range 0..=3")))
    }

    pub fn name(self) -> &'static str {
        match self {
            InvasivenessLabel::AAH => "AAH",
            InvasivenessLabel::AIS => "AIS",
            InvasivenessLabel::MIA => "MIA",
            InvasivenessLabel::IA => "IA",
        }
    }
}

/// One nodule-centered patch with its segmentation mask and grade.
#[derive(Debug, Clone, PartialEq)]
pub struct NoduleSample {
    pub id: String,
    pub patch: Volume,
    pub mask: Mask,
    pub label: InvasivenessLabel,
}

impl NoduleSample {
    pub fn new(id: String, patch: Volume, mask: Mask, label: InvasivenessLabel) -> Result<Self> {
        if patch.dims != mask.dims {
            return Err(Error::DimMismatch(format!(
                "patch dims {:?} != mask dims {:?}",
                patch.dims, mask.dims
            )));
        }
        Ok(NoduleSample { id, patch, mask, label })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub volume_path: String,
    pub mask_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<NoduleSample>,
    pub manifest: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn new(samples: Vec<NoduleSample>, manifest: Vec<ManifestEntry>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("dataset must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(Dataset { samples, manifest })
    }

    pub fn label_histogram(&self) -> [usize; 4] {
        let mut h = [0usize; 4];
        for s in &self.samples {
            h[s.label.code()] += 1;
        }
        h
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    scalar: String,
    byte_order: String,
}

/// Writes `<path>.json` + `<path>.raw`. Voxels are stored as little-endian f32.
pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    let header = VolumeHeader {
        dims: [vol.dims.0, vol.dims.1, vol.dims.2],
        spacing: [vol.spacing.0, vol.spacing.1, vol.spacing.2],
        scalar: "f32".into(),
        byte_order: "little".into(),
    };
    let json_path = path.with_extension("json");
    let raw_path = path.with_extension("raw");
    let header_text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, header_text).map_err(|e| Error::io(&json_path, e))?;
    let mut payload = Vec::with_capacity(vol.voxels.len() * 4);
    for &v in &vol.voxels {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    f.write_all(&payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let json_path = path.with_extension("json");
    let raw_path = path.with_extension("raw");
    let header_text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&header_text).map_err(|e| Error::json(&json_path, e))?;
    if header.scalar != "f32" {
        return Err(Error::InvalidVolume(format!("unsupported scalar type {:?}", header.scalar)));
    }
    if header.byte_order != "little" {
        return Err(Error::InvalidVolume(format!("unsupported byte order {:?}", header.byte_order)));
    }
    let dims = (header.dims[0], header.dims[1], header.dims[2]);
    let spacing = (header.spacing[0], header.spacing[1], header.spacing[2]);
    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = dims.0 * dims.1 * dims.2;
    if payload.len() != expected * 4 {
        return Err(Error::PayloadSize { expected, found: payload.len() / 4 });
    }
    let voxels: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume::new(dims, spacing, voxels)
}

pub fn save_mask(mask: &Mask, spacing: (f64, f64, f64), path: &Path) -> Result<()> {
    let vol = Volume::new(mask.dims, spacing, mask.voxels.iter().map(|&v| v as f64).collect())?;
    save_volume(&vol, path)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let vol = load_volume(path)?;
    let mut voxels = Vec::with_capacity(vol.voxels.len());
    for &v in &vol.voxels {
        if v == 0.0 {
            voxels.push(0u8);
        } else if v == 1.0 {
            voxels.push(1u8);
        } else {
            return Err(Error::InvalidVolume(format!("mask voxel {v} is not binary")));
        }
    }
    Mask::new(vol.dims, voxels)
}

/// Extracts a `size`-shaped patch centered on `center`; voxels outside `vol`
/// take `fill`. Total for every center, including fully out-of-bounds ones.
pub fn extract_patch(
    vol: &Volume,
    center: (i64, i64, i64),
    size: (usize, usize, usize),
    fill: f64,
) -> Result<Volume> {
    if size.0 < 1 || size.1 < 1 || size.2 < 1 {
        return Err(Error::InvalidArgument(format!("patch size must be >= 1, got {size:?}")));
    }
    let mut out = Volume::filled(size, vol.spacing, fill)?;
    let origin = (
        center.0 - (size.0 as i64) / 2,
        center.1 - (size.1 as i64) / 2,
        center.2 - (size.2 as i64) / 2,
    );
    for z in 0..size.2 {
        let sz = origin.2 + z as i64;
        if sz < 0 || sz >= vol.dims.2 as i64 {
            continue;
        }
        for y in 0..size.1 {
            let sy = origin.1 + y as i64;
            if sy < 0 || sy >= vol.dims.1 as i64 {
                continue;
            }
            for x in 0..size.0 {
                let sx = origin.0 + x as i64;
                if sx < 0 || sx >= vol.dims.0 as i64 {
                    continue;
                }
                out.set(x, y, z, vol.get(sx as usize, sy as usize, sz as usize));
            }
        }
    }
    Ok(out)
}

/// Writes every sample's patch/mask pair plus `manifest.json` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let vol_name = format!("{}_patch", s.id);
        let mask_name = format!("{}_mask", s.id);
        save_volume(&s.patch, &dir.join(&vol_name))?;
        save_mask(&s.mask, s.patch.spacing, &dir.join(&mask_name))?;
        manifest.push(ManifestEntry {
            id: s.id.clone(),
            label: s.label.code(),
            volume_path: format!("{vol_name}.json"),
            mask_path: format!("{mask_name}.json"),
        });
    }
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    let mut samples = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let patch = load_volume(&dir.join(&entry.volume_path))?;
        let mask = load_mask(&dir.join(&entry.mask_path))?;
        let label = InvasivenessLabel::from_code(entry.label)?;
        samples.push(NoduleSample::new(entry.id.clone(), patch, mask, label)?);
    }
    Dataset::new(samples, manifest)
}
