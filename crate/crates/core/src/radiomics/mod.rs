//! Radiomics feature families: first-order intensity statistics, mesh-based
//! shape descriptors, GLCM/GLRLM texture, and single-level 3D Haar wavelet
//! variants of the intensity/texture families.

pub mod firstorder;
pub mod glcm;
pub mod glrlm;
mod mc_tables;
pub mod shape;
pub mod wavelet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, NoduleSample, Volume};

/// Ordered, uniquely named feature values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    entries: Vec<(String, f64)>,
}

impl FeatureVector {
    pub fn new() -> Self {
        FeatureVector { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate feature name {name}"
        );
        self.entries.push((name, value));
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: FeatureVector) {
        for (name, value) in other.entries {
            self.push(format!("{prefix}_{name}"), value);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// All values must be finite; reports the first offender by name.
    pub fn check_finite(&self) -> Result<()> {
        for (name, value) in &self.entries {
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("feature {name}")));
            }
        }
        Ok(())
    }
}

/// Gray-level discretization of the masked region. `levels` holds 1..=Ng
/// under the mask and 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedVolume {
    pub dims: (usize, usize, usize),
    pub levels: Vec<u32>,
    pub ng: u32,
    pub bin_width: f64,
}

impl DiscretizedVolume {
    #[inline]
    pub fn level(&self, x: usize, y: usize, z: usize) -> u32 {
        self.levels[x + self.dims.0 * (y + self.dims.1 * z)]
    }
}

/// Fixed-bin-width discretization: level = floor((v - min)/width) + 1.
pub fn discretize(vol: &Volume, mask: &Mask, bin_width: f64) -> Result<DiscretizedVolume> {
    if vol.dims != mask.dims {
        return Err(Error::DimMismatch(format!(
            "volume dims {:?} != mask dims {:?}",
            vol.dims, mask.dims
        )));
    }
    if !(bin_width > 0.0) {
        return Err(Error::InvalidArgument("bin_width must be > 0".into()));
    }
    let min = masked_min(vol, mask)?;
    let mut levels = vec![0u32; vol.voxels.len()];
    let mut ng = 0u32;
    for (i, &m) in mask.voxels.iter().enumerate() {
        if m == 1 {
            let level = ((vol.voxels[i] - min) / bin_width).floor() as u32 + 1;
            levels[i] = level;
            ng = ng.max(level);
        }
    }
    Ok(DiscretizedVolume { dims: vol.dims, levels, ng, bin_width })
}

fn masked_min(vol: &Volume, mask: &Mask) -> Result<f64> {
    let mut min = f64::INFINITY;
    for (i, &m) in mask.voxels.iter().enumerate() {
        if m == 1 {
            min = min.min(vol.voxels[i]);
        }
    }
    if min.is_finite() {
        Ok(min)
    } else {
        Err(Error::EmptyMask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiomicsConfig {
    pub bin_width: f64,
    pub shape: bool,
    pub first_order: bool,
    pub glcm: bool,
    pub glrlm: bool,
    pub wavelet: bool,
}

impl Default for RadiomicsConfig {
    fn default() -> Self {
        RadiomicsConfig {
            bin_width: 25.0,
            shape: true,
            first_order: true,
            glcm: true,
            glrlm: true,
            wavelet: true,
        }
    }
}

const BAND_NAMES: [&str; 8] = ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

/// Majority-vote downsample of a mask onto ceil-halved band dims. Each band
/// voxel covers a 2x2x2 block of the edge-replicated even-padded mask and is
/// foreground when at least half the block is.
pub fn downsample_mask(mask: &Mask) -> Mask {
    let (nx, ny, nz) = mask.dims;
    let (hx, hy, hz) = (nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2));
    let mut out = Mask::zeros((hx, hy, hz));
    let clamp = |i: usize, n: usize| i.min(n - 1);
    for z in 0..hz {
        for y in 0..hy {
            for x in 0..hx {
                let mut count = 0;
                for (dx, dy, dz) in
                    itertools_product_2x2x2()
                {
                    let sx = clamp(2 * x + dx, nx);
                    let sy = clamp(2 * y + dy, ny);
                    let sz = clamp(2 * z + dz, nz);
                    count += mask.get(sx, sy, sz) as usize;
                }
                if count >= 4 {
                    out.set(x, y, z, 1);
                }
            }
        }
    }
    out
}

fn itertools_product_2x2x2() -> impl Iterator<Item = (usize, usize, usize)> {
    (0..2).flat_map(|dz| (0..2).flat_map(move |dy| (0..2).map(move |dx| (dx, dy, dz))))
}

fn texture_and_intensity(
    vol: &Volume,
    mask: &Mask,
    cfg: &RadiomicsConfig,
    band: &str,
    out: &mut FeatureVector,
) -> Result<()> {
    if cfg.first_order {
        out.extend_prefixed(&format!("{band}_firstorder"), firstorder::first_order_features(vol, mask, cfg.bin_width)?);
    }
    if cfg.glcm || cfg.glrlm {
        let disc = discretize(vol, mask, cfg.bin_width)?;
        if cfg.glcm {
            out.extend_prefixed(&format!("{band}_glcm"), glcm::glcm_features(&disc, mask)?);
        }
        if cfg.glrlm {
            out.extend_prefixed(&format!("{band}_glrlm"), glrlm::glrlm_features(&disc, mask)?);
        }
    }
    Ok(())
}

/// Full feature vector for one sample: shape (original mask only) plus
/// intensity/texture families on the original volume and each wavelet band.
/// 14 + 9*(18+9+7) = 320 features at the default config.
pub fn extract_all(sample: &NoduleSample, cfg: &RadiomicsConfig) -> Result<FeatureVector> {
    let mut out = FeatureVector::new();
    if cfg.shape {
        out.extend_prefixed("shape", shape::shape_features(&sample.mask, sample.patch.spacing)?);
    }
    texture_and_intensity(&sample.patch, &sample.mask, cfg, "orig", &mut out)?;
    if cfg.wavelet {
        let bands = wavelet::haar3d(&sample.patch);
        let band_mask = downsample_mask(&sample.mask);
        if band_mask.foreground_count() == 0 {
            return Err(Error::EmptyMask);
        }
        for (i, band) in bands.bands.iter().enumerate() {
            texture_and_intensity(band, &band_mask, cfg, BAND_NAMES[i], &mut out)?;
        }
    }
    out.check_finite()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{default_spec, generate_phantom};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn discretize_constant_region() {
        let vol = Volume::filled((3, 3, 3), (1.0, 1.0, 1.0), 4.2).unwrap();
        let mask = Mask::new((3, 3, 3), vec![1; 27]).unwrap();
        let d = discretize(&vol, &mask, 25.0).unwrap();
        assert_eq!(d.ng, 1);
        assert!(d.levels.iter().all(|&l| l == 1));
    }

    #[test]
    fn discretize_unit_bins() {
        let vol = Volume::new((4, 1, 1), (1.0, 1.0, 1.0), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mask = Mask::new((4, 1, 1), vec![1; 4]).unwrap();
        let d = discretize(&vol, &mask, 1.0).unwrap();
        assert_eq!(d.levels, vec![1, 2, 3, 4]);
        assert_eq!(d.ng, 4);
    }

    #[test]
    fn discretize_matches_bruteforce_binning() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 6usize;
        let voxels: Vec<f64> = (0..n * n * n).map(|_| rng.gen_range(0.0..25.0)).collect();
        let vol = Volume::new((n, n, n), (1.0, 1.0, 1.0), voxels.clone()).unwrap();
        let mask = Mask::new((n, n, n), vec![1; n * n * n]).unwrap();
        let d = discretize(&vol, &mask, 5.0).unwrap();
        assert_eq!(d.ng, 5);
        // independent scalar binning loop
        let min = voxels.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut hist_ref = vec![0usize; 6];
        let mut hist_got = vec![0usize; 6];
        for (i, &v) in voxels.iter().enumerate() {
            let mut bin = 1usize;
            while min + bin as f64 * 5.0 <= v {
                bin += 1;
            }
            hist_ref[bin] += 1;
            hist_got[d.levels[i] as usize] += 1;
        }
        assert_eq!(hist_ref, hist_got);
    }

    #[test]
    fn empty_mask_rejected() {
        let vol = Volume::filled((3, 3, 3), (1.0, 1.0, 1.0), 1.0).unwrap();
        let mask = Mask::zeros((3, 3, 3));
        assert!(matches!(discretize(&vol, &mask, 1.0), Err(Error::EmptyMask)));
    }

    #[test]
    fn extract_all_default_is_320_unique_features() {
        let sample = generate_phantom(&default_spec()).unwrap();
        let fv = extract_all(&sample, &RadiomicsConfig::default()).unwrap();
        assert_eq!(fv.len(), 320);
        let names: std::collections::HashSet<&str> = fv.names().collect();
        assert_eq!(names.len(), 320);
    }

    #[test]
    fn extract_all_is_pure() {
        let sample = generate_phantom(&default_spec()).unwrap();
        let a = extract_all(&sample, &RadiomicsConfig::default()).unwrap();
        let b = extract_all(&sample, &RadiomicsConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn translation_invariance_of_intensity_and_texture() {
        // Same nodule content, shifted two voxels inside a larger patch.
        let base = generate_phantom(&default_spec()).unwrap();
        let (n, shift) = (base.patch.dims.0, 2usize);
        let big = n + shift;
        let mut patch = Volume::filled((big, big, big), base.patch.spacing, -1000.0).unwrap();
        let mut mask = Mask::zeros((big, big, big));
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    patch.set(x + shift, y + shift, z + shift, base.patch.get(x, y, z));
                    mask.set(x + shift, y + shift, z + shift, base.mask.get(x, y, z));
                }
            }
        }
        let cfg = RadiomicsConfig { shape: false, wavelet: false, ..RadiomicsConfig::default() };
        let mut pad_patch = Volume::filled((big, big, big), base.patch.spacing, -1000.0).unwrap();
        let mut pad_mask = Mask::zeros((big, big, big));
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    pad_patch.set(x, y, z, base.patch.get(x, y, z));
                    pad_mask.set(x, y, z, base.mask.get(x, y, z));
                }
            }
        }
        let a = extract_all(
            &NoduleSample::new("a".into(), pad_patch, pad_mask, base.label).unwrap(),
            &cfg,
        )
        .unwrap();
        let b = extract_all(&NoduleSample::new("b".into(), patch, mask, base.label).unwrap(), &cfg).unwrap();
        for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            let scale = va.abs().max(1.0);
            assert!((va - vb).abs() / scale < 1e-9, "{na}: {va} vs {vb}");
        }
    }

    use crate::volume::NoduleSample;

    #[test]
    fn fuzz_all_features_finite() {
        let mut spec = default_spec();
        spec.patch_size = 20;
        spec.radius_range = (2.5, 3.8);
        for seed in 0..50 {
            spec.seed = seed;
            spec.class = crate::volume::InvasivenessLabel::ALL[(seed % 4) as usize];
            let sample = generate_phantom(&spec).unwrap();
            let fv = extract_all(&sample, &RadiomicsConfig::default()).unwrap();
            fv.check_finite().unwrap();
        }
    }
}
