//! Deterministic synthetic nodule generator used in place of clinical data.
//!
//! Each invasiveness grade leaves two partially independent footprints:
//! the nodule shape and interior base intensity follow the grade's solid
//! fraction (visible to radiomics features), and a high-frequency interior
//! texture oscillates at a grade-indexed spatial frequency (visible to a
//! convolutional encoder). Per-sample jitter overlaps neighboring grades so
//! neither cue alone is fully separable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dataset, InvasivenessLabel, ManifestEntry, Mask, NoduleSample, Volume};

const BACKGROUND_INTENSITY: f64 = -1000.0;
const GROUND_GLASS_INTENSITY: f64 = -600.0;
const SOLID_INTENSITY: f64 = 50.0;
const SOLID_FRACTION_JITTER: f64 = 0.15;
const FREQUENCY_JITTER: f64 = 0.03;
const CENTER_JITTER_VOXELS: i64 = 2;
const MAX_ELONGATION: f64 = 1.8;

/// Parameters for one synthetic nodule sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub class: InvasivenessLabel,
    /// Cubic patch edge length in voxels.
    pub patch_size: usize,
    /// Voxel spacing in millimeters, isotropic.
    pub spacing: f64,
    /// Nodule mean radius range in millimeters, inclusive bounds.
    pub radius_range: (f64, f64),
    /// Nominal solid fraction in [0,1]; jittered per sample.
    pub solid_fraction: f64,
    /// Peak amplitude of the interior texture oscillation, intensity units.
    pub texture_amplitude: f64,
    /// Additive Gaussian noise sigma, intensity units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 1 {
            return Err(Error::InvalidSpec("patch_size must be >= 1".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::InvalidSpec("spacing must be > 0".into()));
        }
        if !(self.radius_range.0 > 0.0 && self.radius_range.1 >= self.radius_range.0) {
            return Err(Error::InvalidSpec(format!(
                "radius_range must be 0 < min <= max, got {:?}",
                self.radius_range
            )));
        }
        if !(0.0..=1.0).contains(&self.solid_fraction) {
            return Err(Error::InvalidSpec("solid_fraction must be in [0,1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        // Worst-case semi-axis (elongated, jittered center) must fit inside the patch.
        let max_solid = (self.solid_fraction + SOLID_FRACTION_JITTER).clamp(0.0, 1.0);
        let max_elongation = 1.0 + (MAX_ELONGATION - 1.0) * max_solid;
        let max_semi_axis_vox = self.radius_range.1 * max_elongation / self.spacing;
        let budget = (self.patch_size as f64) / 2.0 - 1.0 - CENTER_JITTER_VOXELS as f64;
        if max_semi_axis_vox > budget {
            return Err(Error::InvalidSpec(format!(
                "radius up to {} mm (elongated: {:.1} voxels) does not fit in a {}^3 patch",
                self.radius_range.1, max_semi_axis_vox, self.patch_size
            )));
        }
        Ok(())
    }
}

/// Nominal solid fraction per grade, monotone in invasiveness.
pub fn class_solid_fraction(label: InvasivenessLabel) -> f64 {
    [0.15, 0.40, 0.65, 0.90][label.code()]
}

/// Interior texture frequency per grade, cycles per millimeter.
pub fn class_texture_frequency(label: InvasivenessLabel) -> f64 {
    0.10 + 0.08 * label.code() as f64
}

/// Interior base intensity for a given solid fraction.
fn base_intensity(solid_fraction: f64) -> f64 {
    GROUND_GLASS_INTENSITY + solid_fraction * (SOLID_INTENSITY - GROUND_GLASS_INTENSITY)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<NoduleSample> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let n = spec.patch_size;
    let spacing = (spec.spacing, spec.spacing, spec.spacing);

    let radius = if spec.radius_range.0 == spec.radius_range.1 {
        spec.radius_range.0
    } else {
        rng.gen_range(spec.radius_range.0..spec.radius_range.1)
    };
    let solid = (spec.solid_fraction + rng.gen_range(-SOLID_FRACTION_JITTER..SOLID_FRACTION_JITTER))
        .clamp(0.0, 1.0);
    let freq = (class_texture_frequency(spec.class)
        + rng.gen_range(-FREQUENCY_JITTER..FREQUENCY_JITTER))
    .max(0.01);

    // Volume-preserving elongation along one random axis: a*b*c == r^3.
    let elongation = 1.0 + (MAX_ELONGATION - 1.0) * solid;
    let long_axis = rng.gen_range(0..3usize);
    let mut semi = [radius / elongation.sqrt(); 3];
    semi[long_axis] = radius * elongation;

    let center_of = |_axis: usize, jitter: i64| (n as f64 - 1.0) / 2.0 + jitter as f64;
    let jitter: [i64; 3] = [
        rng.gen_range(-CENTER_JITTER_VOXELS..=CENTER_JITTER_VOXELS),
        rng.gen_range(-CENTER_JITTER_VOXELS..=CENTER_JITTER_VOXELS),
        rng.gen_range(-CENTER_JITTER_VOXELS..=CENTER_JITTER_VOXELS),
    ];
    let center = [
        center_of(0, jitter[0]),
        center_of(1, jitter[1]),
        center_of(2, jitter[2]),
    ];

    let interior = base_intensity(solid);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();

    let mut patch = Volume::filled((n, n, n), spacing, BACKGROUND_INTENSITY)?;
    let mut mask = Mask::zeros((n, n, n));
    let two_pi = std::f64::consts::TAU;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 - center[0]) * spec.spacing;
                let dy = (y as f64 - center[1]) * spec.spacing;
                let dz = (z as f64 - center[2]) * spec.spacing;
                let q = (dx / semi[0]).powi(2) + (dy / semi[1]).powi(2) + (dz / semi[2]).powi(2);
                let mut v = if q <= 1.0 {
                    mask.set(x, y, z, 1);
                    let t = (two_pi * freq * dx).cos()
                        * (two_pi * freq * dy).cos()
                        * (two_pi * freq * dz).cos();
                    interior + spec.texture_amplitude * t
                } else {
                    BACKGROUND_INTENSITY
                };
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                // Quantize through the on-disk scalar so save/load is bit-exact.
                patch.set(x, y, z, v as f32 as f64);
            }
        }
    }
    if mask.foreground_count() == 0 {
        return Err(Error::InvalidSpec("nodule produced an empty mask".into()));
    }
    let id = format!("{}_{:016x}", spec.class.name(), spec.seed);
    NoduleSample::new(id, patch, mask, spec.class)
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over (seed + index)
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `class_counts[label]` samples per grade; per-sample seeds derive
/// from `(seed, running index)`, solid fractions from the grade.
pub fn generate_dataset(
    class_counts: [usize; 4],
    base_spec: &PhantomSpec,
    seed: u64,
) -> Result<Dataset> {
    if class_counts.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidArgument("all class counts are zero".into()));
    }
    let mut samples = Vec::new();
    let mut manifest = Vec::new();
    let mut index: u64 = 0;
    for label in InvasivenessLabel::ALL {
        for i in 0..class_counts[label.code()] {
            let spec = PhantomSpec {
                class: label,
                solid_fraction: class_solid_fraction(label),
                seed: derive_seed(seed, index),
                ..base_spec.clone()
            };
            let mut sample = generate_phantom(&spec)?;
            sample.id = format!("{}_{i:04}", label.name());
            manifest.push(ManifestEntry {
                id: sample.id.clone(),
                label: label.code(),
                volume_path: format!("{}_patch.json", sample.id),
                mask_path: format!("{}_mask.json", sample.id),
            });
            samples.push(sample);
            index += 1;
        }
    }
    Dataset::new(samples, manifest)
}

/// A small-nodule spec suitable for fast tests and the desk-scale benchmark.
pub fn default_spec() -> PhantomSpec {
    PhantomSpec {
        class: InvasivenessLabel::AAH,
        patch_size: 32,
        spacing: 1.0,
        radius_range: (4.0, 6.5),
        solid_fraction: class_solid_fraction(InvasivenessLabel::AAH),
        texture_amplitude: 120.0,
        noise_sigma: 20.0,
        seed: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism() {
        let spec = default_spec();
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.patch.voxels, b.patch.voxels);
        assert_eq!(a.mask.voxels, b.mask.voxels);
    }

    #[test]
    fn degenerate_generator_constant_interior() {
        let spec = PhantomSpec {
            texture_amplitude: 0.0,
            noise_sigma: 0.0,
            ..default_spec()
        };
        let s = generate_phantom(&spec).unwrap();
        let mut interior_values = std::collections::BTreeSet::new();
        for (i, &m) in s.mask.voxels.iter().enumerate() {
            if m == 1 {
                interior_values.insert(s.patch.voxels[i].to_bits());
            }
        }
        assert_eq!(interior_values.len(), 1);
    }

    #[test]
    fn sphere_mask_volume_matches_analytic() {
        // Zero solid fraction keeps the shape spherical (elongation 1).
        let spec = PhantomSpec {
            class: InvasivenessLabel::AAH,
            patch_size: 26,
            spacing: 1.0,
            radius_range: (8.0, 8.0),
            solid_fraction: 0.0,
            texture_amplitude: 0.0,
            noise_sigma: 0.0,
            seed: 3,
        };
        // Pull solid jitter to zero by constructing the sample directly at the
        // spec level: run over seeds until the jittered solid stays tiny is
        // brittle, so instead check against the jittered ellipsoid volume,
        // which is volume-preserving and still (4/3)*pi*r^3.
        let s = generate_phantom(&spec).unwrap();
        let count = s.mask.foreground_count() as f64;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 8.0f64.powi(3);
        assert!(
            (count - analytic).abs() / analytic < 0.05,
            "count {count} vs analytic {analytic}"
        );
    }

    #[test]
    fn oversized_radius_rejected() {
        let spec = PhantomSpec {
            radius_range: (4.0, 30.0),
            ..default_spec()
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn dataset_histogram_and_determinism() {
        let base = PhantomSpec {
            patch_size: 16,
            radius_range: (2.0, 2.7),
            ..default_spec()
        };
        let ds = generate_dataset([2, 0, 0, 3], &base, 42).unwrap();
        assert_eq!(ds.samples.len(), 5);
        assert_eq!(ds.label_histogram(), [2, 0, 0, 3]);
        let ds2 = generate_dataset([2, 0, 0, 3], &base, 42).unwrap();
        assert_eq!(ds.manifest, ds2.manifest);
        assert_eq!(ds.samples, ds2.samples);
        for s in &ds.samples {
            assert_eq!(s.patch.dims, s.mask.dims);
        }
    }

    #[test]
    fn full_scale_counts() {
        let base = PhantomSpec {
            patch_size: 16,
            radius_range: (2.0, 2.7),
            ..default_spec()
        };
        let ds = generate_dataset([158, 136, 53, 329], &base, 7).unwrap();
        assert_eq!(ds.samples.len(), 676);
    }
}
