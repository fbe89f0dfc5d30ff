//! Gray-level co-occurrence features over the 13 unique 3D directions at
//! distance 1, built symmetrically and averaged across directions.

use crate::error::{Error, Result};
use crate::radiomics::{DiscretizedVolume, FeatureVector};
use crate::volume::Mask;

/// One canonical offset per opposite pair.
pub const DIRECTIONS: [(i32, i32, i32); 13] = [
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 1, 0),
    (1, -1, 0),
    (1, 0, 1),
    (1, 0, -1),
    (0, 1, 1),
    (0, 1, -1),
    (1, 1, 1),
    (1, 1, -1),
    (1, -1, 1),
    (1, -1, -1),
];

/// Symmetric co-occurrence counts for one offset.
#[derive(Debug, Clone, PartialEq)]
pub struct GLCMatrix {
    pub ng: usize,
    /// Row-major Ng x Ng, counts or probabilities.
    pub entries: Vec<f64>,
    pub offset: (i32, i32, i32),
}

impl GLCMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.ng + j]
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().sum()
    }

    /// Normalizes entries to sum to 1. No-op direction with zero pairs stays zero.
    pub fn normalize(&mut self) {
        let total = self.total();
        if total > 0.0 {
            for e in &mut self.entries {
                *e /= total;
            }
        }
    }
}

pub fn build_glcm(disc: &DiscretizedVolume, mask: &Mask, offset: (i32, i32, i32)) -> Result<GLCMatrix> {
    if disc.dims != mask.dims {
        return Err(Error::DimMismatch("discretized volume vs mask".into()));
    }
    let ng = disc.ng as usize;
    if ng == 0 {
        return Err(Error::EmptyMask);
    }
    let (nx, ny, nz) = disc.dims;
    let mut entries = vec![0.0f64; ng * ng];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) != 1 {
                    continue;
                }
                let tx = x as i32 + offset.0;
                let ty = y as i32 + offset.1;
                let tz = z as i32 + offset.2;
                if tx < 0 || ty < 0 || tz < 0 || tx >= nx as i32 || ty >= ny as i32 || tz >= nz as i32 {
                    continue;
                }
                let (tx, ty, tz) = (tx as usize, ty as usize, tz as usize);
                if mask.get(tx, ty, tz) != 1 {
                    continue;
                }
                let i = disc.level(x, y, z) as usize - 1;
                let j = disc.level(tx, ty, tz) as usize - 1;
                entries[i * ng + j] += 1.0;
                entries[j * ng + i] += 1.0;
            }
        }
    }
    Ok(GLCMatrix { ng, entries, offset })
}

/// Nine Haralick-style features of one normalized symmetric GLCM.
pub fn matrix_features(m: &GLCMatrix) -> [f64; 9] {
    let ng = m.ng;
    // marginal mean/variance; symmetric matrix so x and y marginals agree
    let mut mu = 0.0;
    for i in 0..ng {
        for j in 0..ng {
            mu += (i as f64 + 1.0) * m.get(i, j);
        }
    }
    let mut sigma2 = 0.0;
    for i in 0..ng {
        for j in 0..ng {
            sigma2 += ((i as f64 + 1.0) - mu).powi(2) * m.get(i, j);
        }
    }
    let mut contrast = 0.0;
    let mut dissimilarity = 0.0;
    let mut homogeneity = 0.0;
    let mut energy = 0.0;
    let mut entropy = 0.0;
    let mut corr_num = 0.0;
    let mut shade = 0.0;
    let mut prominence = 0.0;
    let mut max_p = 0.0f64;
    for i in 0..ng {
        for j in 0..ng {
            let p = m.get(i, j);
            if p == 0.0 {
                continue;
            }
            let di = i as f64 - j as f64;
            let li = i as f64 + 1.0;
            let lj = j as f64 + 1.0;
            contrast += di * di * p;
            dissimilarity += di.abs() * p;
            homogeneity += p / (1.0 + di * di);
            energy += p * p;
            entropy -= p * p.log2();
            corr_num += (li - mu) * (lj - mu) * p;
            shade += (li + lj - 2.0 * mu).powi(3) * p;
            prominence += (li + lj - 2.0 * mu).powi(4) * p;
            max_p = max_p.max(p);
        }
    }
    let correlation = if sigma2 > 0.0 { corr_num / sigma2 } else { 0.0 };
    [
        contrast,
        dissimilarity,
        homogeneity,
        energy,
        entropy,
        correlation,
        shade,
        prominence,
        max_p,
    ]
}

const FEATURE_NAMES: [&str; 9] = [
    "contrast",
    "dissimilarity",
    "homogeneity",
    "energy",
    "entropy",
    "correlation",
    "cluster_shade",
    "cluster_prominence",
    "max_probability",
];

/// Direction-averaged GLCM features. Directions with no co-occurring pair are
/// skipped; a mask with no pairs at all yields zeros.
pub fn glcm_features(disc: &DiscretizedVolume, mask: &Mask) -> Result<FeatureVector> {
    let mut sums = [0.0f64; 9];
    let mut used = 0usize;
    for &offset in &DIRECTIONS {
        let mut m = build_glcm(disc, mask, offset)?;
        if m.total() == 0.0 {
            continue;
        }
        m.normalize();
        let f = matrix_features(&m);
        for (s, v) in sums.iter_mut().zip(f) {
            *s += v;
        }
        used += 1;
    }
    let mut fv = FeatureVector::new();
    for (name, sum) in FEATURE_NAMES.iter().zip(sums) {
        fv.push(*name, if used > 0 { sum / used as f64 } else { 0.0 });
    }
    Ok(fv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radiomics::discretize;
    use crate::volume::Volume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn normalized_matrix_sums_to_one_and_is_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 6;
        let voxels: Vec<f64> = (0..n * n * n).map(|_| rng.gen_range(0.0..100.0)).collect();
        let vol = Volume::new((n, n, n), (1.0, 1.0, 1.0), voxels).unwrap();
        let mask = Mask::new((n, n, n), vec![1; n * n * n]).unwrap();
        let disc = discretize(&vol, &mask, 25.0).unwrap();
        for &offset in &DIRECTIONS {
            let mut m = build_glcm(&disc, &mask, offset).unwrap();
            m.normalize();
            assert!((m.total() - 1.0).abs() < 1e-12);
            for i in 0..m.ng {
                for j in 0..m.ng {
                    assert_eq!(m.get(i, j), m.get(j, i));
                }
            }
        }
    }

    #[test]
    fn constant_region_degenerate() {
        let vol = Volume::filled((4, 4, 4), (1.0, 1.0, 1.0), 9.0).unwrap();
        let mask = Mask::new((4, 4, 4), vec![1; 64]).unwrap();
        let disc = discretize(&vol, &mask, 25.0).unwrap();
        let fv = glcm_features(&disc, &mask).unwrap();
        assert_eq!(fv.get("energy"), Some(1.0));
        assert_eq!(fv.get("contrast"), Some(0.0));
        assert_eq!(fv.get("entropy"), Some(0.0));
        assert_eq!(fv.get("correlation"), Some(0.0));
    }

    #[test]
    fn checkerboard_axial_contrast() {
        // 2D checkerboard embedded in a single slice, levels alternate 1/2
        let n = 6;
        let mut voxels = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                voxels[x + n * y] = ((x + y) % 2) as f64;
            }
        }
        let vol = Volume::new((n, n, 1), (1.0, 1.0, 1.0), voxels).unwrap();
        let mask = Mask::new((n, n, 1), vec![1; n * n]).unwrap();
        let disc = discretize(&vol, &mask, 1.0).unwrap();
        let mut m = build_glcm(&disc, &mask, (1, 0, 0)).unwrap();
        m.normalize();
        let f = matrix_features(&m);
        assert!((f[0] - 1.0).abs() < 1e-12, "contrast {}", f[0]);
    }

    /// Brute-force oracle: enumerate voxel pairs for both signs of the
    /// offset, accumulate a plain 2D count table, then compute the features
    /// from first principles.
    pub(crate) fn oracle_features(
        disc: &DiscretizedVolume,
        mask: &Mask,
        offset: (i32, i32, i32),
    ) -> Option<[f64; 9]> {
        let ng = disc.ng as usize;
        let (nx, ny, nz) = disc.dims;
        let mut counts = vec![vec![0.0f64; ng]; ng];
        let mut total = 0.0;
        for &sign in &[1i32, -1i32] {
            let d = (offset.0 * sign, offset.1 * sign, offset.2 * sign);
            for z in 0..nz as i32 {
                for y in 0..ny as i32 {
                    for x in 0..nx as i32 {
                        let (tx, ty, tz) = (x + d.0, y + d.1, z + d.2);
                        if tx < 0 || ty < 0 || tz < 0 || tx >= nx as i32 || ty >= ny as i32 || tz >= nz as i32 {
                            continue;
                        }
                        let a = (x as usize, y as usize, z as usize);
                        let b = (tx as usize, ty as usize, tz as usize);
                        if mask.get(a.0, a.1, a.2) == 1 && mask.get(b.0, b.1, b.2) == 1 {
                            let i = disc.level(a.0, a.1, a.2) as usize - 1;
                            let j = disc.level(b.0, b.1, b.2) as usize - 1;
                            counts[i][j] += 1.0;
                            total += 1.0;
                        }
                    }
                }
            }
        }
        if total == 0.0 {
            return None;
        }
        let p = |i: usize, j: usize| counts[i][j] / total;
        let mut mu = 0.0;
        for i in 0..ng {
            for j in 0..ng {
                mu += (i + 1) as f64 * p(i, j);
            }
        }
        let mut var = 0.0;
        for i in 0..ng {
            for j in 0..ng {
                var += ((i + 1) as f64 - mu).powi(2) * p(i, j);
            }
        }
        let mut out = [0.0f64; 9];
        for i in 0..ng {
            for j in 0..ng {
                let pij = p(i, j);
                if pij == 0.0 {
                    continue;
                }
                let d = i as f64 - j as f64;
                out[0] += d * d * pij;
                out[1] += d.abs() * pij;
                out[2] += pij / (1.0 + d * d);
                out[3] += pij * pij;
                out[4] -= pij * pij.log2();
                if var > 0.0 {
                    out[5] += ((i + 1) as f64 - mu) * ((j + 1) as f64 - mu) * pij / var;
                }
                out[6] += ((i + j + 2) as f64 - 2.0 * mu).powi(3) * pij;
                out[7] += ((i + j + 2) as f64 - 2.0 * mu).powi(4) * pij;
                out[8] = out[8].max(pij);
            }
        }
        Some(out)
    }

    #[test]
    fn random_region_matches_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let n = 8;
        let voxels: Vec<f64> = (0..n * n * n).map(|_| rng.gen_range(0.0..4.0)).collect();
        let mask_voxels: Vec<u8> = (0..n * n * n).map(|_| rng.gen_bool(0.7) as u8).collect();
        let vol = Volume::new((n, n, n), (1.0, 1.0, 1.0), voxels).unwrap();
        let mask = Mask::new((n, n, n), mask_voxels).unwrap();
        let disc = discretize(&vol, &mask, 1.0).unwrap();
        assert_eq!(disc.ng, 4);
        let fv = glcm_features(&disc, &mask).unwrap();
        let mut sums = [0.0f64; 9];
        let mut used = 0;
        for &offset in &DIRECTIONS {
            if let Some(f) = oracle_features(&disc, &mask, offset) {
                for (s, v) in sums.iter_mut().zip(f) {
                    *s += v;
                }
                used += 1;
            }
        }
        for (k, name) in super::FEATURE_NAMES.iter().enumerate() {
            let expected = sums[k] / used as f64;
            let got = fv.get(name).unwrap();
            assert!((got - expected).abs() < 1e-10, "{name}: {got} vs {expected}");
        }
    }
}
