//! Gray-level run-length features over the same 13 directions as the GLCM
//! family. A run is a maximal sequence of masked voxels of equal gray level
//! along a direction ray.

use crate::error::{Error, Result};
use crate::radiomics::glcm::DIRECTIONS;
use crate::radiomics::{DiscretizedVolume, FeatureVector};
use crate::volume::Mask;

/// Run counts for one direction: Ng rows, Nr (max run length) columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GLRLMatrix {
    pub ng: usize,
    pub nr: usize,
    pub counts: Vec<f64>,
    pub direction: (i32, i32, i32),
}

impl GLRLMatrix {
    #[inline]
    pub fn get(&self, level: usize, run_len: usize) -> f64 {
        self.counts[level * self.nr + run_len]
    }

    pub fn total_runs(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Sum of run_length * count; equals the masked voxel count.
    pub fn covered_voxels(&self) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.ng {
            for j in 0..self.nr {
                sum += (j + 1) as f64 * self.get(i, j);
            }
        }
        sum
    }
}

pub fn build_glrlm(disc: &DiscretizedVolume, mask: &Mask, direction: (i32, i32, i32)) -> Result<GLRLMatrix> {
    if disc.dims != mask.dims {
        return Err(Error::DimMismatch("discretized volume vs mask".into()));
    }
    let ng = disc.ng as usize;
    if ng == 0 {
        return Err(Error::EmptyMask);
    }
    let (nx, ny, nz) = disc.dims;
    let nr = nx.max(ny).max(nz);
    let mut counts = vec![0.0f64; ng * nr];
    let in_bounds = |x: i32, y: i32, z: i32| {
        x >= 0 && y >= 0 && z >= 0 && x < nx as i32 && y < ny as i32 && z < nz as i32
    };
    let masked_level = |x: i32, y: i32, z: i32| -> Option<u32> {
        if in_bounds(x, y, z) && mask.get(x as usize, y as usize, z as usize) == 1 {
            Some(disc.level(x as usize, y as usize, z as usize))
        } else {
            None
        }
    };
    for z in 0..nz as i32 {
        for y in 0..ny as i32 {
            for x in 0..nx as i32 {
                let level = match masked_level(x, y, z) {
                    Some(l) => l,
                    None => continue,
                };
                // run starts here iff the predecessor does not continue it
                if masked_level(x - direction.0, y - direction.1, z - direction.2) == Some(level) {
                    continue;
                }
                let mut len = 1usize;
                let (mut cx, mut cy, mut cz) = (x + direction.0, y + direction.1, z + direction.2);
                while masked_level(cx, cy, cz) == Some(level) {
                    len += 1;
                    cx += direction.0;
                    cy += direction.1;
                    cz += direction.2;
                }
                counts[(level as usize - 1) * nr + (len - 1)] += 1.0;
            }
        }
    }
    Ok(GLRLMatrix { ng, nr, counts, direction })
}

const FEATURE_NAMES: [&str; 7] = ["sre", "lre", "gln", "rln", "rp", "lglre", "hglre"];

fn matrix_features(m: &GLRLMatrix, masked_voxels: f64) -> [f64; 7] {
    let n_runs = m.total_runs();
    if n_runs == 0.0 {
        return [0.0; 7];
    }
    let mut sre = 0.0;
    let mut lre = 0.0;
    let mut lglre = 0.0;
    let mut hglre = 0.0;
    let mut row_sums = vec![0.0f64; m.ng];
    let mut col_sums = vec![0.0f64; m.nr];
    for i in 0..m.ng {
        for j in 0..m.nr {
            let c = m.get(i, j);
            if c == 0.0 {
                continue;
            }
            let level = (i + 1) as f64;
            let run = (j + 1) as f64;
            sre += c / (run * run);
            lre += c * run * run;
            lglre += c / (level * level);
            hglre += c * level * level;
            row_sums[i] += c;
            col_sums[j] += c;
        }
    }
    let gln: f64 = row_sums.iter().map(|s| s * s).sum::<f64>() / n_runs;
    let rln: f64 = col_sums.iter().map(|s| s * s).sum::<f64>() / n_runs;
    [
        sre / n_runs,
        lre / n_runs,
        gln,
        rln,
        n_runs / masked_voxels,
        lglre / n_runs,
        hglre / n_runs,
    ]
}

/// Direction-averaged run-length features.
pub fn glrlm_features(disc: &DiscretizedVolume, mask: &Mask) -> Result<FeatureVector> {
    let masked_voxels = mask.foreground_count() as f64;
    if masked_voxels == 0.0 {
        return Err(Error::EmptyMask);
    }
    let mut sums = [0.0f64; 7];
    for &direction in &DIRECTIONS {
        let m = build_glrlm(disc, mask, direction)?;
        debug_assert_eq!(m.covered_voxels(), masked_voxels);
        let f = matrix_features(&m, masked_voxels);
        for (s, v) in sums.iter_mut().zip(f) {
            *s += v;
        }
    }
    let mut fv = FeatureVector::new();
    for (name, sum) in FEATURE_NAMES.iter().zip(sums) {
        fv.push(*name, sum / DIRECTIONS.len() as f64);
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
    fn single_line_run() {
        let n = 5;
        let vol = Volume::filled((1, 1, n), (1.0, 1.0, 1.0), 2.0).unwrap();
        let mask = Mask::new((1, 1, n), vec![1; n]).unwrap();
        let disc = discretize(&vol, &mask, 1.0).unwrap();
        let m = build_glrlm(&disc, &mask, (0, 0, 1)).unwrap();
        assert_eq!(m.total_runs(), 1.0);
        assert_eq!(m.get(0, n - 1), 1.0);
        let f = matrix_features(&m, n as f64);
        assert!((f[4] - 1.0 / n as f64).abs() < 1e-15); // RP
    }

    #[test]
    fn alternating_levels_all_unit_runs() {
        let n = 6;
        let voxels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let vol = Volume::new((n, 1, 1), (1.0, 1.0, 1.0), voxels).unwrap();
        let mask = Mask::new((n, 1, 1), vec![1; n]).unwrap();
        let disc = discretize(&vol, &mask, 1.0).unwrap();
        let m = build_glrlm(&disc, &mask, (1, 0, 0)).unwrap();
        assert_eq!(m.total_runs(), n as f64);
        let f = matrix_features(&m, n as f64);
        assert_eq!(f[0], 1.0); // SRE
    }

    /// Ray-walk oracle: enumerate every complete ray of the grid for the
    /// direction, collect masked segments, and split them into equal-level
    /// runs with a plain scan.
    pub(crate) fn oracle_matrix(
        disc: &DiscretizedVolume,
        mask: &Mask,
        direction: (i32, i32, i32),
    ) -> std::collections::BTreeMap<(u32, usize), f64> {
        let (nx, ny, nz) = disc.dims;
        let mut runs = std::collections::BTreeMap::new();
        let mut visit_ray = |start: (i32, i32, i32)| {
            let mut seq: Vec<Option<u32>> = Vec::new();
            let (mut x, mut y, mut z) = start;
            while x >= 0 && y >= 0 && z >= 0 && x < nx as i32 && y < ny as i32 && z < nz as i32 {
                let m = mask.get(x as usize, y as usize, z as usize);
                seq.push((m == 1).then(|| disc.level(x as usize, y as usize, z as usize)));
                x += direction.0;
                y += direction.1;
                z += direction.2;
            }
            let mut i = 0;
            while i < seq.len() {
                match seq[i] {
                    None => i += 1,
                    Some(level) => {
                        let mut j = i;
                        while j < seq.len() && seq[j] == Some(level) {
                            j += 1;
                        }
                        *runs.entry((level, j - i)).or_insert(0.0) += 1.0;
                        i = j;
                    }
                }
            }
        };
        // ray starts: voxels whose predecessor is outside the grid
        for z in 0..nz as i32 {
            for y in 0..ny as i32 {
                for x in 0..nx as i32 {
                    let (px, py, pz) = (x - direction.0, y - direction.1, z - direction.2);
                    let inside = px >= 0 && py >= 0 && pz >= 0 && px < nx as i32 && py < ny as i32 && pz < nz as i32;
                    if !inside {
                        visit_ray((x, y, z));
                    }
                }
            }
        }
        runs
    }

    #[test]
    fn random_region_matches_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let n = 6;
        let voxels: Vec<f64> = (0..n * n * n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let mask_voxels: Vec<u8> = (0..n * n * n).map(|_| rng.gen_bool(0.75) as u8).collect();
        let vol = Volume::new((n, n, n), (1.0, 1.0, 1.0), voxels).unwrap();
        let mask = Mask::new((n, n, n), mask_voxels).unwrap();
        let disc = discretize(&vol, &mask, 1.0).unwrap();
        for &direction in &DIRECTIONS {
            let m = build_glrlm(&disc, &mask, direction).unwrap();
            let oracle = oracle_matrix(&disc, &mask, direction);
            for i in 0..m.ng {
                for j in 0..m.nr {
                    let expected = oracle.get(&((i + 1) as u32, j + 1)).copied().unwrap_or(0.0);
                    assert_eq!(m.get(i, j), expected, "dir {direction:?} level {} len {}", i + 1, j + 1);
                }
            }
            assert_eq!(m.covered_voxels(), mask.foreground_count() as f64);
        }
    }
}
