//! Single-level separable orthonormal 3D Haar transform with symmetric
//! edge-replication padding for odd extents.
//!
//! Band names use one letter per axis in (x, y, z) order; L is the low-pass
//! filter (1/sqrt2, 1/sqrt2) and H the high-pass (1/sqrt2, -1/sqrt2).

use crate::volume::Volume;

pub const BAND_COUNT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    /// Indexed as bx*4 + by*2 + bz with 0 = L, 1 = H per axis:
    /// LLL, LLH, LHL, LHH, HLL, HLH, HHL, HHH.
    pub bands: [Volume; 8],
    /// Dims of the unpadded input; the inverse reconstructs the even-padded
    /// extent, i.e. each dim rounded up to even.
    pub original_dims: (usize, usize, usize),
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
    Z,
}

fn axis_len(dims: (usize, usize, usize), axis: Axis) -> usize {
    match axis {
        Axis::X => dims.0,
        Axis::Y => dims.1,
        Axis::Z => dims.2,
    }
}

fn with_axis_len(dims: (usize, usize, usize), axis: Axis, len: usize) -> (usize, usize, usize) {
    match axis {
        Axis::X => (len, dims.1, dims.2),
        Axis::Y => (dims.0, len, dims.2),
        Axis::Z => (dims.0, dims.1, len),
    }
}

fn at(_dims: (usize, usize, usize), axis: Axis, line: (usize, usize), i: usize) -> (usize, usize, usize) {
    match axis {
        Axis::X => (i, line.0, line.1),
        Axis::Y => (line.0, i, line.1),
        Axis::Z => (line.0, line.1, i),
    }
}

fn lines(dims: (usize, usize, usize), axis: Axis) -> Vec<(usize, usize)> {
    let (a, b) = match axis {
        Axis::X => (dims.1, dims.2),
        Axis::Y => (dims.0, dims.2),
        Axis::Z => (dims.0, dims.1),
    };
    let mut out = Vec::with_capacity(a * b);
    for j in 0..b {
        for i in 0..a {
            out.push((i, j));
        }
    }
    out
}

/// One forward Haar pass along `axis`: returns (low, high) with ceil-halved
/// extent. Odd extents replicate the edge sample first.
fn forward_axis(vol: &Volume, axis: Axis) -> (Volume, Volume) {
    let n = axis_len(vol.dims, axis);
    let padded = n + n % 2;
    let half = padded / 2;
    let out_dims = with_axis_len(vol.dims, axis, half);
    let mut low = Volume::filled(out_dims, vol.spacing, 0.0).unwrap();
    let mut high = Volume::filled(out_dims, vol.spacing, 0.0).unwrap();
    for line in lines(vol.dims, axis) {
        for k in 0..half {
            let ia = 2 * k;
            let ib = (2 * k + 1).min(n - 1);
            let pa = at(vol.dims, axis, line, ia);
            let pb = at(vol.dims, axis, line, ib);
            let a = vol.get(pa.0, pa.1, pa.2);
            let b = vol.get(pb.0, pb.1, pb.2);
            let po = at(out_dims, axis, line, k);
            low.set(po.0, po.1, po.2, (a + b) * INV_SQRT2);
            high.set(po.0, po.1, po.2, (a - b) * INV_SQRT2);
        }
    }
    (low, high)
}

/// Inverse of one axis pass; reconstructs the even (padded) extent.
fn inverse_axis(low: &Volume, high: &Volume, axis: Axis) -> Volume {
    let half = axis_len(low.dims, axis);
    let out_dims = with_axis_len(low.dims, axis, 2 * half);
    let mut out = Volume::filled(out_dims, low.spacing, 0.0).unwrap();
    for line in lines(low.dims, axis) {
        for k in 0..half {
            let pi = at(low.dims, axis, line, k);
            let l = low.get(pi.0, pi.1, pi.2);
            let h = high.get(pi.0, pi.1, pi.2);
            let pa = at(out_dims, axis, line, 2 * k);
            let pb = at(out_dims, axis, line, 2 * k + 1);
            out.set(pa.0, pa.1, pa.2, (l + h) * INV_SQRT2);
            out.set(pb.0, pb.1, pb.2, (l - h) * INV_SQRT2);
        }
    }
    out
}

pub fn haar3d(vol: &Volume) -> WaveletBands {
    let (lx, hx) = forward_axis(vol, Axis::X);
    let mut after_y = Vec::with_capacity(4);
    for v in [&lx, &hx] {
        let (l, h) = forward_axis(v, Axis::Y);
        after_y.push(l);
        after_y.push(h);
    }
    let mut bands = Vec::with_capacity(8);
    for v in &after_y {
        let (l, h) = forward_axis(v, Axis::Z);
        bands.push(l);
        bands.push(h);
    }
    WaveletBands {
        bands: bands.try_into().unwrap(),
        original_dims: vol.dims,
    }
}

pub fn haar3d_inverse(bands: &WaveletBands) -> Volume {
    let mut after_z = Vec::with_capacity(4);
    for pair in bands.bands.chunks(2) {
        after_z.push(inverse_axis(&pair[0], &pair[1], Axis::Z));
    }
    let mut after_y = Vec::with_capacity(2);
    for pair in after_z.chunks(2) {
        after_y.push(inverse_axis(&pair[0], &pair[1], Axis::Y));
    }
    inverse_axis(&after_y[0], &after_y[1], Axis::X)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_volume(dims: (usize, usize, usize), seed: u64) -> Volume {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, (1.0, 1.0, 1.0), (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect()).unwrap()
    }

    #[test]
    fn constant_volume_energy_in_lll_only() {
        let c = 3.5;
        let vol = Volume::filled((4, 4, 4), (1.0, 1.0, 1.0), c).unwrap();
        let bands = haar3d(&vol);
        let expected = c * 2.0f64.powf(1.5);
        for &v in &bands.bands[0].voxels {
            assert!((v - expected).abs() < 1e-12);
        }
        for band in &bands.bands[1..] {
            assert!(band.voxels.iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn inverse_is_identity_for_even_dims() {
        let vol = random_volume((8, 6, 4), 1);
        let rec = haar3d_inverse(&haar3d(&vol));
        assert_eq!(rec.dims, vol.dims);
        for (a, b) in vol.voxels.iter().zip(&rec.voxels) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn odd_dims_reconstruct_padded_input() {
        let vol = random_volume((5, 7, 3), 2);
        let bands = haar3d(&vol);
        assert_eq!(bands.bands[0].dims, (3, 4, 2));
        let rec = haar3d_inverse(&bands);
        assert_eq!(rec.dims, (6, 8, 4));
        // interior of the reconstruction matches the input
        for z in 0..3 {
            for y in 0..7 {
                for x in 0..5 {
                    assert!((rec.get(x, y, z) - vol.get(x, y, z)).abs() < 1e-10);
                }
            }
        }
        // replicated edge: padded layer equals the last input layer
        for y in 0..7 {
            for x in 0..5 {
                assert!((rec.get(x, y, 3) - vol.get(x, y, 2)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parseval_energy_conservation() {
        for seed in 0..5 {
            let vol = random_volume((6, 8, 4), seed);
            let bands = haar3d(&vol);
            let input_energy: f64 = vol.voxels.iter().map(|v| v * v).sum();
            let band_energy: f64 = bands
                .bands
                .iter()
                .flat_map(|b| b.voxels.iter())
                .map(|v| v * v)
                .sum();
            assert!(
                (input_energy - band_energy).abs() < 1e-9 * input_energy.max(1.0),
                "{input_energy} vs {band_energy}"
            );
        }
    }
}
