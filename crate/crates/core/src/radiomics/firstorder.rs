//! First-order intensity statistics of the masked region.
//!
//! Conventions: population variance, population skewness, uncorrected
//! kurtosis m4/m2^2 (normal -> 3), entropy/uniformity over the fixed-width
//! discretized histogram, percentiles by linear interpolation between
//! closest ranks.

use crate::error::{Error, Result};
use crate::radiomics::{discretize, FeatureVector};
use crate::volume::{Mask, Volume};

/// Linear-interpolation percentile of a sorted slice, p in [0,100].
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn first_order_features(vol: &Volume, mask: &Mask, bin_width: f64) -> Result<FeatureVector> {
    if vol.dims != mask.dims {
        return Err(Error::DimMismatch(format!(
            "volume dims {:?} != mask dims {:?}",
            vol.dims, mask.dims
        )));
    }
    let values: Vec<f64> = mask
        .voxels
        .iter()
        .zip(&vol.voxels)
        .filter_map(|(&m, &v)| (m == 1).then_some(v))
        .collect();
    if values.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = values.len() as f64;

    let mean = values.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    let mut energy = 0.0;
    let mut mad = 0.0;
    for &v in &values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        energy += v * v;
        mad += d.abs();
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    mad /= n;
    let variance = m2;
    let std = variance.sqrt();
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let kurtosis = if m2 > 0.0 { m4 / (m2 * m2) } else { 0.0 };
    let rms = (energy / n).sqrt();

    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    let median = percentile_sorted(&sorted, 50.0);
    let p10 = percentile_sorted(&sorted, 10.0);
    let p90 = percentile_sorted(&sorted, 90.0);
    let iqr = percentile_sorted(&sorted, 75.0) - percentile_sorted(&sorted, 25.0);

    // Robust MAD: mean absolute deviation within the 10-90 percentile band,
    // taken from that band's own mean.
    let band: Vec<f64> = sorted.iter().cloned().filter(|&v| v >= p10 && v <= p90).collect();
    let robust_mad = if band.is_empty() {
        0.0
    } else {
        let bm = band.iter().sum::<f64>() / band.len() as f64;
        band.iter().map(|v| (v - bm).abs()).sum::<f64>() / band.len() as f64
    };

    let disc = discretize(vol, mask, bin_width)?;
    let mut hist = vec![0usize; disc.ng as usize + 1];
    for (&m, &l) in mask.voxels.iter().zip(&disc.levels) {
        if m == 1 {
            hist[l as usize] += 1;
        }
    }
    let mut entropy = 0.0;
    let mut uniformity = 0.0;
    for &count in &hist[1..] {
        if count > 0 {
            let p = count as f64 / n;
            entropy -= p * p.log2();
            uniformity += p * p;
        }
    }
    let mut fv = FeatureVector::new();
    fv.push("mean", mean);
    fv.push("median", median);
    fv.push("min", min);
    fv.push("max", max);
    fv.push("range", max - min);
    fv.push("variance", variance);
    fv.push("std", std);
    fv.push("skewness", skewness);
    fv.push("kurtosis", kurtosis);
    fv.push("energy", energy);
    fv.push("rms", rms);
    fv.push("entropy", entropy);
    fv.push("uniformity", uniformity);
    fv.push("mad", mad);
    fv.push("robust_mad", robust_mad);
    fv.push("p10", p10);
    fv.push("p90", p90);
    fv.push("iqr", iqr);
    Ok(fv)
}
