//! Minimal layer toolkit with exact analytic gradients: dense, 3D convolution
//! with same padding, ReLU, global average pooling, softmax cross-entropy,
//! and SGD with momentum. 64-bit scalars throughout so finite-difference
//! checks have headroom.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major value container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::DimMismatch(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    /// out_dim x in_dim, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayer { out_dim, in_dim, w: vec![0.0; out_dim * in_dim], b: vec![0.0; out_dim] }
    }

    /// He-uniform weight init for layers feeding ReLU; zero biases.
    pub fn he_init(out_dim: usize, in_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = (0..out_dim * in_dim).map(|_| rng.gen_range(-limit..limit)).collect();
        DenseLayer { out_dim, in_dim, w, b: vec![0.0; out_dim] }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::DimMismatch(format!(
                "dense input {} != in_dim {}",
                x.len(),
                self.in_dim
            )));
        }
        let mut y = self.b.clone();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            y[o] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        Ok(y)
    }

    /// Returns (dx, dw, db) for upstream gradient dy.
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if x.len() != self.in_dim || dy.len() != self.out_dim {
            return Err(Error::DimMismatch("dense backward shapes".into()));
        }
        let mut dx = vec![0.0; self.in_dim];
        let mut dw = vec![0.0; self.out_dim * self.in_dim];
        for o in 0..self.out_dim {
            let g = dy[o];
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                dx[i] += row[i] * g;
                drow[i] = x[i] * g;
            }
        }
        Ok((dx, dw, dy.to_vec()))
    }
}

/// 3D convolution, zero same-padding, configurable stride. Kernel extents
/// must be odd. Feature maps are shaped [channels, nx, ny, nz], z fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3DLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: (usize, usize, usize),
    pub stride: usize,
    /// out_ch x in_ch x kx x ky x kz, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv3DLayer {
    pub fn new(out_ch: usize, in_ch: usize, kernel: (usize, usize, usize), stride: usize) -> Result<Self> {
        if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 || kernel.2 % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "same padding requires odd kernel extents, got {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let n = out_ch * in_ch * kernel.0 * kernel.1 * kernel.2;
        Ok(Conv3DLayer { out_ch, in_ch, kernel, stride, w: vec![0.0; n], b: vec![0.0; out_ch] })
    }

    pub fn he_init(
        out_ch: usize,
        in_ch: usize,
        kernel: (usize, usize, usize),
        stride: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let mut layer = Conv3DLayer::new(out_ch, in_ch, kernel, stride)?;
        let fan_in = (in_ch * kernel.0 * kernel.1 * kernel.2) as f64;
        let limit = (6.0 / fan_in).sqrt();
        for w in &mut layer.w {
            *w = rng.gen_range(-limit..limit);
        }
        Ok(layer)
    }

    pub fn out_spatial(&self, spatial: (usize, usize, usize)) -> (usize, usize, usize) {
        (
            spatial.0.div_ceil(self.stride),
            spatial.1.div_ceil(self.stride),
            spatial.2.div_ceil(self.stride),
        )
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        if x.shape.len() != 4 || x.shape[0] != self.in_ch {
            return Err(Error::DimMismatch(format!(
                "conv3d expects [in_ch={}, nx, ny, nz], got {:?}",
                self.in_ch, x.shape
            )));
        }
        Ok((x.shape[1], x.shape[2], x.shape[3]))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (nx, ny, nz) = self.check_input(x)?;
        let (ox, oy, oz) = self.out_spatial((nx, ny, nz));
        let (kx, ky, kz) = self.kernel;
        let pads = (
            (((ox - 1) * self.stride + kx).saturating_sub(nx) / 2) as i64,
            (((oy - 1) * self.stride + ky).saturating_sub(ny) / 2) as i64,
            (((oz - 1) * self.stride + kz).saturating_sub(nz) / 2) as i64,
        );
        let mut y = Tensor::zeros(vec![self.out_ch, ox, oy, oz]);
        let in_stride = (nx * ny * nz, ny * nz, nz);
        let kvol = kx * ky * kz;
        for oc in 0..self.out_ch {
            let bias = self.b[oc];
            for cx in 0..ox {
                for cy in 0..oy {
                    for cz in 0..oz {
                        let mut sum = bias;
                        let x0 = (cx * self.stride) as i64 - pads.0;
                        let y0 = (cy * self.stride) as i64 - pads.1;
                        let z0 = (cz * self.stride) as i64 - pads.2;
                        for ic in 0..self.in_ch {
                            let wbase = (oc * self.in_ch + ic) * kvol;
                            let xbase = ic * in_stride.0;
                            for i in 0..kx {
                                let sx = x0 + i as i64;
                                if sx < 0 || sx >= nx as i64 {
                                    continue;
                                }
                                for j in 0..ky {
                                    let sy = y0 + j as i64;
                                    if sy < 0 || sy >= ny as i64 {
                                        continue;
                                    }
                                    for k in 0..kz {
                                        let sz = z0 + k as i64;
                                        if sz < 0 || sz >= nz as i64 {
                                            continue;
                                        }
                                        let xi = xbase
                                            + sx as usize * in_stride.1
                                            + sy as usize * in_stride.2
                                            + sz as usize;
                                        let wi = wbase + (i * ky + j) * kz + k;
                                        sum += self.w[wi] * x.values[xi];
                                    }
                                }
                            }
                        }
                        y.values[((oc * ox + cx) * oy + cy) * oz + cz] = sum;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Returns (dx, dw, db).
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (nx, ny, nz) = self.check_input(x)?;
        let (ox, oy, oz) = self.out_spatial((nx, ny, nz));
        if dy.shape != vec![self.out_ch, ox, oy, oz] {
            return Err(Error::DimMismatch(format!(
                "conv3d backward dy shape {:?}, expected {:?}",
                dy.shape,
                [self.out_ch, ox, oy, oz]
            )));
        }
        let (kx, ky, kz) = self.kernel;
        let pads = (
            (((ox - 1) * self.stride + kx).saturating_sub(nx) / 2) as i64,
            (((oy - 1) * self.stride + ky).saturating_sub(ny) / 2) as i64,
            (((oz - 1) * self.stride + kz).saturating_sub(nz) / 2) as i64,
        );
        let mut dx = Tensor::zeros(x.shape.clone());
        let mut dw = vec![0.0; self.w.len()];
        let mut db = vec![0.0; self.out_ch];
        let in_stride = (nx * ny * nz, ny * nz, nz);
        let kvol = kx * ky * kz;
        for oc in 0..self.out_ch {
            for cx in 0..ox {
                for cy in 0..oy {
                    for cz in 0..oz {
                        let g = dy.values[((oc * ox + cx) * oy + cy) * oz + cz];
                        if g == 0.0 {
                            continue;
                        }
                        db[oc] += g;
                        let x0 = (cx * self.stride) as i64 - pads.0;
                        let y0 = (cy * self.stride) as i64 - pads.1;
                        let z0 = (cz * self.stride) as i64 - pads.2;
                        for ic in 0..self.in_ch {
                            let wbase = (oc * self.in_ch + ic) * kvol;
                            let xbase = ic * in_stride.0;
                            for i in 0..kx {
                                let sx = x0 + i as i64;
                                if sx < 0 || sx >= nx as i64 {
                                    continue;
                                }
                                for j in 0..ky {
                                    let sy = y0 + j as i64;
                                    if sy < 0 || sy >= ny as i64 {
                                        continue;
                                    }
                                    for k in 0..kz {
                                        let sz = z0 + k as i64;
                                        if sz < 0 || sz >= nz as i64 {
                                            continue;
                                        }
                                        let xi = xbase
                                            + sx as usize * in_stride.1
                                            + sy as usize * in_stride.2
                                            + sz as usize;
                                        let wi = wbase + (i * ky + j) * kz + k;
                                        dw[wi] += x.values[xi] * g;
                                        dx.values[xi] += self.w[wi] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((dx, dw, db))
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// dy masked by the forward input's sign.
pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

/// Mean over each channel's spatial block: [ch, nx, ny, nz] -> [ch].
pub fn global_avg_pool(x: &Tensor) -> Result<Vec<f64>> {
    if x.shape.len() != 4 {
        return Err(Error::DimMismatch(format!("gap expects rank-4 input, got {:?}", x.shape)));
    }
    let ch = x.shape[0];
    let vol: usize = x.shape[1..].iter().product();
    let mut out = vec![0.0; ch];
    for c in 0..ch {
        out[c] = x.values[c * vol..(c + 1) * vol].iter().sum::<f64>() / vol as f64;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(x_shape: &[usize], dy: &[f64]) -> Result<Tensor> {
    let ch = x_shape[0];
    let vol: usize = x_shape[1..].iter().product();
    if dy.len() != ch {
        return Err(Error::DimMismatch("gap backward dy length".into()));
    }
    let mut dx = Tensor::zeros(x_shape.to_vec());
    for c in 0..ch {
        let g = dy[c] / vol as f64;
        for v in &mut dx.values[c * vol..(c + 1) * vol] {
            *v = g;
        }
    }
    Ok(dx)
}

/// Numerically stable softmax + cross-entropy; returns (loss, probs, dlogits).
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let loss = -(probs[label].ln());
    let mut dlogits = probs.clone();
    dlogits[label] -= 1.0;
    Ok((loss, probs, dlogits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SGDConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for SGDConfig {
    fn default() -> Self {
        SGDConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 8,
            max_epochs: 20,
            patience: 5,
            seed: 0,
        }
    }
}

impl SGDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::InvalidArgument("batch_size and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// v <- mu*v - lr*g; p <- p + v.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::DimMismatch("sgd_step buffer lengths".into()));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Central finite differences of a scalar function at x.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max relative error between an analytic and a numeric gradient, with an
/// absolute floor to keep near-zero entries from blowing up the ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
