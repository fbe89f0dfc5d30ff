//! Fusion architecture and baselines: a small 3D residual encoder producing
//! deep features, dual conversion layers feeding a fusion layer and
//! classifier, a CNN-only head, a one-vs-rest linear SVM over selected
//! radiomics features, and probability combination. Training is plain SGD
//! with momentum and early stopping on validation loss.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, seeded_rng, sgd_step,
    softmax_ce, Conv3DLayer, DenseLayer, SGDConfig, Tensor,
};
use crate::select::SelectionPipeline;
use crate::volume::Volume;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channel count, equal to the embedding width D.
    pub channels: usize,
    /// Residual blocks after the stem; each halves the spatial extent.
    pub blocks: usize,
}

impl EncoderConfig {
    /// Desk-scale default used by tests and the synthetic benchmark.
    pub fn desk() -> Self {
        EncoderConfig { channels: 64, blocks: 3 }
    }

    /// Full-scale preset (D = 2048); defined for completeness, far too slow
    /// for CI.
    pub fn full_scale() -> Self {
        EncoderConfig { channels: 2048, blocks: 3 }
    }
}

/// Stem conv (stride 2) + residual blocks (stride-2 first conv, identity
/// subsample skip) + global average pool. Constant channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder3D {
    pub config: EncoderConfig,
    pub stem: Conv3DLayer,
    pub blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv3DLayer,
    pub conv2: Conv3DLayer,
}

pub struct EncoderCache {
    input: Tensor,
    stem_pre: Tensor,
    blocks: Vec<BlockCache>,
    final_act: Tensor,
}

struct BlockCache {
    input: Tensor,
    h1_pre: Tensor,
    h1: Tensor,
    out_pre: Tensor,
}

/// out[c, i, j, k] = a[c, 2i, 2j, 2k]; matches the ceil(n/2) spatial law of
/// the stride-2 convs.
fn subsample2(a: &Tensor) -> Tensor {
    let (ch, nx, ny, nz) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
    let (ox, oy, oz) = (nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2));
    let mut out = Tensor::zeros(vec![ch, ox, oy, oz]);
    for c in 0..ch {
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    out.values[((c * ox + i) * oy + j) * oz + k] =
                        a.values[((c * nx + 2 * i) * ny + 2 * j) * nz + 2 * k];
                }
            }
        }
    }
    out
}

fn subsample2_backward(d_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let (ch, nx, ny, nz) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ox, oy, oz) = (d_out.shape[1], d_out.shape[2], d_out.shape[3]);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    for c in 0..ch {
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    dx.values[((c * nx + 2 * i) * ny + 2 * j) * nz + 2 * k] +=
                        d_out.values[((c * ox + i) * oy + j) * oz + k];
                }
            }
        }
    }
    dx
}

fn relu_tensor(t: &Tensor) -> Tensor {
    Tensor { shape: t.shape.clone(), values: relu(&t.values) }
}

impl Encoder3D {
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        let d = config.channels;
        if d == 0 || config.blocks == 0 {
            return Err(Error::InvalidArgument("encoder needs channels and blocks >= 1".into()));
        }
        let stem = Conv3DLayer::he_init(d, 1, (3, 3, 3), 2, rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            blocks.push(ResidualBlock {
                conv1: Conv3DLayer::he_init(d, d, (3, 3, 3), 2, rng)?,
                conv2: Conv3DLayer::he_init(d, d, (3, 3, 3), 1, rng)?,
            });
        }
        Ok(Encoder3D { config: config.clone(), stem, blocks })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.channels
    }

    pub fn forward(&self, patch: &Tensor) -> Result<(Vec<f64>, EncoderCache)> {
        let stem_pre = self.stem.forward(patch)?;
        let mut act = relu_tensor(&stem_pre);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let h1_pre = block.conv1.forward(&act)?;
            let h1 = relu_tensor(&h1_pre);
            let h2 = block.conv2.forward(&h1)?;
            let skip = subsample2(&act);
            let mut out_pre = h2;
            for (o, s) in out_pre.values.iter_mut().zip(&skip.values) {
                *o += s;
            }
            let next = relu_tensor(&out_pre);
            blocks.push(BlockCache { input: act, h1_pre, h1, out_pre });
            act = next;
        }
        let emb = global_avg_pool(&act)?;
        Ok((
            emb,
            EncoderCache { input: patch.clone(), stem_pre, blocks, final_act: act },
        ))
    }

    /// Parameter gradients in flatten order.
    pub fn backward(&self, cache: &EncoderCache, d_emb: &[f64]) -> Result<Vec<f64>> {
        let mut d_act = global_avg_pool_backward(&cache.final_act.shape, d_emb)?;
        let mut block_grads: Vec<Vec<f64>> = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d_out_pre = Tensor {
                shape: d_act.shape.clone(),
                values: relu_backward(&bc.out_pre.values, &d_act.values),
            };
            let (d_h1, dw2, db2) = block.conv2.backward(&bc.h1, &d_out_pre)?;
            let d_h1_pre = Tensor {
                shape: d_h1.shape.clone(),
                values: relu_backward(&bc.h1_pre.values, &d_h1.values),
            };
            let (d_in_conv, dw1, db1) = block.conv1.backward(&bc.input, &d_h1_pre)?;
            let mut d_in = subsample2_backward(&d_out_pre, &bc.input.shape);
            for (a, b) in d_in.values.iter_mut().zip(&d_in_conv.values) {
                *a += b;
            }
            let mut grads = dw1;
            grads.extend(db1);
            grads.extend(dw2);
            grads.extend(db2);
            block_grads.push(grads);
            d_act = d_in;
        }
        block_grads.reverse();
        let d_stem_pre = Tensor {
            shape: d_act.shape.clone(),
            values: relu_backward(&cache.stem_pre.values, &d_act.values),
        };
        let (_, dw_stem, db_stem) = self.stem.backward(&cache.input, &d_stem_pre)?;
        let mut out = dw_stem;
        out.extend(db_stem);
        for grads in block_grads {
            out.extend(grads);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.stem.w.len()
            + self.stem.b.len()
            + self
                .blocks
                .iter()
                .map(|b| b.conv1.w.len() + b.conv1.b.len() + b.conv2.w.len() + b.conv2.b.len())
                .sum::<usize>()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(&self.stem.w);
        out.extend(&self.stem.b);
        for b in &self.blocks {
            out.extend(&b.conv1.w);
            out.extend(&b.conv1.b);
            out.extend(&b.conv2.w);
            out.extend(&b.conv2.b);
        }
    }

    fn unflatten_from(&mut self, params: &mut std::slice::Iter<f64>) {
        let take = |dst: &mut [f64], it: &mut std::slice::Iter<f64>| {
            for d in dst {
                *d = *it.next().expect("parameter vector too short");
            }
        };
        take(&mut self.stem.w, params);
        take(&mut self.stem.b, params);
        for b in &mut self.blocks {
            take(&mut b.conv1.w, params);
            take(&mut b.conv1.b, params);
            take(&mut b.conv2.w, params);
            take(&mut b.conv2.b, params);
        }
    }

    fn tensor_specs(&self, specs: &mut Vec<TensorSpec>, offset: &mut usize) {
        let mut push = |name: String, shape: Vec<usize>, len: usize, offset: &mut usize| {
            specs.push(TensorSpec { name, shape, offset: *offset, len });
            *offset += len;
        };
        let d = self.config.channels;
        push("stem.w".into(), vec![d, 1, 3, 3, 3], self.stem.w.len(), offset);
        push("stem.b".into(), vec![d], self.stem.b.len(), offset);
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("block{i}.conv1.w"), vec![d, d, 3, 3, 3], b.conv1.w.len(), offset);
            push(format!("block{i}.conv1.b"), vec![d], b.conv1.b.len(), offset);
            push(format!("block{i}.conv2.w"), vec![d, d, 3, 3, 3], b.conv2.w.len(), offset);
            push(format!("block{i}.conv2.b"), vec![d], b.conv2.b.len(), offset);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub encoder: EncoderConfig,
    /// Width of the selected radiomics vector R.
    pub rf_width: usize,
    /// Output width of each conversion layer.
    pub conv_width: usize,
    /// Output width of the fusion layer F.
    pub fusion_width: usize,
}

impl FusionConfig {
    pub fn desk(rf_width: usize) -> Self {
        FusionConfig { encoder: EncoderConfig::desk(), rf_width, conv_width: 512, fusion_width: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub encoder: Encoder3D,
    pub conv_rf: DenseLayer,
    pub conv_df: DenseLayer,
    pub fusion: DenseLayer,
    pub classifier: DenseLayer,
}

pub struct FusionCache {
    encoder: EncoderCache,
    rf: Vec<f64>,
    emb: Vec<f64>,
    rf_pre: Vec<f64>,
    df_pre: Vec<f64>,
    concat: Vec<f64>,
    fusion_pre: Vec<f64>,
    fusion_act: Vec<f64>,
}

impl FusionModel {
    pub fn init(config: &FusionConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let encoder = Encoder3D::init(&config.encoder, &mut rng)?;
        let d = encoder.embedding_dim();
        Ok(FusionModel {
            config: config.clone(),
            encoder,
            conv_rf: DenseLayer::he_init(config.conv_width, config.rf_width, &mut rng),
            conv_df: DenseLayer::he_init(config.conv_width, d, &mut rng),
            fusion: DenseLayer::he_init(config.fusion_width, 2 * config.conv_width, &mut rng),
            classifier: DenseLayer::he_init(NUM_CLASSES, config.fusion_width, &mut rng),
        })
    }

    pub fn forward(&self, rf: &[f64], patch: &Tensor) -> Result<(Vec<f64>, Vec<f64>, FusionCache)> {
        if rf.len() != self.config.rf_width {
            return Err(Error::DimMismatch(format!(
                "rf width {} vs configured {}",
                rf.len(),
                self.config.rf_width
            )));
        }
        let (emb, encoder_cache) = self.encoder.forward(patch)?;
        let rf_pre = self.conv_rf.forward(rf)?;
        let rf_act = relu(&rf_pre);
        let df_pre = self.conv_df.forward(&emb)?;
        let df_act = relu(&df_pre);
        // concatenation order fixed: [RF_converted, DF_converted]
        let mut concat = rf_act;
        concat.extend(&df_act);
        let fusion_pre = self.fusion.forward(&concat)?;
        let fusion_act = relu(&fusion_pre);
        let logits = self.classifier.forward(&fusion_act)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs = exps.iter().map(|e| e / sum).collect();
        Ok((
            probs,
            logits,
            FusionCache {
                encoder: encoder_cache,
                rf: rf.to_vec(),
                emb,
                rf_pre,
                df_pre,
                concat,
                fusion_pre,
                fusion_act,
            },
        ))
    }

    /// Cross-entropy loss and flat parameter gradients for one sample.
    pub fn loss_and_grad(&self, rf: &[f64], patch: &Tensor, label: usize) -> Result<(f64, Vec<f64>, usize)> {
        let (_, logits, cache) = self.forward(rf, patch)?;
        let (loss, probs, dlogits) = softmax_ce(&logits, label)?;
        let pred = argmax(&probs);
        let (d_fusion_act, dw_cls, db_cls) = self.classifier.backward(&cache.fusion_act, &dlogits)?;
        let d_fusion_pre = relu_backward(&cache.fusion_pre, &d_fusion_act);
        let (d_concat, dw_fus, db_fus) = self.fusion.backward(&cache.concat, &d_fusion_pre)?;
        let w = self.config.conv_width;
        let d_rf_act = &d_concat[..w];
        let d_df_act = &d_concat[w..];
        let d_rf_pre = relu_backward(&cache.rf_pre, d_rf_act);
        let (_, dw_rf, db_rf) = self.conv_rf.backward(&cache.rf, &d_rf_pre)?;
        let d_df_pre = relu_backward(&cache.df_pre, d_df_act);
        let (d_emb, dw_df, db_df) = self.conv_df.backward(&cache.emb, &d_df_pre)?;
        let enc_grads = self.encoder.backward(&cache.encoder, &d_emb)?;
        let mut grads = enc_grads;
        grads.extend(dw_rf);
        grads.extend(db_rf);
        grads.extend(dw_df);
        grads.extend(db_df);
        grads.extend(dw_fus);
        grads.extend(db_fus);
        grads.extend(dw_cls);
        grads.extend(db_cls);
        Ok((loss, grads, pred))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.flatten_into(&mut out);
        for layer in [&self.conv_rf, &self.conv_df, &self.fusion, &self.classifier] {
            out.extend(&layer.w);
            out.extend(&layer.b);
        }
        out
    }

    pub fn unflatten(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimMismatch(format!(
                "{} params for a model of {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut it = params.iter();
        self.encoder.unflatten_from(&mut it);
        for layer in [&mut self.conv_rf, &mut self.conv_df, &mut self.fusion, &mut self.classifier] {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + [&self.conv_rf, &self.conv_df, &self.fusion, &self.classifier]
                .iter()
                .map(|l| l.w.len() + l.b.len())
                .sum::<usize>()
    }

    fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        let mut offset = 0usize;
        self.encoder.tensor_specs(&mut specs, &mut offset);
        for (name, layer) in [
            ("conv_rf", &self.conv_rf),
            ("conv_df", &self.conv_df),
            ("fusion", &self.fusion),
            ("classifier", &self.classifier),
        ] {
            specs.push(TensorSpec {
                name: format!("{name}.w"),
                shape: vec![layer.out_dim, layer.in_dim],
                offset,
                len: layer.w.len(),
            });
            offset += layer.w.len();
            specs.push(TensorSpec {
                name: format!("{name}.b"),
                shape: vec![layer.out_dim],
                offset,
                len: layer.b.len(),
            });
            offset += layer.b.len();
        }
        specs
    }
}

/// Encoder plus a single dense head; the `CNN` baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub encoder: Encoder3D,
    pub head: DenseLayer,
}

impl CnnModel {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let encoder = Encoder3D::init(config, &mut rng)?;
        let d = encoder.embedding_dim();
        Ok(CnnModel { encoder, head: DenseLayer::he_init(NUM_CLASSES, d, &mut rng) })
    }

    pub fn forward(&self, patch: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (emb, _) = self.encoder.forward(patch)?;
        let logits = self.head.forward(&emb)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok((exps.iter().map(|e| e / sum).collect(), logits))
    }

    pub fn loss_and_grad(&self, patch: &Tensor, label: usize) -> Result<(f64, Vec<f64>, usize)> {
        let (emb, cache) = self.encoder.forward(patch)?;
        let logits = self.head.forward(&emb)?;
        let (loss, probs, dlogits) = softmax_ce(&logits, label)?;
        let (d_emb, dw, db) = self.head.backward(&emb, &dlogits)?;
        let mut grads = self.encoder.backward(&cache, &d_emb)?;
        grads.extend(dw);
        grads.extend(db);
        Ok((loss, grads, argmax(&probs)))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.encoder.flatten_into(&mut out);
        out.extend(&self.head.w);
        out.extend(&self.head.b);
        out
    }

    pub fn unflatten(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimMismatch("cnn param count".into()));
        }
        let mut it = params.iter();
        self.encoder.unflatten_from(&mut it);
        for v in self.head.w.iter_mut().chain(self.head.b.iter_mut()) {
            *v = *it.next().unwrap();
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.head.w.len() + self.head.b.len()
    }

    fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        let mut offset = 0usize;
        self.encoder.tensor_specs(&mut specs, &mut offset);
        specs.push(TensorSpec {
            name: "head.w".into(),
            shape: vec![self.head.out_dim, self.head.in_dim],
            offset,
            len: self.head.w.len(),
        });
        offset += self.head.w.len();
        specs.push(TensorSpec {
            name: "head.b".into(),
            shape: vec![self.head.out_dim],
            offset,
            len: self.head.b.len(),
        });
        specs
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Patch intensities mapped from the CT-like range into roughly [0, 1.2]
/// and reordered into a [1, nx, ny, nz] tensor.
pub fn patch_to_tensor(patch: &Volume) -> Tensor {
    let (nx, ny, nz) = patch.dims;
    let mut values = vec![0.0; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                values[(x * ny + y) * nz + z] = (patch.get(x, y, z) + 1000.0) / 1000.0;
            }
        }
    }
    Tensor { shape: vec![1, nx, ny, nz], values }
}

/// One training/evaluation sample: the fixed radiomics input, the patch
/// tensor, and the class code.
#[derive(Debug, Clone)]
pub struct FusionSample {
    pub id: String,
    pub rf: Vec<f64>,
    pub patch: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<TrainLogEntry>,
    pub best_epoch: usize,
}

/// Validation-loss early stopping: stop once `patience` epochs pass without
/// strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best_loss: f64::INFINITY, since_best: 0 }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best > self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// Batch gradients are computed per sample (optionally in parallel) and
/// reduced in index order, so results do not depend on thread count.
fn batch_loss_and_grad<F>(indices: &[usize], f: F, param_count: usize) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize) -> Result<(f64, Vec<f64>, usize)> + Sync,
{
    let per_sample: Vec<Result<(f64, Vec<f64>, usize)>> =
        indices.par_iter().map(|&i| f(i)).collect();
    let mut total_loss = 0.0;
    let mut grads = vec![0.0; param_count];
    for r in per_sample {
        let (loss, g, _) = r?;
        total_loss += loss;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / indices.len() as f64;
    for g in &mut grads {
        *g *= scale;
    }
    Ok((total_loss * scale, grads))
}

fn shuffled_indices(n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

macro_rules! sgd_train_loop {
    ($model:ident, $train:ident, $val:ident, $cfg:ident, $loss_of:expr, $eval_of:expr) => {{
        $cfg.validate()?;
        if $train.is_empty() || $val.is_empty() {
            return Err(Error::InvalidArgument("empty training or validation split".into()));
        }
        let param_count = $model.param_count();
        let mut velocity = vec![0.0f64; param_count];
        let mut rng = seeded_rng($cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut stopper = EarlyStopping::new($cfg.patience);
        let mut log = Vec::new();
        let mut best_params = $model.flatten();
        let mut best_epoch = 0usize;
        for epoch in 1..=$cfg.max_epochs {
            let order = shuffled_indices($train.len(), &mut rng);
            let mut train_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks($cfg.batch_size) {
                let (loss, grads) = batch_loss_and_grad(chunk, $loss_of, param_count)?;
                train_loss += loss;
                batches += 1;
                let mut params = $model.flatten();
                sgd_step(&mut params, &grads, &mut velocity, $cfg.learning_rate, $cfg.momentum)?;
                $model.unflatten(&params)?;
            }
            train_loss /= batches as f64;
            let (val_loss, val_accuracy) = $eval_of(&$model, $val)?;
            log.push(TrainLogEntry { epoch, train_loss, val_loss, val_accuracy });
            match stopper.observe(val_loss) {
                StopDecision::Improved => {
                    best_params = $model.flatten();
                    best_epoch = epoch;
                }
                StopDecision::Continue => {}
                StopDecision::Stop => break,
            }
        }
        $model.unflatten(&best_params)?;
        Ok(TrainOutcome { model: $model, log, best_epoch })
    }};
}

pub fn eval_fusion(model: &FusionModel, samples: &[FusionSample]) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, usize)>> = samples
        .par_iter()
        .map(|s| {
            let (_, logits, _) = model.forward(&s.rf, &s.patch)?;
            let (loss, probs, _) = softmax_ce(&logits, s.label)?;
            Ok((loss, argmax(&probs)))
        })
        .collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (r, s) in results.into_iter().zip(samples) {
        let (l, pred) = r?;
        loss += l;
        correct += (pred == s.label) as usize;
    }
    Ok((loss / samples.len() as f64, correct as f64 / samples.len() as f64))
}

pub fn eval_cnn(model: &CnnModel, samples: &[FusionSample]) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, usize)>> = samples
        .par_iter()
        .map(|s| {
            let (probs, logits) = model.forward(&s.patch)?;
            let (loss, _, _) = softmax_ce(&logits, s.label)?;
            Ok((loss, argmax(&probs)))
        })
        .collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (r, s) in results.into_iter().zip(samples) {
        let (l, pred) = r?;
        loss += l;
        correct += (pred == s.label) as usize;
    }
    Ok((loss / samples.len() as f64, correct as f64 / samples.len() as f64))
}

pub fn train_fusion(
    train: &[FusionSample],
    val: &[FusionSample],
    model_cfg: &FusionConfig,
    cfg: &SGDConfig,
) -> Result<TrainOutcome<FusionModel>> {
    let mut model = FusionModel::init(model_cfg, cfg.seed)?;
    sgd_train_loop!(
        model,
        train,
        val,
        cfg,
        |i: usize| {
            let s = &train[i];
            model.loss_and_grad(&s.rf, &s.patch, s.label)
        },
        eval_fusion
    )
}

pub fn train_cnn_baseline(
    train: &[FusionSample],
    val: &[FusionSample],
    encoder_cfg: &EncoderConfig,
    cfg: &SGDConfig,
) -> Result<TrainOutcome<CnnModel>> {
    let mut model = CnnModel::init(encoder_cfg, cfg.seed)?;
    sgd_train_loop!(
        model,
        train,
        val,
        cfg,
        |i: usize| {
            let s = &train[i];
            model.loss_and_grad(&s.patch, s.label)
        },
        eval_cnn
    )
}

/// One-vs-rest linear SVM over the selected radiomics vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSVM {
    /// NUM_CLASSES rows of rf_width weights.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub c: f64,
}

pub const SVM_ITERATIONS: usize = 2000;
pub const SVM_LEARNING_RATE: f64 = 0.01;

/// Full-batch subgradient descent on (1/2)|w|^2 + C * sum hinge, fixed
/// 1/(1 + t/100) decay. Deterministic.
pub fn train_svm(x: &[Vec<f64>], labels: &[usize], c: f64) -> Result<LinearSVM> {
    if x.is_empty() || x.len() != labels.len() {
        return Err(Error::DimMismatch("svm inputs".into()));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("svm needs at least 2 classes".into()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument("svm C must be > 0".into()));
    }
    let dim = x[0].len();
    if x.iter().any(|row| row.len() != dim) {
        return Err(Error::DimMismatch("ragged svm feature rows".into()));
    }
    let n = x.len();
    let mut weights = vec![vec![0.0f64; dim]; NUM_CLASSES];
    let mut biases = vec![0.0f64; NUM_CLASSES];
    for class in 0..NUM_CLASSES {
        let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
        let w = &mut weights[class];
        let b = &mut biases[class];
        for t in 0..SVM_ITERATIONS {
            let lr = SVM_LEARNING_RATE / (1.0 + t as f64 / 100.0);
            let mut gw: Vec<f64> = w.clone();
            let mut gb = 0.0;
            for i in 0..n {
                let margin = y[i] * (dot(w, &x[i]) + *b);
                if margin < 1.0 {
                    for (g, &v) in gw.iter_mut().zip(&x[i]) {
                        *g -= c * y[i] * v;
                    }
                    gb -= c * y[i];
                }
            }
            for (wj, gj) in w.iter_mut().zip(&gw) {
                *wj -= lr * gj;
            }
            *b -= lr * gb;
        }
    }
    Ok(LinearSVM { weights, biases, c })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearSVM {
    pub fn decision_values(&self, rf: &[f64]) -> Result<Vec<f64>> {
        if rf.len() != self.weights[0].len() {
            return Err(Error::DimMismatch("svm feature width".into()));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| dot(w, rf) + b)
            .collect())
    }

    /// Argmax decision value; ties go to the lowest class index.
    pub fn predict(&self, rf: &[f64]) -> Result<usize> {
        Ok(argmax(&self.decision_values(rf)?))
    }

    /// Softmax over the 4 decision values.
    pub fn probabilities(&self, rf: &[f64]) -> Result<Vec<f64>> {
        let d = self.decision_values(rf)?;
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = d.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.iter().map(|e| e / sum).collect())
    }
}

/// Unweighted elementwise mean of two probability vectors, renormalized.
pub fn combine_probabilities(p_svm: &[f64], p_cnn: &[f64]) -> Result<Vec<f64>> {
    if p_svm.len() != p_cnn.len() {
        return Err(Error::DimMismatch("probability vector lengths".into()));
    }
    for p in [p_svm, p_cnn] {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("not a probability vector: {p:?}")));
        }
    }
    let mean: Vec<f64> = p_svm.iter().zip(p_cnn).map(|(a, b)| (a + b) / 2.0).collect();
    let total: f64 = mean.iter().sum();
    Ok(mean.iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorSpec>,
    pub param_count: usize,
}

fn raw_path(base: &Path) -> PathBuf {
    let mut os = base.as_os_str().to_owned();
    os.push(".raw");
    PathBuf::from(os)
}

fn json_path(base: &Path) -> PathBuf {
    let mut os = base.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn write_checkpoint(base: &Path, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    let jp = json_path(base);
    let text = serde_json::to_string_pretty(header).map_err(|e| Error::json(&jp, e))?;
    std::fs::write(&jp, text).map_err(|e| Error::io(&jp, e))?;
    let rp = raw_path(base);
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&rp, bytes).map_err(|e| Error::io(&rp, e))
}

fn read_checkpoint(base: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let jp = json_path(base);
    let text = std::fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::json(&jp, e))?;
    let rp = raw_path(base);
    let bytes = std::fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    if bytes.len() != header.param_count * 8 {
        return Err(Error::PayloadSize { expected: header.param_count * 8, found: bytes.len() });
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, params))
}

pub fn save_fusion_model(model: &FusionModel, base: &Path, seed: u64, epoch: usize) -> Result<()> {
    let header = CheckpointHeader {
        kind: "fusion".into(),
        config: serde_json::to_value(&model.config).unwrap(),
        seed,
        epoch,
        tensors: model.tensor_specs(),
        param_count: model.param_count(),
    };
    write_checkpoint(base, &header, &model.flatten())
}

pub fn load_fusion_model(base: &Path) -> Result<FusionModel> {
    let (header, params) = read_checkpoint(base)?;
    if header.kind != "fusion" {
        return Err(Error::InvalidArgument(format!("checkpoint kind {} != fusion", header.kind)));
    }
    let config: FusionConfig =
        serde_json::from_value(header.config).map_err(|e| Error::json(base, e))?;
    let mut model = FusionModel::init(&config, header.seed)?;
    model.unflatten(&params)?;
    Ok(model)
}

pub fn save_cnn_model(model: &CnnModel, base: &Path, seed: u64, epoch: usize) -> Result<()> {
    let header = CheckpointHeader {
        kind: "cnn".into(),
        config: serde_json::to_value(&model.encoder.config).unwrap(),
        seed,
        epoch,
        tensors: model.tensor_specs(),
        param_count: model.param_count(),
    };
    write_checkpoint(base, &header, &model.flatten())
}

pub fn load_cnn_model(base: &Path) -> Result<CnnModel> {
    let (header, params) = read_checkpoint(base)?;
    if header.kind != "cnn" {
        return Err(Error::InvalidArgument(format!("checkpoint kind {} != cnn", header.kind)));
    }
    let config: EncoderConfig =
        serde_json::from_value(header.config).map_err(|e| Error::json(base, e))?;
    let mut model = CnnModel::init(&config, header.seed)?;
    model.unflatten(&params)?;
    Ok(model)
}

/// SHA-256 over the pipeline's canonical JSON; ties a checkpoint to the
/// exact selection state it was trained against.
pub fn pipeline_hash(pipeline: &SelectionPipeline) -> String {
    let json = serde_json::to_string(pipeline).expect("pipeline serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub checkpoint: String,
    pub pipeline_sha256: String,
}

pub fn save_sidecar(base: &Path, pipeline: &SelectionPipeline) -> Result<()> {
    let sidecar = CheckpointSidecar {
        checkpoint: base
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        pipeline_sha256: pipeline_hash(pipeline),
    };
    let mut os = base.as_os_str().to_owned();
    os.push(".pipeline.json");
    let path = PathBuf::from(os);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Errors unless the sidecar hash matches the given pipeline.
pub fn verify_sidecar(base: &Path, pipeline: &SelectionPipeline) -> Result<()> {
    let mut os = base.as_os_str().to_owned();
    os.push(".pipeline.json");
    let path = PathBuf::from(os);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: CheckpointSidecar =
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let expected = pipeline_hash(pipeline);
    if sidecar.pipeline_sha256 != expected {
        return Err(Error::HashMismatch { expected, found: sidecar.pipeline_sha256 });
    }
    Ok(())
}
