//! End-to-end desk-scale benchmark: phantom dataset -> radiomics ->
//! selection -> the four methods (RF+SVM, CNN, probability combination,
//! fusion), evaluated per seed on a stratified held-out split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{confusion, stratified_split, summarize, ConfusionMatrix, Split};
use crate::model::{
    argmax, combine_probabilities, patch_to_tensor, train_cnn_baseline, train_fusion, train_svm,
    CnnModel, EncoderConfig, FusionConfig, FusionModel, FusionSample, LinearSVM,
};
use crate::nn::SGDConfig;
use crate::phantom::{default_spec, generate_dataset, PhantomSpec};
use crate::radiomics::{extract_all, RadiomicsConfig};
use crate::select::{pipeline_fit, pipeline_transform, FeatureMatrix, SelectionConfig, SelectionPipeline};
use crate::volume::Dataset;

/// Radiomics features for every sample, in dataset order.
pub fn extract_features(dataset: &Dataset, cfg: &RadiomicsConfig) -> Result<FeatureMatrix> {
    if dataset.samples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let vectors: Vec<_> = dataset
        .samples
        .par_iter()
        .map(|s| extract_all(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = vectors[0].names().map(|n| n.to_string()).collect();
    let mut values = Vec::with_capacity(dataset.samples.len() * names.len());
    for v in &vectors {
        let row_names: Vec<&str> = v.names().collect();
        if row_names.len() != names.len() || row_names.iter().zip(&names).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument("inconsistent feature names across samples".into()));
        }
        values.extend(v.values());
    }
    FeatureMatrix::new(
        names,
        dataset.samples.iter().map(|s| s.id.clone()).collect(),
        dataset.samples.iter().map(|s| s.label.code()).collect(),
        values,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub class_counts: [usize; 4],
    pub dataset_seed: u64,
    pub patch_size: usize,
    pub radius_range: (f64, f64),
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
    pub radiomics: RadiomicsConfig,
    pub selection: SelectionConfig,
    pub encoder: EncoderConfig,
    pub conv_width: usize,
    pub fusion_width: usize,
    pub trainer: SGDConfig,
    pub train_fraction: f64,
    pub svm_c: f64,
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            // roughly the clinical distribution divided by 4
            class_counts: [40, 34, 13, 82],
            dataset_seed: 7,
            patch_size: 18,
            radius_range: (2.5, 3.1),
            texture_amplitude: 120.0,
            // High enough that texture statistics alone cannot settle every
            // class; the spatial cue survives and the fusion model wins.
            noise_sigma: 60.0,
            radiomics: RadiomicsConfig::default(),
            selection: SelectionConfig::default(),
            encoder: EncoderConfig { channels: 8, blocks: 3 },
            conv_width: 64,
            fusion_width: 32,
            trainer: SGDConfig {
                learning_rate: 0.005,
                momentum: 0.9,
                batch_size: 8,
                max_epochs: 40,
                patience: 8,
                seed: 0,
            },
            train_fraction: 0.8,
            svm_c: 1.0,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl BenchmarkConfig {
    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            patch_size: self.patch_size,
            radius_range: self.radius_range,
            texture_amplitude: self.texture_amplitude,
            noise_sigma: self.noise_sigma,
            ..default_spec()
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        generate_dataset(self.class_counts, &self.phantom_spec(), self.dataset_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub svm: MethodResult,
    pub cnn: MethodResult,
    pub combine: MethodResult,
    pub fusion: MethodResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub per_seed: Vec<SeedResult>,
    pub mean: [f64; 4],
    pub sd: [f64; 4],
}

pub const METHOD_NAMES: [&str; 4] = ["RF+SVM", "CNN", "RF+SVM+CNN", "Fusion"];

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn rows_of(split_ids: &[String], features: &FeatureMatrix) -> Result<Vec<usize>> {
    split_ids
        .iter()
        .map(|id| {
            features
                .sample_ids
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| Error::InvalidArgument(format!("id {id} missing from features")))
        })
        .collect()
}

pub fn fusion_samples(
    ids: &[String],
    dataset: &Dataset,
    rf: &FeatureMatrix,
) -> Result<Vec<FusionSample>> {
    ids.iter()
        .map(|id| {
            let sample = dataset
                .samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("id {id} missing from dataset")))?;
            let row = rf
                .sample_ids
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| Error::InvalidArgument(format!("id {id} missing from rf matrix")))?;
            Ok(FusionSample {
                id: id.clone(),
                rf: rf.row(row).to_vec(),
                patch: patch_to_tensor(&sample.patch),
                label: sample.label.code(),
            })
        })
        .collect()
}

/// Everything one seed produces: the fitted selection state, the three
/// trained models, and per-method test metrics.
pub struct SeedArtifacts {
    pub split: Split,
    pub pipeline: SelectionPipeline,
    pub svm: LinearSVM,
    pub cnn: CnnModel,
    pub fusion: FusionModel,
    pub result: SeedResult,
}

pub fn run_seed(
    dataset: &Dataset,
    features: &FeatureMatrix,
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<SeedArtifacts> {
    let split = stratified_split(dataset, cfg.train_fraction, seed)?;
    let train_rows = rows_of(&split.train_ids, features)?;
    let test_rows = rows_of(&split.test_ids, features)?;
    let x_train = features.select_rows(&train_rows)?;
    let x_test = features.select_rows(&test_rows)?;

    let mut sel_cfg = cfg.selection.clone();
    sel_cfg.seed = seed;
    let pipeline = pipeline_fit(&x_train, &sel_cfg)?;
    let rf_train = pipeline_transform(&pipeline, &x_train)?;
    let rf_test = pipeline_transform(&pipeline, &x_test)?;

    // RF+SVM
    let svm_x: Vec<Vec<f64>> = (0..rf_train.n_samples()).map(|i| rf_train.row(i).to_vec()).collect();
    let svm = train_svm(&svm_x, &rf_train.labels, cfg.svm_c)?;
    let svm_probs: Vec<Vec<f64>> = (0..rf_test.n_samples())
        .map(|i| svm.probabilities(rf_test.row(i)))
        .collect::<Result<_>>()?;
    let svm_preds: Vec<usize> = (0..rf_test.n_samples())
        .map(|i| svm.predict(rf_test.row(i)))
        .collect::<Result<_>>()?;

    // network inputs; validation for early stopping is carved out of the
    // training split so the test set stays untouched
    let inner = {
        let train_set: Vec<_> = dataset
            .samples
            .iter()
            .filter(|s| split.train_ids.contains(&s.id))
            .cloned()
            .collect();
        let manifest = dataset
            .manifest
            .iter()
            .filter(|m| split.train_ids.contains(&m.id))
            .cloned()
            .collect();
        let train_ds = Dataset::new(train_set, manifest)?;
        stratified_split(&train_ds, 0.85, seed.wrapping_add(1))?
    };
    let fit_samples = fusion_samples(&inner.train_ids, dataset, &rf_train)?;
    let val_samples = fusion_samples(&inner.test_ids, dataset, &rf_train)?;
    let test_samples = fusion_samples(&split.test_ids, dataset, &rf_test)?;

    let mut trainer = cfg.trainer.clone();
    trainer.seed = seed;

    let enc_cfg = cfg.encoder.clone();
    let cnn_outcome = train_cnn_baseline(&fit_samples, &val_samples, &enc_cfg, &trainer)?;
    let cnn = cnn_outcome.model;
    let cnn_probs: Vec<Vec<f64>> = test_samples
        .par_iter()
        .map(|s| cnn.forward(&s.patch).map(|(p, _)| p))
        .collect::<Result<_>>()?;
    let cnn_preds: Vec<usize> = cnn_probs.iter().map(|p| argmax(p)).collect();

    let fusion_cfg = FusionConfig {
        encoder: cfg.encoder.clone(),
        rf_width: rf_train.n_features(),
        conv_width: cfg.conv_width,
        fusion_width: cfg.fusion_width,
    };
    let fusion_outcome = train_fusion(&fit_samples, &val_samples, &fusion_cfg, &trainer)?;
    let fusion = fusion_outcome.model;
    let fusion_preds: Vec<usize> = test_samples
        .par_iter()
        .map(|s| fusion.forward(&s.rf, &s.patch).map(|(p, _, _)| argmax(&p)))
        .collect::<Result<_>>()?;

    let combine_preds: Vec<usize> = svm_probs
        .iter()
        .zip(&cnn_probs)
        .map(|(a, b)| combine_probabilities(a, b).map(|p| argmax(&p)))
        .collect::<Result<_>>()?;

    let labels: Vec<usize> = test_samples.iter().map(|s| s.label).collect();
    let method = |preds: &[usize]| -> Result<MethodResult> {
        let cm = confusion(preds, &labels)?;
        let m = summarize(&cm)?;
        Ok(MethodResult { accuracy: m.accuracy, confusion: cm })
    };
    let result = SeedResult {
        seed,
        svm: method(&svm_preds)?,
        cnn: method(&cnn_preds)?,
        combine: method(&combine_preds)?,
        fusion: method(&fusion_preds)?,
    };
    Ok(SeedArtifacts { split, pipeline, svm, cnn, fusion, result })
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let dataset = cfg.generate()?;
    let features = extract_features(&dataset, &cfg.radiomics)?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        per_seed.push(run_seed(&dataset, &features, cfg, seed)?.result);
    }
    Ok(summarize_report(per_seed))
}

pub fn summarize_report(per_seed: Vec<SeedResult>) -> BenchmarkReport {
    let columns: [Vec<f64>; 4] = [
        per_seed.iter().map(|r| r.svm.accuracy).collect(),
        per_seed.iter().map(|r| r.cnn.accuracy).collect(),
        per_seed.iter().map(|r| r.combine.accuracy).collect(),
        per_seed.iter().map(|r| r.fusion.accuracy).collect(),
    ];
    let mut mean = [0.0; 4];
    let mut sd = [0.0; 4];
    for (i, col) in columns.iter().enumerate() {
        let (m, s) = mean_sd(col);
        mean[i] = m;
        sd[i] = s;
    }
    BenchmarkReport { per_seed, mean, sd }
}

impl BenchmarkReport {
    /// Aligned accuracy table, one row per method.
    pub fn render_table(&self) -> String {
        let mut out = String::from("method        mean_acc     sd\n");
        for (i, name) in METHOD_NAMES.iter().enumerate() {
            out.push_str(&format!("{name:<12}{:>10.4}{:>8.4}\n", self.mean[i], self.sd[i]));
        }
        out
    }
}
