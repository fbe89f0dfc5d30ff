//! Single JSON run configuration shared by every subcommand. Versioned
//! schema, unknown keys rejected at every level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use nfp_core::benchmark::BenchmarkConfig;
use nfp_core::model::EncoderConfig;
use nfp_core::nn::SGDConfig;
use nfp_core::radiomics::RadiomicsConfig;
use nfp_core::select::SelectionConfig;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub class_counts: [usize; 4],
    pub dataset_seed: u64,
    pub patch_size: usize,
    pub radius_range: (f64, f64),
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub conv_width: usize,
    pub fusion_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub train_fraction: f64,
    pub svm_c: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub phantom: PhantomSection,
    pub radiomics: RadiomicsConfig,
    pub selection: SelectionConfig,
    pub model: ModelSection,
    pub trainer: SGDConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        RunConfig {
            schema_version: SCHEMA_VERSION,
            phantom: PhantomSection {
                class_counts: b.class_counts,
                dataset_seed: b.dataset_seed,
                patch_size: b.patch_size,
                radius_range: b.radius_range,
                texture_amplitude: b.texture_amplitude,
                noise_sigma: b.noise_sigma,
            },
            radiomics: b.radiomics,
            selection: b.selection,
            model: ModelSection {
                encoder: b.encoder,
                conv_width: b.conv_width,
                fusion_width: b.fusion_width,
            },
            trainer: b.trainer,
            eval: EvalSection {
                train_fraction: b.train_fraction,
                svm_c: b.svm_c,
                seeds: b.seeds,
            },
        }
    }
}

impl RunConfig {
    pub fn to_benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            class_counts: self.phantom.class_counts,
            dataset_seed: self.phantom.dataset_seed,
            patch_size: self.phantom.patch_size,
            radius_range: self.phantom.radius_range,
            texture_amplitude: self.phantom.texture_amplitude,
            noise_sigma: self.phantom.noise_sigma,
            radiomics: self.radiomics.clone(),
            selection: self.selection.clone(),
            encoder: self.model.encoder.clone(),
            conv_width: self.model.conv_width,
            fusion_width: self.model.fusion_width,
            trainer: self.trainer.clone(),
            train_fraction: self.eval.train_fraction,
            svm_c: self.eval.svm_c,
            seeds: self.eval.seeds.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let bench = self.to_benchmark();
        bench.phantom_spec().validate()?;
        bench.trainer.validate()?;
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(CliError::config(format!(
                "eval.train_fraction must be in (0, 1), got {}",
                self.eval.train_fraction
            )));
        }
        if self.eval.seeds.is_empty() {
            return Err(CliError::config("eval.seeds must not be empty".into()));
        }
        Ok(())
    }
}

/// Defaults when no --config is given; otherwise parse and validate the file.
pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("invalid config {}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
