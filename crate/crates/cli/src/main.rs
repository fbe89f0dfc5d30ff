//! `nfp`: batch front end for the nodule pipeline. Stages communicate via
//! files (dataset directory, features.csv, selection artifacts, checkpoints)
//! so each one can be rerun and cached independently. Failures exit nonzero
//! with one machine-readable JSON object on stderr.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use nfp_core::benchmark::{extract_features, fusion_samples, rows_of, run_benchmark};
use nfp_core::eval::{confusion, stratified_split_ids, summarize, ConfusionMatrix, Split, NUM_CLASSES};
use nfp_core::gradcheck::gradient_check_suite;
use nfp_core::model::{
    argmax, combine_probabilities, load_cnn_model, load_fusion_model, save_cnn_model,
    save_fusion_model, save_sidecar, train_cnn_baseline, train_fusion, train_svm, verify_sidecar,
    FusionConfig, FusionSample, LinearSVM,
};
use nfp_core::select::{
    load_pipeline, pipeline_fit, pipeline_transform, save_pipeline, FeatureMatrix,
};
use nfp_core::volume::{load_dataset, save_dataset, Dataset};

#[derive(Parser)]
#[command(name = "nfp", version, about = "Nodule invasiveness grading pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModelKind {
    Svm,
    Cnn,
    Fusion,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic nodule dataset on disk.
    PhantomGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract radiomics features from a dataset directory into a CSV.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Split the samples, fit the selection pipeline on the training rows,
    /// and write pipeline.json, rf_train.csv, rf_test.csv, split.json.
    Select {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split seed; also used as the selection seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model against the artifacts of `select`.
    Train {
        #[arg(long)]
        model: ModelKind,
        /// Dataset directory; required for cnn and fusion.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        select_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training seed; defaults to the split seed recorded by `select`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained model on the held-out split; writes metrics.json.
    Eval {
        #[arg(long, conflicts_with = "combine")]
        model: Option<ModelKind>,
        /// Probability combination of two trained models, e.g. `--combine svm cnn`.
        #[arg(long, num_args = 2)]
        combine: Option<Vec<String>>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        select_dir: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        /// Path of the metrics JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks for all layers and the fusion model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fuzz cases per layer kind.
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Multi-seed four-method comparison on a generated dataset.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional path for the full JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    kind: String,
    message: String,
}

impl CliError {
    fn new(kind: &str, message: String) -> Self {
        CliError { kind: kind.into(), message }
    }

    pub fn config(message: String) -> Self {
        CliError::new("config", message)
    }
}

impl From<nfp_core::Error> for CliError {
    fn from(e: nfp_core::Error) -> Self {
        use nfp_core::Error as E;
        let kind = match &e {
            E::Io { .. } => "io",
            E::Json { .. } | E::Csv { .. } => "parse",
            E::HashMismatch { .. } => "hash_mismatch",
            E::InvalidSpec(_) => "config",
            _ => "invalid_input",
        };
        CliError::new(kind, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: &'a str,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport { error: ErrorBody { kind: &e.kind, message: &e.message } };
            eprintln!("{}", serde_json::to_string(&report).expect("error report is serializable"));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::PhantomGen { out, config, seed } => cmd_phantom_gen(&out, config.as_deref(), seed),
        Command::Extract { data, out, config } => cmd_extract(&data, &out, config.as_deref()),
        Command::Select { features, out, config, seed } => {
            cmd_select(&features, &out, config.as_deref(), seed)
        }
        Command::Train { model, data, select_dir, out, config, seed } => {
            cmd_train(model, data.as_deref(), &select_dir, &out, config.as_deref(), seed)
        }
        Command::Eval { model, combine, data, select_dir, model_dir, out } => {
            cmd_eval(model, combine, data.as_deref(), &select_dir, &model_dir, &out)
        }
        Command::Gradcheck { seed, cases } => cmd_gradcheck(seed, cases),
        Command::Bench { config, out } => cmd_bench(config.as_deref(), out.as_deref()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::new("serialize", format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::new("io", format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new("io", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new("parse", format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::new("io", format!("cannot create {}: {e}", path.display())))
}

fn cmd_phantom_gen(out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = config::load(config)?;
    let mut bench = cfg.to_benchmark();
    if let Some(s) = seed {
        bench.dataset_seed = s;
    }
    let dataset = bench.generate()?;
    ensure_dir(out)?;
    save_dataset(&dataset, out)?;
    let mut per_class = [0usize; NUM_CLASSES];
    for s in &dataset.samples {
        per_class[s.label.code()] += 1;
    }
    println!(
        "{}",
        serde_json::json!({
            "samples": dataset.samples.len(),
            "per_class": per_class,
            "seed": bench.dataset_seed,
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_extract(data: &Path, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = config::load(config)?;
    let dataset = load_dataset(data)?;
    let features = extract_features(&dataset, &cfg.radiomics)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    features.save_csv(out)?;
    println!(
        "{}",
        serde_json::json!({
            "samples": features.n_samples(),
            "features": features.n_features(),
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_select(features: &Path, out: &Path, config: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let cfg = config::load(config)?;
    let x = FeatureMatrix::load_csv(features)?;
    let pairs: Vec<(String, usize)> = x
        .sample_ids
        .iter()
        .cloned()
        .zip(x.labels.iter().copied())
        .collect();
    let split = stratified_split_ids(&pairs, cfg.eval.train_fraction, seed)?;
    let train_rows = rows_of(&split.train_ids, &x)?;
    let test_rows = rows_of(&split.test_ids, &x)?;
    let x_train = x.select_rows(&train_rows)?;
    let x_test = x.select_rows(&test_rows)?;
    let mut sel = cfg.selection.clone();
    sel.seed = seed;
    let pipeline = pipeline_fit(&x_train, &sel)?;
    let rf_train = pipeline_transform(&pipeline, &x_train)?;
    let rf_test = pipeline_transform(&pipeline, &x_test)?;
    ensure_dir(out)?;
    save_pipeline(&pipeline, &out.join("pipeline.json"))?;
    rf_train.save_csv(&out.join("rf_train.csv"))?;
    rf_test.save_csv(&out.join("rf_test.csv"))?;
    write_json(&out.join("split.json"), &split)?;
    println!(
        "{}",
        serde_json::json!({
            "train": split.train_ids.len(),
            "test": split.test_ids.len(),
            "selected_features": rf_train.n_features(),
            "seed": seed,
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

/// Validation for early stopping is carved out of the training ids so the
/// held-out test split stays untouched; same rule as the benchmark runner.
fn inner_validation_split(
    split: &Split,
    dataset: &Dataset,
    seed: u64,
) -> Result<Split, CliError> {
    let pairs: Vec<(String, usize)> = split
        .train_ids
        .iter()
        .map(|id| {
            dataset
                .samples
                .iter()
                .find(|s| &s.id == id)
                .map(|s| (s.id.clone(), s.label.code()))
                .ok_or_else(|| {
                    CliError::new("invalid_input", format!("id {id} missing from dataset"))
                })
        })
        .collect::<Result<_, _>>()?;
    Ok(stratified_split_ids(&pairs, 0.85, seed.wrapping_add(1))?)
}

fn require_data(data: Option<&Path>) -> Result<Dataset, CliError> {
    let dir = data.ok_or_else(|| {
        CliError::new("invalid_input", "--data is required for this model".into())
    })?;
    Ok(load_dataset(dir)?)
}

fn cmd_train(
    model: ModelKind,
    data: Option<&Path>,
    select_dir: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = config::load(config)?;
    let split: Split = read_json(&select_dir.join("split.json"))?;
    let seed = seed.unwrap_or(split.seed);
    let rf_train = FeatureMatrix::load_csv(&select_dir.join("rf_train.csv"))?;
    let pipeline = load_pipeline(&select_dir.join("pipeline.json"))?;
    ensure_dir(out)?;

    match model {
        ModelKind::Svm => {
            let x: Vec<Vec<f64>> = (0..rf_train.n_samples()).map(|i| rf_train.row(i).to_vec()).collect();
            let svm = train_svm(&x, &rf_train.labels, cfg.eval.svm_c)?;
            write_json(&out.join("svm.json"), &svm)?;
            save_sidecar(&out.join("svm"), &pipeline)?;
            println!(
                "{}",
                serde_json::json!({
                    "model": "svm",
                    "train_samples": rf_train.n_samples(),
                    "out": out.display().to_string(),
                })
            );
        }
        ModelKind::Cnn | ModelKind::Fusion => {
            let dataset = require_data(data)?;
            let inner = inner_validation_split(&split, &dataset, seed)?;
            let fit = fusion_samples(&inner.train_ids, &dataset, &rf_train)?;
            let val = fusion_samples(&inner.test_ids, &dataset, &rf_train)?;
            let mut trainer = cfg.trainer.clone();
            trainer.seed = seed;
            let (name, best_epoch, epochs) = match model {
                ModelKind::Cnn => {
                    let outcome = train_cnn_baseline(&fit, &val, &cfg.model.encoder, &trainer)?;
                    save_cnn_model(&outcome.model, &out.join("cnn"), seed, outcome.best_epoch)?;
                    write_json(&out.join("cnn.log.json"), &outcome.log)?;
                    ("cnn", outcome.best_epoch, outcome.log.len())
                }
                ModelKind::Fusion => {
                    let fusion_cfg = FusionConfig {
                        encoder: cfg.model.encoder.clone(),
                        rf_width: rf_train.n_features(),
                        conv_width: cfg.model.conv_width,
                        fusion_width: cfg.model.fusion_width,
                    };
                    let outcome = train_fusion(&fit, &val, &fusion_cfg, &trainer)?;
                    save_fusion_model(&outcome.model, &out.join("fusion"), seed, outcome.best_epoch)?;
                    save_sidecar(&out.join("fusion"), &pipeline)?;
                    write_json(&out.join("fusion.log.json"), &outcome.log)?;
                    ("fusion", outcome.best_epoch, outcome.log.len())
                }
                ModelKind::Svm => unreachable!(),
            };
            println!(
                "{}",
                serde_json::json!({
                    "model": name,
                    "seed": seed,
                    "best_epoch": best_epoch,
                    "epochs_run": epochs,
                    "out": out.display().to_string(),
                })
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricsOut {
    method: String,
    seed: u64,
    accuracy: f64,
    confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

fn finish_eval(
    method: &str,
    split: &Split,
    preds: &[usize],
    labels: &[usize],
    out: &Path,
) -> Result<(), CliError> {
    let cm = confusion(preds, labels)?;
    let metrics = summarize(&cm)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_json(
        out,
        &MetricsOut {
            method: method.into(),
            seed: split.seed,
            accuracy: metrics.accuracy,
            confusion: cm.counts,
        },
    )?;
    println!("method: {method}");
    println!("accuracy: {:.4}", metrics.accuracy);
    print!("{}", cm.render());
    Ok(())
}

fn svm_probabilities(
    svm: &LinearSVM,
    rf_test: &FeatureMatrix,
    ids: &[String],
) -> Result<Vec<Vec<f64>>, CliError> {
    let rows = rows_of(ids, rf_test)?;
    rows.iter()
        .map(|&r| Ok(svm.probabilities(rf_test.row(r))?))
        .collect()
}

fn cmd_eval(
    model: Option<ModelKind>,
    combine: Option<Vec<String>>,
    data: Option<&Path>,
    select_dir: &Path,
    model_dir: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let split: Split = read_json(&select_dir.join("split.json"))?;
    let pipeline = load_pipeline(&select_dir.join("pipeline.json"))?;
    let rf_test = FeatureMatrix::load_csv(&select_dir.join("rf_test.csv"))?;
    let test_rows = rows_of(&split.test_ids, &rf_test)?;
    let labels: Vec<usize> = test_rows.iter().map(|&r| rf_test.labels[r]).collect();

    if let Some(pair) = combine {
        if pair != ["svm", "cnn"] {
            return Err(CliError::new(
                "invalid_input",
                format!("--combine supports exactly `svm cnn`, got {pair:?}"),
            ));
        }
        let svm: LinearSVM = read_json(&model_dir.join("svm.json"))?;
        verify_sidecar(&model_dir.join("svm"), &pipeline)?;
        let svm_probs = svm_probabilities(&svm, &rf_test, &split.test_ids)?;
        let dataset = require_data(data)?;
        let cnn = load_cnn_model(&model_dir.join("cnn"))?;
        let samples = fusion_samples(&split.test_ids, &dataset, &rf_test)?;
        let preds: Vec<usize> = samples
            .iter()
            .zip(&svm_probs)
            .map(|(s, ps): (&FusionSample, _)| {
                let (pc, _) = cnn.forward(&s.patch)?;
                Ok::<usize, nfp_core::Error>(argmax(&combine_probabilities(ps, &pc)?))
            })
            .collect::<Result<_, _>>()?;
        return finish_eval("RF+SVM+CNN", &split, &preds, &labels, out);
    }

    match model {
        None => Err(CliError::new("invalid_input", "pass --model or --combine".into())),
        Some(ModelKind::Svm) => {
            let svm: LinearSVM = read_json(&model_dir.join("svm.json"))?;
            verify_sidecar(&model_dir.join("svm"), &pipeline)?;
            let preds: Vec<usize> = test_rows
                .iter()
                .map(|&r| svm.predict(rf_test.row(r)))
                .collect::<Result<_, _>>()?;
            finish_eval("RF+SVM", &split, &preds, &labels, out)
        }
        Some(ModelKind::Cnn) => {
            let dataset = require_data(data)?;
            let cnn = load_cnn_model(&model_dir.join("cnn"))?;
            let samples = fusion_samples(&split.test_ids, &dataset, &rf_test)?;
            let preds: Vec<usize> = samples
                .iter()
                .map(|s| cnn.forward(&s.patch).map(|(p, _)| argmax(&p)))
                .collect::<Result<_, _>>()?;
            finish_eval("CNN", &split, &preds, &labels, out)
        }
        Some(ModelKind::Fusion) => {
            verify_sidecar(&model_dir.join("fusion"), &pipeline)?;
            let dataset = require_data(data)?;
            let fusion = load_fusion_model(&model_dir.join("fusion"))?;
            let samples = fusion_samples(&split.test_ids, &dataset, &rf_test)?;
            let preds: Vec<usize> = samples
                .iter()
                .map(|s| fusion.forward(&s.rf, &s.patch).map(|(p, _, _)| argmax(&p)))
                .collect::<Result<_, _>>()?;
            finish_eval("Fusion", &split, &preds, &labels, out)
        }
    }
}

fn cmd_gradcheck(seed: u64, cases: usize) -> Result<(), CliError> {
    let report = gradient_check_suite(seed, cases)?;
    let mut failures = 0usize;
    for case in &report {
        let verdict = if case.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {name}: max_rel_err {err:.3e} (tol {tol:.0e})",
            name = case.name,
            err = case.max_rel_err,
            tol = case.tolerance,
        );
        if !case.passed() {
            failures += 1;
        }
    }
    println!("{} cases, {} failed", report.len(), failures);
    if failures > 0 {
        return Err(CliError::new("gradcheck", format!("{failures} gradient checks failed")));
    }
    Ok(())
}

fn cmd_bench(config: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = config::load(config)?;
    let bench = cfg.to_benchmark();
    let report = run_benchmark(&bench)?;
    print!("{}", report.render_table());
    for (i, name) in nfp_core::benchmark::METHOD_NAMES.iter().enumerate() {
        let mut counts = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for seed_result in &report.per_seed {
            let cm = match i {
                0 => &seed_result.svm.confusion,
                1 => &seed_result.cnn.confusion,
                2 => &seed_result.combine.confusion,
                _ => &seed_result.fusion.confusion,
            };
            for r in 0..NUM_CLASSES {
                for c in 0..NUM_CLASSES {
                    counts[r][c] += cm.counts[r][c];
                }
            }
        }
        println!("\n{name} (summed over {} seeds)", report.per_seed.len());
        print!("{}", ConfusionMatrix { counts }.render());
    }
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                ensure_dir(parent)?;
            }
        }
        write_json(path, &report)?;
    }
    Ok(())
}
